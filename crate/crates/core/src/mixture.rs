//! Response-emotion sampling per polarity group, emotion mimicry, the
//! emotion-refined context encoder and the gated fusion of both branches.

use autodiff::{Element, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::context::EncodedContext;
use crate::emotion::{EmotionGrouping, Polarity, NUM_EMOTIONS};
use crate::error::{MimeError, Result};
use crate::layers::{BlockSpec, Dropout, EmbeddingTable, FullyConnected, TransformerEncoder};
use crate::MimeRng;

/// A named set of emotion ids sharing one latent sample and one distribution head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmotionGroup {
    pub name: &'static str,
    pub members: Vec<usize>,
}

/// Positive then negative when grouping is on; one group of all 32 otherwise.
pub fn emotion_groups(grouping: &EmotionGrouping, grouped: bool) -> Vec<EmotionGroup> {
    if grouped {
        vec![
            EmotionGroup {
                name: "positive",
                members: grouping.group(Polarity::Positive).to_vec(),
            },
            EmotionGroup {
                name: "negative",
                members: grouping.group(Polarity::Negative).to_vec(),
            },
        ]
    } else {
        vec![EmotionGroup {
            name: "all",
            members: (0..NUM_EMOTIONS).collect(),
        }]
    }
}

/// Diagonal Gaussian; `std = exp(0.5 * log_var)`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianParams {
    pub mean: Var,
    pub log_var: Var,
    pub std: Var,
}

/// `relu(FC(input))` trunk followed by a mean and a log-variance head per group.
#[derive(Debug, Clone)]
pub struct SamplerNet {
    pub trunk: FullyConnected,
    pub mean_heads: Vec<FullyConnected>,
    pub log_var_heads: Vec<FullyConnected>,
}

impl SamplerNet {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut autodiff::ParamStore<T>,
        name: &str,
        in_dim: usize,
        dim: usize,
        groups: &[EmotionGroup],
        rng: &mut R,
    ) -> Result<Self> {
        let trunk = FullyConnected::new(store, &format!("{name}.trunk"), in_dim, dim, rng)?;
        let mut mean_heads = Vec::new();
        let mut log_var_heads = Vec::new();
        for g in groups {
            mean_heads.push(FullyConnected::new(store, &format!("{name}.{}.mean", g.name), dim, dim, rng)?);
            log_var_heads.push(FullyConnected::new(store, &format!("{name}.{}.log_var", g.name), dim, dim, rng)?);
        }
        Ok(Self {
            trunk,
            mean_heads,
            log_var_heads,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, input: Var) -> Result<Vec<GaussianParams>> {
        let h = self.trunk.forward(tape, input)?;
        let h = tape.relu(h)?;
        self.mean_heads
            .iter()
            .zip(&self.log_var_heads)
            .map(|(m, v)| {
                let mean = m.forward(tape, h)?;
                let log_var = v.forward(tape, h)?;
                let half = tape.scale(log_var, 0.5)?;
                let std = tape.exp(half)?;
                Ok(GaussianParams { mean, log_var, std })
            })
            .collect()
    }
}

/// `mean + r * std` with standard-normal `r`; `None` uses `r = 0`.
pub fn sample_z<T: Element>(tape: &mut Tape<T>, params: &GaussianParams, noise: Option<&mut MimeRng>) -> Result<Var> {
    let Some(rng) = noise else {
        return Ok(params.mean);
    };
    let shape = tape.shape(params.mean).to_vec();
    let n: usize = shape.iter().product();
    let r: Vec<T> = (0..n)
        .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let r = tape.constant(Tensor::new(&shape, r)?);
    let scaled = tape.mul(r, params.std)?;
    Ok(tape.add(params.mean, scaled)?)
}

/// `KL(q || p)` for diagonal Gaussians, summed over coordinates and
/// averaged over the leading batch axis.
pub fn kl_term<T: Element>(tape: &mut Tape<T>, q: &GaussianParams, p: &GaussianParams) -> Result<Var> {
    let shape = tape.shape(q.mean).to_vec();
    if shape != tape.shape(p.mean) {
        return Err(MimeError::Invalid("KL between Gaussians of different shapes".into()));
    }
    let batch = if shape.len() > 1 { shape[0] } else { 1 };
    let log_ratio = tape.sub(q.log_var, p.log_var)?;
    let var_ratio = tape.exp(log_ratio)?;
    let diff = tape.sub(q.mean, p.mean)?;
    let sq = tape.mul(diff, diff)?;
    let neg_lv = tape.scale(p.log_var, -1.0)?;
    let inv_var = tape.exp(neg_lv)?;
    let mahal = tape.mul(sq, inv_var)?;
    let t = tape.add(var_ratio, mahal)?;
    let t = tape.sub(t, log_ratio)?;
    let t = tape.add_scalar(t, -1.0)?;
    // Each coordinate's term is non-negative; relu removes rounding below zero.
    let t = tape.relu(t)?;
    let s = tape.sum(t)?;
    Ok(tape.scale(s, 0.5 / batch as f64)?)
}

/// `distribution [B, n] x rows of the emotion table for the members [n, D]`.
pub fn pool_group_emotion<T: Element>(
    tape: &mut Tape<T>,
    distribution: Var,
    table: &EmbeddingTable,
    members: &[usize],
) -> Result<Var> {
    let rows = table.lookup(tape, members, &[members.len()])?;
    Ok(tape.matmul(distribution, rows)?)
}

/// Routes the same-polarity vector to the mimicking branch per row.
/// Returns `(mimic, non_mimic)`.
pub fn select_mimicry<T: Element>(
    tape: &mut Tape<T>,
    polarity: &[Polarity],
    e_pos: Var,
    e_neg: Var,
) -> Result<(Var, Var)> {
    let shape = tape.shape(e_pos).to_vec();
    if shape != tape.shape(e_neg) || shape.first() != Some(&polarity.len()) {
        return Err(MimeError::Invalid(format!(
            "mimicry selection over {} rows with vectors {shape:?}",
            polarity.len()
        )));
    }
    let pick = |p: Polarity, want: Polarity| if p == want { T::one() } else { T::zero() };
    let b = polarity.len();
    let pos = tape.constant(Tensor::new(&[b, 1], polarity.iter().map(|&p| pick(p, Polarity::Positive)).collect())?);
    let neg = tape.constant(Tensor::new(&[b, 1], polarity.iter().map(|&p| pick(p, Polarity::Negative)).collect())?);
    let mix = |tape: &mut Tape<T>, first: Var, second: Var| -> Result<Var> {
        let a = tape.mul(pos, first)?;
        let c = tape.mul(neg, second)?;
        Ok(tape.add(a, c)?)
    };
    let mimic = mix(tape, e_pos, e_neg)?;
    let non_mimic = mix(tape, e_neg, e_pos)?;
    Ok((mimic, non_mimic))
}

/// Encodes `[hidden_i ; emotion]` rows. The concatenated width is projected
/// back to the model width before the encoder blocks.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub input: FullyConnected,
    pub encoder: TransformerEncoder,
}

impl Refiner {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut autodiff::ParamStore<T>,
        layers: usize,
        dims: BlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            input: FullyConnected::new(store, "refiner.input", 2 * dims.width, dims.width, rng)?,
            encoder: TransformerEncoder::new(store, "refiner", layers, dims, rng)?,
        })
    }

    fn attach<T: Element>(&self, tape: &mut Tape<T>, hidden: Var, emotion: Var) -> Result<Var> {
        let hs = tape.shape(hidden).to_vec();
        let e = tape.reshape(emotion, &[hs[0], 1, hs[2]])?;
        let e = tape.expand(e, &hs)?;
        Ok(tape.concat(&[hidden, e], 2)?)
    }

    pub fn refine<T: Element>(
        &self,
        tape: &mut Tape<T>,
        hidden: Var,
        emotion: Var,
        valid: &[bool],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let x = self.attach(tape, hidden, emotion)?;
        let x = self.input.forward(tape, x)?;
        self.encoder.forward(tape, x, valid, drop)
    }

    /// Both branches in one pass through the shared weights, stacked on the
    /// batch axis.
    pub fn refine_pair<T: Element>(
        &self,
        tape: &mut Tape<T>,
        hidden: Var,
        mimic: Var,
        non_mimic: Var,
        valid: &[bool],
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let b = tape.shape(hidden)[0];
        let first = self.attach(tape, hidden, mimic)?;
        let second = self.attach(tape, hidden, non_mimic)?;
        let x = tape.concat(&[first, second], 0)?;
        let x = self.input.forward(tape, x)?;
        let both_valid: Vec<bool> = valid.iter().chain(valid).copied().collect();
        let out = self.encoder.forward(tape, x, &both_valid, drop)?;
        Ok((tape.slice(out, 0, 0, b)?, tape.slice(out, 0, b, b)?))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// Sigmoid gate over the concatenated branches, `[B, L, 2D]`.
    pub gate: Var,
    pub fused: Var,
}

/// Word-level gated combination of the two refined sequences.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub contrib: FullyConnected,
    pub fused: FullyConnected,
}

impl Fusion {
    pub fn new<T: Element, R: Rng + ?Sized>(store: &mut autodiff::ParamStore<T>, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            contrib: FullyConnected::new(store, "fusion.contrib", 2 * dim, 2 * dim, rng)?,
            fused: FullyConnected::new(store, "fusion.fused", 2 * dim, dim, rng)?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, mimic: Var, non_mimic: Var) -> Result<FusionOutput> {
        if tape.shape(mimic) != tape.shape(non_mimic) {
            return Err(MimeError::Invalid("fused sequences differ in shape".into()));
        }
        let axis = tape.shape(mimic).len() - 1;
        let joined = tape.concat(&[mimic, non_mimic], axis)?;
        let c = self.contrib.forward(tape, joined)?;
        let gate = tape.sigmoid(c)?;
        let adjusted = tape.mul(gate, joined)?;
        Ok(FusionOutput {
            gate,
            fused: self.fused.forward(tape, adjusted)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroupSample {
    /// Parameters the latent was drawn from (posterior in training).
    pub params: GaussianParams,
    pub z: Var,
    /// Softmax over the group's members, `[B, n_g]`.
    pub distribution: Var,
    /// Distribution-weighted emotion embedding, `[B, D]`.
    pub pooled: Var,
}

/// Per-call inputs that depend on the pass rather than the parameters.
pub struct MixtureInputs<'a> {
    /// Gold emotions; when present the posterior is sampled and KL terms are returned.
    pub gold: Option<&'a [usize]>,
    pub polarity: &'a [Polarity],
    pub noise: Option<&'a mut MimeRng>,
    pub reconstruction: bool,
}

#[derive(Debug, Clone)]
pub struct MixtureOutput {
    pub samples: Vec<GroupSample>,
    /// One regularizer per group, present only when gold labels were given.
    pub elbo: Vec<Var>,
    pub mimic: Var,
    pub non_mimic: Var,
    pub refined: (Var, Var),
    pub fusion: FusionOutput,
}

#[derive(Debug, Clone)]
pub struct EmotionMixture {
    pub groups: Vec<EmotionGroup>,
    pub emotions: EmbeddingTable,
    pub prior: SamplerNet,
    pub posterior: SamplerNet,
    pub distribution_heads: Vec<FullyConnected>,
    pub refiner: Refiner,
    pub fusion: Fusion,
    pub mimicry: bool,
}

impl EmotionMixture {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut autodiff::ParamStore<T>,
        groups: Vec<EmotionGroup>,
        emotions: EmbeddingTable,
        mimicry: bool,
        refine_layers: usize,
        dims: BlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let d = dims.width;
        if emotions.dim != d {
            return Err(MimeError::Invalid("emotion embeddings must have the model width".into()));
        }
        let prior = SamplerNet::new(store, "prior", d, d, &groups, rng)?;
        let posterior = SamplerNet::new(store, "posterior", 2 * d, d, &groups, rng)?;
        let distribution_heads = groups
            .iter()
            .map(|g| FullyConnected::new(store, &format!("distribution.{}", g.name), d, g.members.len(), rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            refiner: Refiner::new(store, refine_layers, dims, rng)?,
            fusion: Fusion::new(store, d, rng)?,
            groups,
            emotions,
            prior,
            posterior,
            distribution_heads,
            mimicry,
        })
    }

    pub fn grouped(&self) -> bool {
        self.groups.len() == 2
    }

    /// `softmax(FC(z))` for group `g`.
    pub fn emotion_distribution<T: Element>(&self, tape: &mut Tape<T>, g: usize, z: Var) -> Result<Var> {
        let logits = self.distribution_heads[g].forward(tape, z)?;
        Ok(tape.softmax(logits)?)
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        encoded: EncodedContext,
        valid: &[bool],
        inputs: MixtureInputs<'_>,
        drop: &mut Dropout,
    ) -> Result<MixtureOutput> {
        let MixtureInputs {
            gold,
            polarity,
            mut noise,
            reconstruction,
        } = inputs;
        let summary = encoded.summary;
        let batch = tape.shape(summary)[0];
        if polarity.len() != batch {
            return Err(MimeError::Invalid(format!("{} polarities for a batch of {batch}", polarity.len())));
        }

        let prior = self.prior.forward(tape, summary)?;
        let (drawn, gold_vec) = match gold {
            Some(labels) => {
                if labels.len() != batch {
                    return Err(MimeError::Invalid(format!("{} labels for a batch of {batch}", labels.len())));
                }
                if let Some(&bad) = labels.iter().find(|&&e| e >= NUM_EMOTIONS) {
                    return Err(MimeError::LabelOutOfRange(bad));
                }
                let target = self.emotions.lookup(tape, labels, &[batch])?;
                let input = tape.concat(&[summary, target], 1)?;
                (self.posterior.forward(tape, input)?, Some(target))
            }
            None => (prior.clone(), None),
        };

        let mut samples = Vec::with_capacity(self.groups.len());
        let mut elbo = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            let params = drawn[g];
            let z = sample_z(tape, &params, noise.as_deref_mut())?;
            let distribution = self.emotion_distribution(tape, g, z)?;
            let pooled = pool_group_emotion(tape, distribution, &self.emotions, &group.members)?;
            if let (Some(labels), Some(target)) = (gold, gold_vec) {
                let mut term = kl_term(tape, &params, &prior[g])?;
                if reconstruction {
                    let rec = self.reconstruction(tape, group, labels, pooled, target)?;
                    term = tape.add(term, rec)?;
                }
                elbo.push(term);
            }
            samples.push(GroupSample {
                params,
                z,
                distribution,
                pooled,
            });
        }

        let (mimic, non_mimic) = match (self.grouped(), self.mimicry) {
            (true, true) => select_mimicry(tape, polarity, samples[0].pooled, samples[1].pooled)?,
            (true, false) => (samples[0].pooled, samples[1].pooled),
            (false, _) => (samples[0].pooled, samples[0].pooled),
        };
        let refined = self
            .refiner
            .refine_pair(tape, encoded.hidden, mimic, non_mimic, valid, drop)?;
        let fusion = self.fusion.forward(tape, refined.0, refined.1)?;
        Ok(MixtureOutput {
            samples,
            elbo,
            mimic,
            non_mimic,
            refined,
            fusion,
        })
    }

    /// Squared distance between the pooled vector and the gold emotion
    /// embedding, counted only for rows whose gold label is in the group.
    fn reconstruction<T: Element>(
        &self,
        tape: &mut Tape<T>,
        group: &EmotionGroup,
        labels: &[usize],
        pooled: Var,
        target: Var,
    ) -> Result<Var> {
        let b = labels.len();
        let mask: Vec<T> = labels
            .iter()
            .map(|e| if group.members.contains(e) { T::one() } else { T::zero() })
            .collect();
        let mask = tape.constant(Tensor::new(&[b, 1], mask)?);
        let diff = tape.sub(pooled, target)?;
        let sq = tape.mul(diff, diff)?;
        let masked = tape.mul(sq, mask)?;
        let s = tape.sum(masked)?;
        Ok(tape.scale(s, 1.0 / b as f64)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use autodiff::ParamStore;
    use rand::SeedableRng;

    fn params(tape: &mut Tape<f64>, mean: &[f64], log_var: &[f64]) -> GaussianParams {
        let n = mean.len();
        let mean = tape.constant(Tensor::from_f64(&[1, n], mean).unwrap());
        let log_var = tape.constant(Tensor::from_f64(&[1, n], log_var).unwrap());
        let half = tape.scale(log_var, 0.5).unwrap();
        let std = tape.exp(half).unwrap();
        GaussianParams { mean, log_var, std }
    }

    #[test]
    fn kl_closed_form_cases() {
        let mut tape = Tape::<f64>::detached();
        let q = params(&mut tape, &[2.0], &[0.0]);
        let p = params(&mut tape, &[0.0], &[0.0]);
        let kl = kl_term(&mut tape, &q, &p).unwrap();
        assert!((tape.value(kl).item() - 2.0).abs() < 1e-12);
        let same = kl_term(&mut tape, &q, &q).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }

    #[test]
    fn zero_noise_returns_mean() {
        let mut tape = Tape::<f64>::detached();
        let p = params(&mut tape, &[1.0, -2.0], &[0.3, 0.1]);
        let z = sample_z(&mut tape, &p, None).unwrap();
        assert_eq!(tape.value(z).data(), &[1.0, -2.0]);
    }

    #[test]
    fn mimicry_swaps_on_polarity_flip() {
        let mut tape = Tape::<f64>::detached();
        let a = tape.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[2, 2], &[5., 6., 7., 8.]).unwrap());
        let pol = [Polarity::Positive, Polarity::Negative];
        let (m, n) = select_mimicry(&mut tape, &pol, a, b).unwrap();
        assert_eq!(tape.value(m).data(), &[1., 2., 7., 8.]);
        assert_eq!(tape.value(n).data(), &[5., 6., 3., 4.]);
        let flipped = [Polarity::Negative, Polarity::Positive];
        let (m2, n2) = select_mimicry(&mut tape, &flipped, a, b).unwrap();
        assert_eq!(tape.value(m2).data(), tape.value(n).data());
        assert_eq!(tape.value(n2).data(), tape.value(m).data());
    }

    #[test]
    fn pooling_one_hot_and_uniform() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = MimeRng::seed_from_u64(1);
        let table = EmbeddingTable::new(&mut store, "e", NUM_EMOTIONS, 3, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let members = [4, 9, 20];
        let d = tape.constant(Tensor::from_f64(&[2, 3], &[0., 1., 0., 1. / 3., 1. / 3., 1. / 3.]).unwrap());
        let e = pool_group_emotion(&mut tape, d, &table, &members).unwrap();
        let t = store.value(table.table);
        let out = tape.value(e).data();
        for j in 0..3 {
            assert_eq!(out[j], t.row(9)[j]);
            let mean = (t.row(4)[j] + t.row(9)[j] + t.row(20)[j]) / 3.0;
            assert!((out[3 + j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_contrib_gives_half_gate() {
        let mut store = ParamStore::<f64>::new();
        let fusion = Fusion::new(&mut store, 2, &mut MimeRng::seed_from_u64(3)).unwrap();
        *store.value_mut(fusion.contrib.weight) = Tensor::zeros(&[4, 4]);
        *store.value_mut(fusion.contrib.bias.unwrap()) = Tensor::zeros(&[4]);
        let mut tape = Tape::new(&store);
        let m = tape.constant(Tensor::from_f64(&[1, 1, 2], &[1., 2.]).unwrap());
        let n = tape.constant(Tensor::from_f64(&[1, 1, 2], &[3., -1.]).unwrap());
        let out = fusion.forward(&mut tape, m, n).unwrap();
        assert!(tape.value(out.gate).data().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn group_layout() {
        let g = EmotionGrouping::standard();
        let grouped = emotion_groups(&g, true);
        assert_eq!(grouped[0].members.len(), 13);
        assert_eq!(grouped[1].members.len(), 19);
        assert_eq!(emotion_groups(&g, false)[0].members.len(), 32);
    }
}
