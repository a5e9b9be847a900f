//! Transformer building blocks over the gradient tape.
//!
//! Layers only hold [`ParamId`] handles; the values live in a shared
//! [`ParamStore`]. Two layers holding the same handle share storage.

use autodiff::{Element, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{MimeError, Result};
use crate::MimeRng;

fn uniform_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// `y = x W + b`, `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct FullyConnected {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl FullyConnected {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let b = uniform_bound(in_dim);
        Ok(Self {
            weight: store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], b, rng)?,
            bias: Some(store.add_uniform(format!("{name}.bias"), &[out_dim], b, rng)?),
            in_dim,
            out_dim,
        })
    }

    pub fn without_bias<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let b = uniform_bound(in_dim);
        Ok(Self {
            weight: store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], b, rng)?,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let h = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b)?;
                Ok(tape.add(h, b)?)
            }
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        count: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            table: store.add_uniform(name, &[count, dim], uniform_bound(dim), rng)?,
            count,
            dim,
        })
    }

    /// Rows for `ids`, shaped `prefix ++ [dim]`.
    pub fn lookup<T: Element>(&self, tape: &mut Tape<T>, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let t = tape.param(self.table)?;
        Ok(tape.embed(t, ids, prefix)?)
    }

    /// The whole table as a `[count, dim]` variable.
    pub fn all<T: Element>(&self, tape: &mut Tape<T>) -> Result<Var> {
        Ok(tape.param(self.table)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            eps,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma)?;
        let b = tape.param(self.beta)?;
        Ok(tape.layer_norm(x, g, b, self.eps)?)
    }
}

/// Inverted dropout. Inactive when the rate is zero or no generator is set.
pub struct Dropout {
    rate: f64,
    rng: Option<MimeRng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: MimeRng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }

    pub fn apply<T: Element>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(&shape, mask)?);
        Ok(tape.mul(x, m)?)
    }
}

/// Which keys each query may attend to, `[batch, queries, keys]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(batch: usize, queries: usize, keys: usize) -> Self {
        Self {
            batch,
            queries,
            keys,
            allowed: vec![true; batch * queries * keys],
        }
    }

    /// Masks padded keys; `valid` is `[batch, keys]` with `true` for real tokens.
    pub fn key_padding(valid: &[bool], batch: usize, queries: usize) -> Self {
        let keys = valid.len() / batch;
        let mut allowed = Vec::with_capacity(batch * queries * keys);
        for b in 0..batch {
            for _ in 0..queries {
                allowed.extend_from_slice(&valid[b * keys..(b + 1) * keys]);
            }
        }
        Self {
            batch,
            queries,
            keys,
            allowed,
        }
    }

    /// Query `i` sees keys `0..=i`.
    pub fn causal(batch: usize, len: usize) -> Self {
        let mut allowed = Vec::with_capacity(batch * len * len);
        for _ in 0..batch {
            for i in 0..len {
                allowed.extend((0..len).map(|j| j <= i));
            }
        }
        Self {
            batch,
            queries: len,
            keys: len,
            allowed,
        }
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, b: usize, q: usize, k: usize) -> bool {
        self.allowed[(b * self.queries + q) * self.keys + k]
    }

    /// First `(query, key)` pair with `key > query` that is allowed.
    pub fn causal_violation(&self) -> Option<(usize, usize)> {
        for b in 0..self.batch {
            for q in 0..self.queries {
                for k in q + 1..self.keys {
                    if self.is_allowed(b, q, k) {
                        return Some((q, k));
                    }
                }
            }
        }
        None
    }

    fn check(&self, batch: usize, queries: usize, keys: usize) -> Result<()> {
        if (self.batch, self.queries, self.keys) != (batch, queries, keys) {
            return Err(MimeError::Invalid(format!(
                "attention mask is {}x{}x{}, scores are {batch}x{queries}x{keys}",
                self.batch, self.queries, self.keys
            )));
        }
        Ok(())
    }
}

/// Scaled dot-product attention with `heads` heads over `[B, L, width]`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: FullyConnected,
    pub key: FullyConnected,
    pub value: FullyConnected,
    pub output: FullyConnected,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(MimeError::Config(format!("{heads} heads do not divide width {width}")));
        }
        Ok(Self {
            query: FullyConnected::new(store, &format!("{name}.q"), width, width, rng)?,
            // A key bias shifts every score of a query equally, which softmax
            // cancels; it would never receive gradient.
            key: FullyConnected::without_bias(store, &format!("{name}.k"), width, width, rng)?,
            value: FullyConnected::new(store, &format!("{name}.v"), width, width, rng)?,
            output: FullyConnected::new(store, &format!("{name}.o"), width, width, rng)?,
            heads,
            width,
        })
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        queries: Var,
        keys: Var,
        values: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(tape, queries, keys, values, mask)?.0)
    }

    /// Also returns the per-head attention weights, each `[B, Lq, Lk]`.
    pub fn forward_with_weights<T: Element>(
        &self,
        tape: &mut Tape<T>,
        queries: Var,
        keys: Var,
        values: Var,
        mask: &AttentionMask,
    ) -> Result<(Var, Vec<Var>)> {
        let qs = tape.shape(queries).to_vec();
        let ks = tape.shape(keys).to_vec();
        let vs = tape.shape(values).to_vec();
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] {
            return Err(MimeError::Invalid(format!(
                "attention expects [B, L, D] inputs with matching keys/values, got q {qs:?} k {ks:?} v {vs:?}"
            )));
        }
        for s in [&qs, &ks] {
            if s[2] != self.width {
                return Err(MimeError::Invalid(format!("attention width {} but input is {s:?}", self.width)));
            }
        }
        mask.check(qs[0], qs[1], ks[1])?;

        let q = self.query.forward(tape, queries)?;
        let k = self.key.forward(tape, keys)?;
        let v = self.value.forward(tape, values)?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 2, h * dh, dh)?;
            let kh = tape.slice(k, 2, h * dh, dh)?;
            let vh = tape.slice(v, 2, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.bmm(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let p = tape.masked_softmax(scores, mask.allowed())?;
            outs.push(tape.bmm(p, vh)?);
            weights.push(p);
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 2)? };
        Ok((self.output.forward(tape, joined)?, weights))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: FullyConnected,
    pub outer: FullyConnected,
}

impl FeedForward {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        inner: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            inner: FullyConnected::new(store, &format!("{name}.w1"), width, inner, rng)?,
            outer: FullyConnected::new(store, &format!("{name}.w2"), inner, width, rng)?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, x)?;
        let h = tape.relu(h)?;
        self.outer.forward(tape, h)
    }
}

/// Shape hyperparameters shared by encoder and decoder stacks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec {
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
    pub eps: f64,
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: BlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dims.width, dims.eps)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dims.width, dims.heads, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dims.width, dims.eps)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dims.width, dims.ffn, rng)?,
        })
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mask: &AttentionMask,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let n = self.norm_attn.forward(tape, x)?;
        let a = self.attn.forward(tape, n, n, n, mask)?;
        let a = drop.apply(tape, a)?;
        let x = tape.add(x, a)?;
        let n = self.norm_ffn.forward(tape, x)?;
        let f = self.ffn.forward(tape, n)?;
        let f = drop.apply(tape, f)?;
        Ok(tape.add(x, f)?)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
    pub width: usize,
}

impl TransformerEncoder {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        layers: usize,
        dims: BlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(store, &format!("{name}.layers.{i}"), dims, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            final_norm: LayerNorm::new(store, &format!("{name}.ln_final"), dims.width, dims.eps)?,
            width: dims.width,
        })
    }

    /// `x` is `[B, L, width]`; `valid` marks real (unpadded) tokens `[B, L]`.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        valid: &[bool],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.width {
            return Err(MimeError::Invalid(format!("encoder expects [B, L, {}], got {s:?}", self.width)));
        }
        if s[1] == 0 {
            return Err(MimeError::Invalid("encoder input has zero length".into()));
        }
        if valid.len() != s[0] * s[1] {
            return Err(MimeError::Invalid(format!("padding mask has {} entries for {s:?}", valid.len())));
        }
        let mask = AttentionMask::key_padding(valid, s[0], s[1]);
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, h, &mask, drop)?;
        }
        self.final_norm.forward(tape, h)
    }
}

/// Pre-norm block: causal self-attention, cross-attention, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: BlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(store, &format!("{name}.ln_self"), dims.width, dims.eps)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dims.width, dims.heads, rng)?,
            norm_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dims.width, dims.eps)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dims.width, dims.heads, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dims.width, dims.eps)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dims.width, dims.ffn, rng)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        memory_keys: Var,
        memory_values: Var,
        self_mask: &AttentionMask,
        memory_mask: &AttentionMask,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let n = self.norm_self.forward(tape, x)?;
        let a = self.self_attn.forward(tape, n, n, n, self_mask)?;
        let a = drop.apply(tape, a)?;
        let x = tape.add(x, a)?;
        let n = self.norm_cross.forward(tape, x)?;
        let c = self
            .cross_attn
            .forward(tape, n, memory_keys, memory_values, memory_mask)?;
        let c = drop.apply(tape, c)?;
        let x = tape.add(x, c)?;
        let n = self.norm_ffn.forward(tape, x)?;
        let f = self.ffn.forward(tape, n)?;
        let f = drop.apply(tape, f)?;
        Ok(tape.add(x, f)?)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerDecoder {
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
    pub width: usize,
}

impl TransformerDecoder {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        layers: usize,
        dims: BlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| DecoderBlock::new(store, &format!("{name}.layers.{i}"), dims, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            final_norm: LayerNorm::new(store, &format!("{name}.ln_final"), dims.width, dims.eps)?,
            width: dims.width,
        })
    }

    /// Target embeddings `[B, T, width]` attend causally to themselves and to
    /// memory whose keys and values are given separately (`[B, K, width]` each).
    /// `self_mask` must not let any position see a later one.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        target: Var,
        memory_keys: Var,
        memory_values: Var,
        self_mask: &AttentionMask,
        memory_valid: &[bool],
        drop: &mut Dropout,
    ) -> Result<Var> {
        if let Some((query, key)) = self_mask.causal_violation() {
            return Err(MimeError::NonCausalMask { query, key });
        }
        let ts = tape.shape(target).to_vec();
        if ts.len() != 3 || ts[2] != self.width {
            return Err(MimeError::Invalid(format!("decoder expects [B, T, {}], got {ts:?}", self.width)));
        }
        let memory_mask = AttentionMask::key_padding(memory_valid, ts[0], ts[1]);
        let mut h = target;
        for b in &self.blocks {
            h = b.forward(tape, h, memory_keys, memory_values, self_mask, &memory_mask, drop)?;
        }
        self.final_norm.forward(tape, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> MimeRng {
        MimeRng::seed_from_u64(7)
    }

    #[test]
    fn fc_identity_and_bias_only() {
        let mut store = ParamStore::<f64>::new();
        let fc = FullyConnected::new(&mut store, "fc", 2, 2, &mut rng()).unwrap();
        *store.value_mut(fc.weight) = Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        *store.value_mut(fc.bias.unwrap()) = Tensor::zeros(&[2]);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[3., -4.]).unwrap());
        let y = fc.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3., -4.]);
        drop(tape);

        *store.value_mut(fc.bias.unwrap()) = Tensor::from_f64(&[2], &[0.5, 0.25]).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let y = fc.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.25]);
    }

    #[test]
    fn fc_rejects_width_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let fc = FullyConnected::new(&mut store, "fc", 3, 2, &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(fc.forward(&mut tape, x).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng()).is_err());
    }

    #[test]
    fn single_key_returns_its_value_row() {
        let mut store = ParamStore::<f64>::new();
        let attn = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let mut r = rng();
        let q: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let q = tape.constant(Tensor::from_f64(&[1, 3, 4], &q).unwrap());
        let kv = tape.constant(Tensor::from_f64(&[1, 1, 4], &kv).unwrap());
        let out = attn.forward(&mut tape, q, kv, kv, &AttentionMask::full(1, 3, 1)).unwrap();
        // Every query gets output(value(kv)) regardless of its content.
        let v = attn.value.forward(&mut tape, kv).unwrap();
        let expected = attn.output.forward(&mut tape, v).unwrap();
        let e = tape.value(expected).data().to_vec();
        for row in tape.value(out).data().chunks(4) {
            for (a, b) in row.iter().zip(&e) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_rejects_non_causal_mask() {
        let mut store = ParamStore::<f64>::new();
        let dims = BlockSpec {
            width: 4,
            heads: 2,
            ffn: 8,
            eps: 1e-5,
        };
        let dec = TransformerDecoder::new(&mut store, "d", 1, dims, &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let t = tape.constant(Tensor::zeros(&[1, 2, 4]));
        let m = tape.constant(Tensor::zeros(&[1, 3, 4]));
        let err = dec
            .forward(&mut tape, t, m, m, &AttentionMask::full(1, 2, 2), &[true; 3], &mut Dropout::disabled())
            .unwrap_err();
        assert!(matches!(err, MimeError::NonCausalMask { query: 0, key: 1 }));
    }

    #[test]
    fn dropout_is_identity_when_disabled() {
        let store = ParamStore::<f32>::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::full(&[3], 2.0));
        let y = Dropout::disabled().apply(&mut tape, x).unwrap();
        assert_eq!(x, y);
        let y = Dropout::new(0.5, rng()).apply(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 4.0));
    }
}
