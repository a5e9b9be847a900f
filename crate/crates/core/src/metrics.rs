//! Corpus BLEU, top-k emotion accuracy and a two-component PCA of the
//! emotion embeddings.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

use crate::emotion::{EmotionGrouping, EMOTIONS};
use crate::error::{MimeError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    /// 0 to 100.
    pub score: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hypothesis_len: usize,
    pub reference_len: usize,
}

fn ngram_counts<S: Eq + Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 with one reference per hypothesis. Clipped n-gram
/// matches and totals are summed over the corpus; an order above one with
/// no matches uses `(matches + 1) / (total + 1)`. No unigram match at all
/// scores 0.
pub fn corpus_bleu<S: Eq + Hash>(references: &[Vec<S>], hypotheses: &[Vec<S>]) -> Result<BleuScore> {
    if references.len() != hypotheses.len() {
        return Err(MimeError::Invalid(format!(
            "{} references for {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if references.is_empty() {
        return Err(MimeError::Invalid("BLEU needs a non-empty corpus".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (r, h) in references.iter().zip(hypotheses) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if n > 0 && matches[n] == 0 {
            (matches[n] + 1) as f64 / (totals[n] + 1) as f64
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if matches[0] == 0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        hypothesis_len: hyp_len,
        reference_len: ref_len,
    })
}

/// Labels of the `k` largest entries, ties broken by lower index.
pub fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Fraction of rows whose gold label is among the `k` most probable.
pub fn topk_accuracy(probs: &[Vec<f64>], gold: &[usize], k: usize) -> Result<f64> {
    if probs.len() != gold.len() || probs.is_empty() {
        return Err(MimeError::Invalid(format!("{} predictions for {} labels", probs.len(), gold.len())));
    }
    let classes = probs[0].len();
    if k == 0 || k > classes {
        return Err(MimeError::Invalid(format!("k = {k} outside 1..={classes}")));
    }
    let hits = probs
        .iter()
        .zip(gold)
        .filter(|(p, g)| top_k(p, k).contains(g))
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with eigenvectors as columns of
/// a row-major `n x n` matrix.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != n * n || n == 0 {
        return Err(MimeError::Invalid(format!("{} entries for a {n}x{n} matrix", matrix.len())));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &i) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + col] = v[r * n + i];
        }
    }
    Ok((values, vectors))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// One `(x, y)` per input row.
    pub coords: Vec<[f64; 2]>,
    /// Unit principal directions in the input space.
    pub components: [Vec<f64>; 2],
    /// Variance (mean squared projection) along each component.
    pub variances: [f64; 2],
    pub total_variance: f64,
}

impl Projection {
    pub fn captured_variance(&self) -> f64 {
        self.variances[0] + self.variances[1]
    }
}

/// Mean-centres the rows and projects them on their top two principal
/// components. Works on the row Gram matrix, so cost depends on the row
/// count rather than the width.
pub fn project_top2(rows: &[Vec<f64>]) -> Result<Projection> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n < 3 || d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(MimeError::Invalid(format!("PCA needs at least 3 rows of equal width >= 2, got {n}x{d}")));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let centred: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let g: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
            gram[i * n + j] = g;
            gram[j * n + i] = g;
        }
    }
    let (values, vectors) = symmetric_eigen(&gram, n)?;
    let total: f64 = (0..n).map(|i| gram[i * n + i]).sum();
    if values[1] <= 1e-12 * total.max(f64::MIN_POSITIVE) {
        return Err(MimeError::Invalid(format!(
            "emotion embeddings have rank < 2 after centring (eigenvalues {:.3e}, {:.3e})",
            values[0], values[1]
        )));
    }
    let mut coords = vec![[0.0; 2]; n];
    let mut components: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    for c in 0..2 {
        let mut u: Vec<f64> = (0..n).map(|r| vectors[r * n + c]).collect();
        // Fixed sign: the largest entry is positive.
        let big = (0..n).max_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs())).unwrap_or(0);
        if u[big] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        let root = values[c].sqrt();
        for (r, row) in centred.iter().enumerate() {
            coords[r][c] = u[r] * root;
            for (k, x) in row.iter().enumerate() {
                components[c][k] += x * u[r] / root;
            }
        }
    }
    Ok(Projection {
        coords,
        components,
        variances: [values[0] / n as f64, values[1] / n as f64],
        total_variance: total / n as f64,
    })
}

/// Distance between the positive and negative centroids in the projection.
pub fn centroid_separation(p: &Projection, grouping: &EmotionGrouping) -> f64 {
    let centroid = |ids: &[usize]| {
        let mut c = [0.0; 2];
        for &i in ids {
            c[0] += p.coords[i][0] / ids.len() as f64;
            c[1] += p.coords[i][1] / ids.len() as f64;
        }
        c
    };
    let a = centroid(grouping.group(crate::emotion::Polarity::Positive));
    let b = centroid(grouping.group(crate::emotion::Polarity::Negative));
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `label,x,y,group` rows for the 32 emotions.
pub fn projection_csv(p: &Projection, grouping: &EmotionGrouping) -> String {
    let mut s = String::from("label,x,y,group\n");
    for (id, c) in p.coords.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{}", EMOTIONS[id], c[0], c[1], grouping.polarity(id));
    }
    s
}

pub fn write_projection_csv(path: &Path, p: &Projection, grouping: &EmotionGrouping) -> Result<()> {
    crate::io::write_atomic(path, projection_csv(p, grouping).as_bytes())
}
