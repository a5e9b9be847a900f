//! Plain-text word vectors: one entry per line, a token followed by
//! whitespace-separated decimals.

use std::io::BufRead;
use std::path::Path;

use autodiff::{Element, ParamId, ParamStore};

use super::vocab::Vocabulary;
use crate::error::{MimeError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub matched: usize,
    pub vocab_size: usize,
    pub skipped_lines: usize,
}

impl Coverage {
    pub fn fraction(&self) -> f64 {
        if self.vocab_size == 0 {
            0.0
        } else {
            self.matched as f64 / self.vocab_size as f64
        }
    }
}

/// Copies vectors of known tokens into rows of `table` (`[vocab, dim]`).
/// Rows without a vector keep their current values.
pub fn read_pretrained<T: Element, R: BufRead>(
    reader: R,
    vocab: &Vocabulary,
    store: &mut ParamStore<T>,
    table: ParamId,
) -> Result<Coverage> {
    let shape = store.value(table).shape().to_vec();
    if shape.len() != 2 || shape[0] != vocab.len() {
        return Err(MimeError::Embeddings(format!(
            "word table is {shape:?} but the vocabulary has {} entries",
            vocab.len()
        )));
    }
    let dim = shape[1];
    let mut seen = vec![false; vocab.len()];
    let mut skipped = 0;
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| MimeError::Embeddings(format!("line {}: {e}", n + 1)))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
        let Ok(values) = values else {
            skipped += 1;
            continue;
        };
        if values.len() != dim {
            return Err(MimeError::Embeddings(format!(
                "line {}: {} values, expected {dim}",
                n + 1,
                values.len()
            )));
        }
        let Some(id) = vocab.get(token) else { continue };
        let data = store.value_mut(table).data_mut();
        for (dst, v) in data[id * dim..(id + 1) * dim].iter_mut().zip(&values) {
            *dst = T::from_f64_lossy(*v);
        }
        seen[id] = true;
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} unparsable embedding lines");
    }
    let cov = Coverage {
        matched: seen.iter().filter(|s| **s).count(),
        vocab_size: vocab.len(),
        skipped_lines: skipped,
    };
    log::info!("pretrained vectors cover {:.1}% of the vocabulary", 100.0 * cov.fraction());
    Ok(cov)
}

pub fn load_pretrained<T: Element>(
    path: &Path,
    vocab: &Vocabulary,
    store: &mut ParamStore<T>,
    table: ParamId,
) -> Result<Coverage> {
    let file = std::fs::File::open(path).map_err(|e| MimeError::io(path, e))?;
    read_pretrained(std::io::BufReader::new(file), vocab, store, table)
}
