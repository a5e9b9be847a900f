//! Model and training hyperparameters, read from flat `key = value` files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MimeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Model width; word, position, speaker and emotion embeddings share it.
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Feed-forward inner width; `None` means `4 * hidden`.
    pub ffn_dim: Option<usize>,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    /// Weight of the emotion classification loss.
    pub alpha: f64,
    /// Weight of the two ELBO terms.
    pub beta: f64,
    /// Weight of the generation loss.
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub beam: usize,
    pub max_context_len: usize,
    pub max_response_len: usize,
    pub max_decode_len: usize,
    pub length_penalty: f64,
    pub min_freq: usize,
    pub seed: u64,
    pub mimicry: bool,
    pub grouping: bool,
    pub deterministic: bool,
    pub reconstruction: bool,
    pub grad_clip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 300,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ffn_dim: None,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            lr: 1e-4,
            batch_size: 16,
            patience: 2,
            max_epochs: 50,
            beam: 5,
            max_context_len: 128,
            max_response_len: 30,
            max_decode_len: 30,
            length_penalty: 0.0,
            min_freq: 1,
            seed: 0,
            mimicry: true,
            grouping: true,
            deterministic: false,
            reconstruction: false,
            grad_clip: false,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(MimeError::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| MimeError::Config(format!("{key}: cannot parse {v:?}")))
}

impl ModelConfig {
    pub fn ffn(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.hidden)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MimeError::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("heads ({}) must divide hidden ({})", self.heads, self.hidden));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("layer counts must be positive".into());
        }
        if self.ffn() == 0 {
            return fail("ffn_dim must be positive".into());
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0) || !w.is_finite() {
                return fail(format!("{name} must be a finite non-negative weight"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)".into());
        }
        if !(self.lr > 0.0) {
            return fail("lr must be positive".into());
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.batch_size == 0 || self.beam == 0 || self.max_epochs == 0 {
            return fail("batch_size, beam and max_epochs must be positive".into());
        }
        if self.max_context_len == 0 || self.max_response_len == 0 || self.max_decode_len == 0 {
            return fail("length limits must be positive".into());
        }
        Ok(())
    }

    /// Rows in the learned position table: context (+CTX) and decoder inputs (+SOS).
    pub fn position_rows(&self) -> usize {
        (self.max_context_len + 1)
            .max(self.max_response_len + 1)
            .max(self.max_decode_len + 1)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "hidden" => self.hidden = parse_num(key, v)?,
            "encoder_layers" => self.encoder_layers = parse_num(key, v)?,
            "decoder_layers" => self.decoder_layers = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "ffn_dim" => {
                self.ffn_dim = if v == "auto" { None } else { Some(parse_num(key, v)?) };
            }
            "dropout" => self.dropout = parse_num(key, v)?,
            "layer_norm_eps" => self.layer_norm_eps = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "max_epochs" => self.max_epochs = parse_num(key, v)?,
            "beam" => self.beam = parse_num(key, v)?,
            "max_context_len" => self.max_context_len = parse_num(key, v)?,
            "max_response_len" => self.max_response_len = parse_num(key, v)?,
            "max_decode_len" => self.max_decode_len = parse_num(key, v)?,
            "length_penalty" => self.length_penalty = parse_num(key, v)?,
            "min_freq" => self.min_freq = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "mimicry" => self.mimicry = parse_bool(key, v)?,
            "grouping" => self.grouping = parse_bool(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "reconstruction" => self.reconstruction = parse_bool(key, v)?,
            "grad_clip" => self.grad_clip = parse_bool(key, v)?,
            _ => return Err(MimeError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MimeError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MimeError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ffn = self.ffn_dim.map_or("auto".to_string(), |d| d.to_string());
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "encoder_layers = {}", self.encoder_layers);
        let _ = writeln!(s, "decoder_layers = {}", self.decoder_layers);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "ffn_dim = {ffn}");
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "layer_norm_eps = {}", self.layer_norm_eps);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "beam = {}", self.beam);
        let _ = writeln!(s, "max_context_len = {}", self.max_context_len);
        let _ = writeln!(s, "max_response_len = {}", self.max_response_len);
        let _ = writeln!(s, "max_decode_len = {}", self.max_decode_len);
        let _ = writeln!(s, "length_penalty = {}", self.length_penalty);
        let _ = writeln!(s, "min_freq = {}", self.min_freq);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "mimicry = {}", self.mimicry);
        let _ = writeln!(s, "grouping = {}", self.grouping);
        let _ = writeln!(s, "deterministic = {}", self.deterministic);
        let _ = writeln!(s, "reconstruction = {}", self.reconstruction);
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        s
    }
}
