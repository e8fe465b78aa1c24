use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub context_len: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub tied_embeddings: bool,
}

impl ModelConfig {
    /// Gradient-check scale: vocab 16, dim 8, one block, context 16.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 16,
            dim: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 16,
            context_len: 16,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
            tied_embeddings: true,
        }
    }

    /// The default desk-scale model: dim 128, 4 blocks, 4 heads, context 350.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            dim: 128,
            n_layers: 4,
            n_heads: 4,
            ffn_hidden: 352,
            context_len: 350,
            ..Self::tiny()
        }
    }

    /// Roughly twenty million parameters (20,062,080 with these settings).
    pub fn paper_analog() -> Self {
        ModelConfig {
            vocab_size: 6144,
            dim: 384,
            n_layers: 10,
            n_heads: 6,
            ffn_hidden: 1024,
            context_len: 350,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "desk" => Some(Self::desk(vocab_size)),
            "paper-analog" => Some(Self::paper_analog()),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("context_len", self.context_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.dim % self.n_heads != 0 {
            return bad(format!("dim {} not divisible by n_heads {}", self.dim, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even for rotary encoding", self.head_dim()));
        }
        if !(self.norm_eps > 0.0) {
            return bad(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        if !(self.rope_theta > 0.0) {
            return bad(format!("rope_theta must be positive, got {}", self.rope_theta));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        let _ = writeln!(s, "dim={}", self.dim);
        let _ = writeln!(s, "n_layers={}", self.n_layers);
        let _ = writeln!(s, "n_heads={}", self.n_heads);
        let _ = writeln!(s, "ffn_hidden={}", self.ffn_hidden);
        let _ = writeln!(s, "context_len={}", self.context_len);
        let _ = writeln!(s, "rope_theta={}", self.rope_theta);
        let _ = writeln!(s, "norm_eps={}", self.norm_eps);
        let _ = writeln!(s, "tied_embeddings={}", self.tied_embeddings);
        s
    }

    /// Sets one `key=value` field; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|e| Error::InvalidConfig(format!("{key}={v}: {e}")))
        };
        let real = |v: &str| {
            v.parse::<f64>()
                .map_err(|e| Error::InvalidConfig(format!("{key}={v}: {e}")))
        };
        match key {
            "vocab_size" => self.vocab_size = int(value)?,
            "dim" => self.dim = int(value)?,
            "n_layers" => self.n_layers = int(value)?,
            "n_heads" => self.n_heads = int(value)?,
            "ffn_hidden" => self.ffn_hidden = int(value)?,
            "context_len" => self.context_len = int(value)?,
            "rope_theta" => self.rope_theta = real(value)?,
            "norm_eps" => self.norm_eps = real(value)?,
            "tied_embeddings" => {
                self.tied_embeddings = value
                    .parse()
                    .map_err(|e| Error::InvalidConfig(format!("{key}={value}: {e}")))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = ModelConfig::desk(1024);
        let mut back = ModelConfig::tiny();
        for line in c.to_text().lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(back.set(k, v).unwrap());
        }
        assert_eq!(back, c);
        assert!(!back.set("colour", "blue").unwrap());
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::desk(512).validate().is_ok());
        assert!(ModelConfig { context_len: 0, ..ModelConfig::tiny() }.validate().is_err());
        assert!(ModelConfig { norm_eps: 0.0, ..ModelConfig::tiny() }.validate().is_err());
        assert!(ModelConfig { n_heads: 3, ..ModelConfig::tiny() }.validate().is_err());
    }
}
