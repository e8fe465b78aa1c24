//! Autoregressive decoding.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::model::forward::{forward_seq, Weights};
use crate::model::Model;
use crate::rng;
use crate::tokenizer::TokenizerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Greedy,
    Temperature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSpec {
    pub mode: SamplingMode,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec {
            mode: SamplingMode::Greedy,
            temperature: 1.0,
            top_k: None,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mode == SamplingMode::Temperature && !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be at least 1".into()));
        }
        if self.top_k == Some(0) {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Highest logit, lowest id on ties.
pub(crate) fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn sample<R: RngCore>(logits: &[f32], spec: &SamplingSpec, rng: &mut R) -> u32 {
    if spec.mode == SamplingMode::Greedy {
        return argmax(logits);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    if let Some(k) = spec.top_k {
        // stable sort keeps the lowest id first among equal logits
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        order.truncate(k.min(logits.len()));
    }
    let t = spec.temperature;
    let max = order.iter().map(|&i| logits[i] as f64).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] as f64 - max) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * total;
    let mut acc = 0.0;
    for (&i, &w) in order.iter().zip(&weights) {
        acc += w;
        if u < acc {
            return i as u32;
        }
    }
    *order.last().expect("non-empty vocabulary") as u32
}

/// Generates up to `max_new_tokens` ids after `prompt_ids`, stopping early at
/// `eos`. Returns only the new ids (excluding a final EOS).
pub fn generate_ids(
    model: &Model,
    prompt_ids: &[u32],
    eos: Option<u32>,
    spec: &SamplingSpec,
) -> Result<Vec<u32>> {
    spec.validate()?;
    let ctx = model.config.context_len;
    if prompt_ids.len() > ctx {
        return Err(Error::SequenceTooLong {
            len: prompt_ids.len(),
            context_len: ctx,
        });
    }
    let w = Weights::new(model)?;
    let mut rng = rng::stream(spec.seed, "sample");
    let mut seq = prompt_ids.to_vec();
    let mut out = Vec::with_capacity(spec.max_new_tokens);
    for _ in 0..spec.max_new_tokens {
        // slide the window so the model always sees at most context_len - 1 tokens
        // once the context is full
        let start = if seq.len() >= ctx { seq.len() + 1 - ctx } else { 0 };
        let window = &seq[start..];
        let (logits, _) = forward_seq(&w, window, Some(&[window.len() - 1]), false)?;
        let next = sample(&logits, spec, &mut rng);
        if Some(next) == eos {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Text generation: the prompt is encoded as BOS + prompt + newline, the same
/// framing used for training examples.
pub fn generate(model: &Model, tok: &TokenizerModel, prompt: &str, spec: &SamplingSpec) -> Result<String> {
    let ids = prompt_ids(tok, prompt);
    let new = generate_ids(model, &ids, Some(tok.eos()), spec)?;
    let printable: Vec<u32> = new.into_iter().filter(|&t| !tok.is_special(t)).collect();
    tok.decode(&printable)
}

pub(crate) fn prompt_ids(tok: &TokenizerModel, prompt: &str) -> Vec<u32> {
    let mut ids = vec![tok.bos()];
    ids.extend(tok.encode(&format!("{prompt}\n"), false));
    ids
}
