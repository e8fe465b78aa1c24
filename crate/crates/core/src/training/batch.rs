use crate::corpus::InstructExample;
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::TokenizerModel;
use crate::training::TrainConfig;

/// One packed example: `BOS prompt "\n" completion EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub tokens: Vec<u32>,
    /// Tokens before the first completion token (BOS and the prompt).
    pub prompt_len: usize,
}

impl EncodedExample {
    pub fn from_parts(bos: u32, prompt: &[u32], completion: &[u32], eos: u32) -> Self {
        let mut tokens = Vec::with_capacity(prompt.len() + completion.len() + 2);
        tokens.push(bos);
        tokens.extend_from_slice(prompt);
        tokens.extend_from_slice(completion);
        tokens.push(eos);
        EncodedExample {
            tokens,
            prompt_len: 1 + prompt.len(),
        }
    }

    /// Model inputs: every token except the last.
    pub fn inputs(&self) -> &[u32] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn targets(&self) -> &[u32] {
        &self.tokens[1..]
    }

    /// Loss mask over target positions.
    pub fn mask(&self, full_sequence: bool) -> Vec<bool> {
        let first = if full_sequence { 0 } else { self.prompt_len - 1 };
        (0..self.tokens.len() - 1).map(|t| t >= first).collect()
    }
}

pub fn encode_example(tok: &TokenizerModel, ex: &InstructExample) -> EncodedExample {
    let prompt = tok.encode(&format!("{}\n", ex.prompt), false);
    let completion = tok.encode(&ex.completion, false);
    EncodedExample::from_parts(tok.bos(), &prompt, &completion, tok.eos())
}

/// Padded batch, row-major `[rows × context]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
    /// Unpadded input length of each row.
    pub lengths: Vec<usize>,
    pub rows: usize,
    pub context: usize,
}

impl Batch {
    pub fn from_examples(examples: &[&EncodedExample], context: usize, pad: u32, full_sequence: bool) -> Self {
        let rows = examples.len();
        let mut inputs = vec![pad; rows * context];
        let mut targets = vec![pad; rows * context];
        let mut loss_mask = vec![false; rows * context];
        let mut lengths = Vec::with_capacity(rows);
        for (r, ex) in examples.iter().enumerate() {
            let n = ex.inputs().len();
            assert!(n <= context, "example longer than context");
            let base = r * context;
            inputs[base..base + n].copy_from_slice(ex.inputs());
            targets[base..base + n].copy_from_slice(ex.targets());
            for (t, m) in ex.mask(full_sequence).into_iter().enumerate() {
                loss_mask[base + t] = m;
            }
            lengths.push(n);
        }
        Batch {
            inputs,
            targets,
            loss_mask,
            lengths,
            rows,
            context,
        }
    }

    pub fn row_inputs(&self, r: usize) -> &[u32] {
        &self.inputs[r * self.context..r * self.context + self.lengths[r]]
    }

    pub fn row_targets(&self, r: usize) -> &[u32] {
        &self.targets[r * self.context..r * self.context + self.lengths[r]]
    }

    pub fn row_mask(&self, r: usize) -> &[bool] {
        &self.loss_mask[r * self.context..r * self.context + self.lengths[r]]
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Encoded corpus plus the seeded per-epoch batch order.
#[derive(Debug, Clone)]
pub struct Batches {
    pub examples: Vec<EncodedExample>,
    /// Examples whose inputs exceed the context length.
    pub dropped: usize,
    batch_size: usize,
    context: usize,
    pad: u32,
    full_sequence: bool,
    seed: u64,
}

impl Batches {
    pub fn steps_per_epoch(&self) -> usize {
        self.examples.len().div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        rng::shuffle(&mut order, &mut rng::stream(self.seed, &format!("epoch:{epoch}")));
        order
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Batch> + '_ {
        let order = self.epoch_order(epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |idx| {
            let refs: Vec<&EncodedExample> = idx.iter().map(|&i| &self.examples[i]).collect();
            Batch::from_examples(&refs, self.context, self.pad, self.full_sequence)
        })
    }
}

pub fn batchify(examples: &[InstructExample], tok: &TokenizerModel, cfg: &TrainConfig) -> Result<Batches> {
    let mut kept = Vec::with_capacity(examples.len());
    let mut dropped = 0;
    for ex in examples {
        let enc = encode_example(tok, ex);
        if enc.inputs().len() <= cfg.context_len {
            kept.push(enc);
        } else {
            dropped += 1;
        }
    }
    if kept.is_empty() {
        return Err(Error::Empty(format!(
            "corpus is empty after length filtering ({dropped} dropped)"
        )));
    }
    Ok(Batches {
        examples: kept,
        dropped,
        batch_size: cfg.batch_size,
        context: cfg.context_len,
        pad: tok.pad(),
        full_sequence: cfg.full_sequence_loss,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Domain;

    #[test]
    fn mask_covers_completion_and_eos() {
        let prompt: Vec<u32> = (10..20).collect();
        let completion: Vec<u32> = (30..50).collect();
        let ex = EncodedExample::from_parts(1, &prompt, &completion, 2);
        let b = Batch::from_examples(&[&ex], 64, 0, false);
        assert_eq!(b.masked_count(), 21);
        assert_eq!(b.lengths, [31]);
        for t in 0..64 {
            if b.loss_mask[t] {
                assert!(b.targets[t] >= 30 || b.targets[t] == 2);
            }
            if t >= 31 {
                assert_eq!(b.targets[t], 0);
                assert!(!b.loss_mask[t]);
            }
        }
        for t in 0..30 {
            assert_eq!(b.targets[t], b.inputs[t + 1]);
        }
        let full = Batch::from_examples(&[&ex], 64, 0, true);
        assert_eq!(full.masked_count(), 31);
    }

    fn corpus(n: usize) -> Vec<InstructExample> {
        (0..n)
            .map(|i| InstructExample {
                id: format!("{i}"),
                domain: Domain::Story,
                prompt: "p".into(),
                completion: "x".repeat(1 + i % 7),
            })
            .collect()
    }

    #[test]
    fn batch_order_is_deterministic() {
        let tok = TokenizerModel::bytes_only();
        let cfg = TrainConfig {
            batch_size: 4,
            context_len: 32,
            seed: 5,
            ..Default::default()
        };
        let hash = |b: &Batches| {
            let mut all = Vec::new();
            for e in 0..3 {
                for batch in b.epoch(e) {
                    all.extend(batch.inputs);
                }
            }
            crate::rng::fnv1a(&all.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
        };
        let a = batchify(&corpus(10), &tok, &cfg).unwrap();
        let b = batchify(&corpus(10), &tok, &cfg).unwrap();
        assert_eq!(hash(&a), hash(&b));
        assert_eq!(a.steps_per_epoch(), 3);
        assert_ne!(a.epoch_order(0), a.epoch_order(1));
    }

    #[test]
    fn long_examples_dropped_and_counted() {
        let tok = TokenizerModel::bytes_only();
        let cfg = TrainConfig {
            context_len: 6,
            ..Default::default()
        };
        // inputs = BOS + "p\n" + completion → 3 + len
        let b = batchify(&corpus(7), &tok, &cfg).unwrap();
        assert_eq!(b.examples.len(), 3);
        assert_eq!(b.dropped, 4);
        let tiny = TrainConfig {
            context_len: 3,
            ..Default::default()
        };
        assert!(batchify(&corpus(7), &tok, &tiny).is_err());
    }
}
