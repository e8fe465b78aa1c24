//! Perplexity, marker-based domain classification, task detection and the
//! forgetting report.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corpus::{is_numbered_step, is_unit, Domain, InstructExample};
use crate::error::{Error, Result};
use crate::model::{checkpoint_bytes, generate, Model, ModelCheckpoint, SamplingSpec};
use crate::rng;
use crate::tensor::Scalar;
use crate::tokenizer::TokenizerModel;
use crate::training::{encode_example, evaluate_loss, EncodedExample};

const BUNDLED_MARKERS: &str = include_str!("../data/markers.txt");

pub const DEFAULT_FORGETTING_THRESHOLD: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainMarkerSet {
    pub story: BTreeSet<String>,
    pub recipe: BTreeSet<String>,
    pub min_hits: usize,
}

impl DomainMarkerSet {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_MARKERS).expect("bundled markers parse")
    }

    /// Parses `min_hits=N` plus one stem per line under `[story]` / `[recipe]`;
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut story = BTreeSet::new();
        let mut recipe = BTreeSet::new();
        let mut min_hits = 2;
        let mut section: Option<Domain> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: n + 1, message };
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.parse().map_err(|_| err(format!("unknown section [{name}]")))?);
            } else if let Some(v) = line.strip_prefix("min_hits=") {
                min_hits = v.trim().parse().map_err(|_| err(format!("bad min_hits {v:?}")))?;
            } else {
                let stem = line.to_lowercase();
                match section {
                    Some(Domain::Story) => story.insert(stem),
                    Some(Domain::Recipe) => recipe.insert(stem),
                    None => return Err(err("stem outside a section".into())),
                };
            }
        }
        let set = DomainMarkerSet { story, recipe, min_hits };
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_hits == 0 {
            return Err(Error::InvalidArgument("min_hits must be at least 1".into()));
        }
        if let Some(s) = self.story.intersection(&self.recipe).next() {
            return Err(Error::InvalidArgument(format!("marker {s:?} is in both domains")));
        }
        Ok(())
    }

    /// Story and recipe hit counts for `text`.
    pub fn hits(&self, text: &str) -> (usize, usize) {
        let lower = text.to_lowercase();
        let starts = |set: &BTreeSet<String>, w: &str| set.iter().any(|s| w.starts_with(s.as_str()));
        let (mut story, mut recipe) = (0, 0);
        for w in lower.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()) {
            if starts(&self.story, w) {
                story += 1;
            }
            if starts(&self.recipe, w) {
                recipe += 1;
            } else if is_unit(w) {
                recipe += 1;
            }
        }
        recipe += lower.lines().filter(|l| is_numbered_step(l)).count();
        (story, recipe)
    }
}

/// Domain with strictly more marker hits, provided it reaches `min_hits`;
/// `None` when undecided.
pub fn classify_domain(text: &str, markers: &DomainMarkerSet) -> Option<Domain> {
    let (s, r) = markers.hits(text);
    if s > r && s >= markers.min_hits {
        Some(Domain::Story)
    } else if r > s && r >= markers.min_hits {
        Some(Domain::Recipe)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Perplexity {
    pub loss: f64,
    pub perplexity: f64,
    pub n_tokens: usize,
    /// Examples skipped for exceeding the context length.
    pub dropped: usize,
}

/// Mean masked cross-entropy over encoded examples and its exponential.
pub fn perplexity_encoded<T: Scalar>(model: &Model<T>, examples: &[EncodedExample]) -> Result<Perplexity> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation corpus is empty".into()));
    }
    let (loss, n_tokens) = evaluate_loss(model, examples, false)?;
    Ok(Perplexity {
        loss,
        perplexity: loss.exp(),
        n_tokens,
        dropped: 0,
    })
}

/// Completion-token perplexity of `corpus`, dropping examples whose inputs
/// exceed `context_len`.
pub fn perplexity<T: Scalar>(
    model: &Model<T>,
    tok: &TokenizerModel,
    corpus: &[InstructExample],
    context_len: usize,
) -> Result<Perplexity> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus is empty".into()));
    }
    let limit = context_len.min(model.config.context_len);
    let (kept, dropped): (Vec<EncodedExample>, Vec<EncodedExample>) = corpus
        .iter()
        .map(|e| encode_example(tok, e))
        .partition(|e| e.inputs().len() <= limit);
    if kept.is_empty() {
        return Err(Error::Empty("every example exceeds the context length".into()));
    }
    let mut p = perplexity_encoded(model, &kept)?;
    p.dropped = dropped.len();
    Ok(p)
}

/// Rows are true domains (story, recipe); columns are predictions (story,
/// recipe, unknown).
pub type Confusion = [[usize; 3]; 2];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskDetection {
    pub accuracy: f64,
    pub confusion: Confusion,
    pub completions: Vec<String>,
}

fn domain_row(d: Domain) -> usize {
    match d {
        Domain::Story => 0,
        Domain::Recipe => 1,
    }
}

/// Generates a completion per labeled prompt and classifies it; unknown counts
/// as incorrect. Prompt `i` samples with seed `rng::fnv1a`-mixed from `(seed, i)`.
pub fn task_detection(
    model: &ModelCheckpoint,
    tok: &TokenizerModel,
    prompts: &[(String, Domain)],
    sampling: &SamplingSpec,
    markers: &DomainMarkerSet,
) -> Result<TaskDetection> {
    if prompts.is_empty() {
        return Err(Error::Empty("no prompts".into()));
    }
    sampling.validate()?;
    let completions: Vec<String> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, (p, _))| {
            let spec = SamplingSpec {
                seed: sampling.seed ^ rng::fnv1a(format!("prompt:{i}").as_bytes()),
                ..sampling.clone()
            };
            generate(model, tok, p, &spec)
        })
        .collect::<Result<_>>()?;
    let mut confusion = [[0usize; 3]; 2];
    let mut correct = 0;
    for ((_, truth), text) in prompts.iter().zip(&completions) {
        let pred = classify_domain(text, markers);
        let col = pred.map(domain_row).unwrap_or(2);
        confusion[domain_row(*truth)][col] += 1;
        if pred == Some(*truth) {
            correct += 1;
        }
    }
    Ok(TaskDetection {
        accuracy: correct as f64 / prompts.len() as f64,
        confusion,
        completions,
    })
}

/// First 8 bytes of the SHA-256 of the serialized checkpoint, in hex.
pub fn checkpoint_id(model: &ModelCheckpoint) -> String {
    hex::encode(&Sha256::digest(checkpoint_bytes(model))[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainEval {
    pub domain: Domain,
    pub val_loss: f64,
    pub perplexity: f64,
    pub n_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub domains: Vec<DomainEval>,
    pub task_detection_accuracy: Option<f64>,
    pub confusion: Option<Confusion>,
    pub checkpoint_id: String,
    pub tokenizer_id: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "checkpoint {}  tokenizer {}  seed {}", self.checkpoint_id, self.tokenizer_id, self.seed);
        for d in &self.domains {
            let _ = writeln!(
                s,
                "{:<7} loss {:.4}  ppl {:.4}  tokens {}",
                d.domain.as_str(),
                d.val_loss,
                d.perplexity,
                d.n_tokens
            );
        }
        if let (Some(a), Some(c)) = (self.task_detection_accuracy, self.confusion) {
            let _ = writeln!(s, "task detection accuracy {a:.4}");
            let _ = writeln!(s, "truth\\pred story recipe unknown");
            for (name, row) in ["story", "recipe"].iter().zip(c) {
                let _ = writeln!(s, "{name:<11} {:>5} {:>6} {:>7}", row[0], row[1], row[2]);
            }
        }
        s
    }
}

fn check_tokenizer(model: &ModelCheckpoint, tok_id: &str) -> Result<()> {
    match &model.tokenizer_id {
        Some(id) if id != tok_id => Err(Error::TokenizerMismatch {
            expected: id.clone(),
            found: tok_id.to_owned(),
        }),
        _ => Ok(()),
    }
}

/// Per-domain perplexity plus optional task detection for one checkpoint.
pub fn evaluate(
    model: &ModelCheckpoint,
    tok: &TokenizerModel,
    eval_sets: &[(Domain, Vec<InstructExample>)],
    task: Option<(&[(String, Domain)], &SamplingSpec, &DomainMarkerSet)>,
) -> Result<EvalReport> {
    let tok_id = tok.id();
    check_tokenizer(model, &tok_id)?;
    let mut domains = Vec::new();
    for (d, set) in eval_sets {
        let p = perplexity(model, tok, set, model.config.context_len)?;
        domains.push(DomainEval {
            domain: *d,
            val_loss: p.loss,
            perplexity: p.perplexity,
            n_tokens: p.n_tokens,
        });
    }
    let (acc, confusion, seed) = match task {
        Some((prompts, spec, markers)) => {
            let t = task_detection(model, tok, prompts, spec, markers)?;
            (Some(t.accuracy), Some(t.confusion), spec.seed)
        }
        None => (None, None, 0),
    };
    Ok(EvalReport {
        domains,
        task_detection_accuracy: acc,
        confusion,
        checkpoint_id: checkpoint_id(model),
        tokenizer_id: tok_id,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForgettingRow {
    pub checkpoint: String,
    pub domain: Domain,
    pub loss: f64,
    pub perplexity: f64,
    pub delta_ppl_vs_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForgettingReport {
    pub rows: Vec<ForgettingRow>,
    pub source_domain: Domain,
    pub threshold: f64,
    /// Checkpoints whose source-domain perplexity ratio vs base reaches the threshold.
    pub forgetting: Vec<String>,
}

impl ForgettingReport {
    pub fn row(&self, checkpoint: &str, domain: Domain) -> Option<&ForgettingRow> {
        self.rows.iter().find(|r| r.checkpoint == checkpoint && r.domain == domain)
    }

    /// Perplexity of `checkpoint` on `domain` divided by the base perplexity.
    pub fn ratio(&self, checkpoint: &str, domain: Domain) -> Option<f64> {
        let base = self.row("base", domain)?;
        Some(self.row(checkpoint, domain)?.perplexity / base.perplexity)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("checkpoint,domain,loss,perplexity,delta_ppl_vs_base\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.checkpoint, r.domain, r.loss, r.perplexity, r.delta_ppl_vs_base);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:<7} {:>8} {:>10} {:>10}", "checkpoint", "domain", "loss", "ppl", "Δppl");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:<7} {:>8.4} {:>10.4} {:>+10.4}",
                r.checkpoint,
                r.domain.as_str(),
                r.loss,
                r.perplexity,
                r.delta_ppl_vs_base
            );
        }
        let _ = writeln!(s);
        for r in self.rows.iter().filter(|r| r.domain == self.source_domain && r.checkpoint != "base") {
            let ratio = self.ratio(&r.checkpoint, r.domain).unwrap_or(f64::NAN);
            let flag = if self.forgetting.contains(&r.checkpoint) {
                "forgetting"
            } else {
                "retained"
            };
            let _ = writeln!(s, "{}: {} ppl ratio vs base {ratio:.3} ({flag})", r.checkpoint, self.source_domain);
        }
        s
    }
}

/// Evaluates `base` and every adapted checkpoint on every domain set.
pub fn forgetting_report(
    base: &ModelCheckpoint,
    adapted: &[(String, ModelCheckpoint)],
    eval_sets: &[(Domain, Vec<InstructExample>)],
    tok: &TokenizerModel,
    source_domain: Domain,
    threshold: f64,
) -> Result<ForgettingReport> {
    let tok_id = tok.id();
    let mut all: Vec<(&str, &ModelCheckpoint)> = vec![("base", base)];
    for (name, m) in adapted {
        if name == "base" {
            return Err(Error::InvalidArgument("\"base\" is reserved".into()));
        }
        all.push((name, m));
    }
    for (_, m) in &all {
        check_tokenizer(m, &tok_id)?;
    }
    let mut rows = Vec::new();
    let mut base_ppl = Vec::new();
    for (ci, (name, m)) in all.iter().enumerate() {
        for (di, (d, set)) in eval_sets.iter().enumerate() {
            let p = perplexity(*m, tok, set, m.config.context_len)?;
            if ci == 0 {
                base_ppl.push(p.perplexity);
            }
            rows.push(ForgettingRow {
                checkpoint: (*name).to_owned(),
                domain: *d,
                loss: p.loss,
                perplexity: p.perplexity,
                delta_ppl_vs_base: p.perplexity - base_ppl[di],
            });
        }
    }
    let mut report = ForgettingReport {
        rows,
        source_domain,
        threshold,
        forgetting: Vec::new(),
    };
    report.forgetting = adapted
        .iter()
        .filter(|(name, _)| report.ratio(name, source_domain).is_some_and(|r| r >= threshold))
        .map(|(name, _)| name.clone())
        .collect();
    Ok(report)
}
