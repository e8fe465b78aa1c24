//! Experiment configuration and the end-to-end pipelines the CLI drives.
//!
//! Configs are flat `key=value` text with section prefixes (`train.batch_size=32`).
//! Unknown keys are rejected; every problem in a file is reported at once.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::adaptation::{run_adaptation, AdaptationOutcome, AdaptationSpec, ExpansionSpec, LoraSpec, Strategy};
use crate::corpus::{self, Domain, InstructExample, Lexicon, RawDocument};
use crate::error::{Error, Result};
use crate::eval::{forgetting_report, task_detection, DomainMarkerSet, ForgettingReport, TaskDetection};
use crate::model::{init, save_checkpoint, save_lora_delta, ModelCheckpoint, ModelConfig, SamplingMode, SamplingSpec};
use crate::tokenizer::TokenizerModel;
use crate::training::{train_loop, MetricsWriter, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerScope {
    Combined,
    Story,
    Recipe,
    Generic,
}

impl TokenizerScope {
    fn as_str(self) -> &'static str {
        match self {
            TokenizerScope::Combined => "combined",
            TokenizerScope::Story => "story",
            TokenizerScope::Recipe => "recipe",
            TokenizerScope::Generic => "generic",
        }
    }
}

impl FromStr for TokenizerScope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "combined" => TokenizerScope::Combined,
            "story" => TokenizerScope::Story,
            "recipe" => TokenizerScope::Recipe,
            "generic" => TokenizerScope::Generic,
            _ => return Err(format!("expected combined, story, recipe or generic, got {s:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    /// JSONL inputs; synthetic corpora are generated when unset.
    pub story: Option<PathBuf>,
    pub recipe: Option<PathBuf>,
    pub synth_docs: usize,
    pub val_fraction: f64,
    /// Token-count balancing after count balancing; `None` balances counts only.
    pub balance_tolerance: Option<f64>,
    /// Domain the base model is trained on; adaptation targets the other.
    pub source: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerConfig {
    pub path: Option<PathBuf>,
    pub vocab_size: usize,
    pub scope: TokenizerScope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub prompts: usize,
    pub sampling: SamplingSpec,
    pub markers: Option<PathBuf>,
    pub forgetting_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model_preset: String,
    pub model_overrides: BTreeMap<String, String>,
    pub train: TrainConfig,
    pub adapt: TrainConfig,
    pub lora: LoraSpec,
    pub expand: ExpansionSpec,
    pub corpus: CorpusConfig,
    pub tokenizer: TokenizerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 5,
            context_len: 350,
            early_stop_patience: 3,
            eval_interval: Some(25),
            max_steps: Some(300),
            bit_exact: false,
            ..TrainConfig::default()
        };
        let adapt = TrainConfig {
            max_steps: Some(150),
            ..train.clone()
        };
        ExperimentConfig {
            seed: 0,
            model_preset: "desk".into(),
            model_overrides: BTreeMap::new(),
            train,
            adapt,
            lora: LoraSpec::default(),
            expand: ExpansionSpec::default(),
            corpus: CorpusConfig {
                story: None,
                recipe: None,
                synth_docs: 1000,
                val_fraction: 0.1,
                balance_tolerance: None,
                source: Domain::Story,
            },
            tokenizer: TokenizerConfig {
                path: None,
                vocab_size: 1024,
                scope: TokenizerScope::Combined,
            },
            eval: EvalConfig {
                prompts: 200,
                sampling: SamplingSpec {
                    max_new_tokens: 48,
                    ..SamplingSpec::default()
                },
                markers: None,
                forgetting_threshold: crate::eval::DEFAULT_FORGETTING_THRESHOLD,
            },
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid value {v:?}"))
}

fn parse_opt<T: FromStr>(v: &str) -> std::result::Result<Option<T>, String> {
    if v == "none" {
        Ok(None)
    } else {
        parse(v).map(Some)
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn opt_text<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_else(|| "none".into())
}

fn path_text(v: &Option<PathBuf>) -> String {
    v.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into())
}

fn set_train(t: &mut TrainConfig, key: &str, v: &str) -> std::result::Result<bool, String> {
    match key {
        "learning_rate" => t.learning_rate = parse(v)?,
        "batch_size" => t.batch_size = parse(v)?,
        "epochs" => t.epochs = parse(v)?,
        "context_len" => t.context_len = parse(v)?,
        "early_stop_patience" => t.early_stop_patience = parse(v)?,
        "eval_interval" => t.eval_interval = if v == "auto" { None } else { Some(parse(v)?) },
        "grad_clip" => t.grad_clip = parse_opt(v)?,
        "weight_decay" => t.weight_decay = parse(v)?,
        "max_steps" => t.max_steps = parse_opt(v)?,
        "full_sequence_loss" => t.full_sequence_loss = parse_bool(v)?,
        "bit_exact" => t.bit_exact = parse_bool(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_text(out: &mut String, prefix: &str, t: &TrainConfig) {
    let _ = writeln!(out, "{prefix}.learning_rate={}", t.learning_rate);
    let _ = writeln!(out, "{prefix}.batch_size={}", t.batch_size);
    let _ = writeln!(out, "{prefix}.epochs={}", t.epochs);
    let _ = writeln!(out, "{prefix}.context_len={}", t.context_len);
    let _ = writeln!(out, "{prefix}.early_stop_patience={}", t.early_stop_patience);
    let interval = t.eval_interval.map(|i| i.to_string()).unwrap_or_else(|| "auto".into());
    let _ = writeln!(out, "{prefix}.eval_interval={interval}");
    let _ = writeln!(out, "{prefix}.grad_clip={}", opt_text(&t.grad_clip));
    let _ = writeln!(out, "{prefix}.weight_decay={}", t.weight_decay);
    let _ = writeln!(out, "{prefix}.max_steps={}", opt_text(&t.max_steps));
    let _ = writeln!(out, "{prefix}.full_sequence_loss={}", t.full_sequence_loss);
    let _ = writeln!(out, "{prefix}.bit_exact={}", t.bit_exact);
}

impl ExperimentConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let known = match key.split_once('.') {
            None if key == "seed" => {
                self.seed = parse(v)?;
                true
            }
            Some(("model", "preset")) => {
                if ModelConfig::preset(v, 512).is_none() {
                    return Err(format!("unknown preset {v:?}"));
                }
                self.model_preset = v.to_owned();
                true
            }
            Some(("model", field)) => {
                let mut scratch = ModelConfig::tiny();
                match scratch.set(field, v) {
                    Ok(true) => {
                        self.model_overrides.insert(field.to_owned(), v.to_owned());
                        true
                    }
                    Ok(false) => false,
                    Err(e) => return Err(e.to_string()),
                }
            }
            Some(("train", k)) => set_train(&mut self.train, k, v)?,
            Some(("adapt", k)) => set_train(&mut self.adapt, k, v)?,
            Some(("lora", k)) => {
                match k {
                    "rank" => self.lora.rank = parse(v)?,
                    "alpha" => self.lora.alpha = parse(v)?,
                    "targets" => {
                        self.lora.targets = if v == "default" {
                            None
                        } else {
                            Some(v.split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect())
                        }
                    }
                    _ => return Err("unknown key".into()),
                }
                true
            }
            Some(("expand", "k_new_blocks")) => {
                self.expand.k_new_blocks = parse(v)?;
                true
            }
            Some(("corpus", k)) => {
                let c = &mut self.corpus;
                match k {
                    "story" => c.story = parse_opt(v)?,
                    "recipe" => c.recipe = parse_opt(v)?,
                    "synth_docs" => c.synth_docs = parse(v)?,
                    "val_fraction" => c.val_fraction = parse(v)?,
                    "balance_tolerance" => c.balance_tolerance = parse_opt(v)?,
                    "source" => c.source = v.parse().map_err(|e: Error| e.to_string())?,
                    _ => return Err("unknown key".into()),
                }
                true
            }
            Some(("tokenizer", k)) => {
                let t = &mut self.tokenizer;
                match k {
                    "path" => t.path = parse_opt(v)?,
                    "vocab_size" => t.vocab_size = parse(v)?,
                    "scope" => t.scope = v.parse()?,
                    _ => return Err("unknown key".into()),
                }
                true
            }
            Some(("eval", k)) => {
                let e = &mut self.eval;
                match k {
                    "prompts" => e.prompts = parse(v)?,
                    "max_new_tokens" => e.sampling.max_new_tokens = parse(v)?,
                    "sampling" => {
                        e.sampling.mode = match v {
                            "greedy" => SamplingMode::Greedy,
                            "temperature" => SamplingMode::Temperature,
                            _ => return Err(format!("expected greedy or temperature, got {v:?}")),
                        }
                    }
                    "temperature" => e.sampling.temperature = parse(v)?,
                    "top_k" => e.sampling.top_k = parse_opt(v)?,
                    "markers" => e.markers = if v == "bundled" { None } else { Some(PathBuf::from(v)) },
                    "forgetting_threshold" => e.forgetting_threshold = parse(v)?,
                    _ => return Err("unknown key".into()),
                }
                true
            }
            _ => false,
        };
        if known {
            Ok(())
        } else {
            Err("unknown key".into())
        }
    }

    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::resolve(Some(text), &[])
    }

    /// Defaults, then `text`, then `overrides`, validated once; every bad line,
    /// override and value is reported together.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errors = text.map(|t| cfg.set_lines(t)).unwrap_or_default();
        errors.extend(cfg.set_pairs(overrides));
        cfg.finish(errors)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let errors = self.set_lines(text);
        self.finish(errors)
    }

    /// Applies `key=value` overrides, reporting every bad one.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        let errors = self.set_pairs(pairs);
        self.finish(errors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    fn set_lines(&mut self, text: &str) -> Vec<String> {
        let mut errors = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        errors.push(format!("line {}: {}: {e}", n + 1, k.trim()));
                    }
                }
                None => errors.push(format!("line {}: expected key=value", n + 1)),
            }
        }
        errors
    }

    fn set_pairs(&mut self, pairs: &[String]) -> Vec<String> {
        let mut errors = Vec::new();
        for p in pairs {
            match p.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        errors.push(format!("--set {p}: {e}"));
                    }
                }
                None => errors.push(format!("--set {p}: expected key=value")),
            }
        }
        errors
    }

    fn finish(&self, mut errors: Vec<String>) -> Result<()> {
        if let Err(Error::Config(list)) = self.validate() {
            errors.extend(list);
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        for (name, t) in [("train", &self.train), ("adapt", &self.adapt)] {
            if let Err(Error::Config(list)) = t.validate() {
                errors.extend(list.into_iter().map(|e| format!("{name}.{e}")));
            }
        }
        if let Err(e) = self.model_config(self.tokenizer.vocab_size) {
            errors.push(format!("model: {e}"));
        }
        if self.lora.rank == 0 {
            errors.push("lora.rank must be at least 1".into());
        }
        if !(self.lora.alpha > 0.0) {
            errors.push("lora.alpha must be positive".into());
        }
        if self.expand.k_new_blocks == 0 {
            errors.push("expand.k_new_blocks must be at least 1".into());
        }
        if !(self.corpus.val_fraction > 0.0 && self.corpus.val_fraction < 0.5) {
            errors.push("corpus.val_fraction must lie in (0, 0.5)".into());
        }
        if let Some(t) = self.corpus.balance_tolerance {
            if !(t > 0.0 && t < 1.0) {
                errors.push("corpus.balance_tolerance must lie in (0, 1)".into());
            }
        }
        if self.tokenizer.vocab_size < 256 + crate::tokenizer::NUM_SPECIALS {
            errors.push("tokenizer.vocab_size must be at least 259".into());
        }
        if let Err(e) = self.eval.sampling.validate() {
            errors.push(format!("eval: {e}"));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Model configuration for a tokenizer of `vocab_size` ids.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.model_preset, vocab_size)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset {}", self.model_preset)))?;
        for (k, v) in &self.model_overrides {
            c.set(k, v)?;
        }
        c.vocab_size = vocab_size;
        c.validate()?;
        Ok(c)
    }

    /// Fully resolved config, one key per line in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "model.preset={}", self.model_preset);
        for (k, v) in &self.model_overrides {
            let _ = writeln!(s, "model.{k}={v}");
        }
        train_text(&mut s, "train", &self.train);
        train_text(&mut s, "adapt", &self.adapt);
        let _ = writeln!(s, "lora.rank={}", self.lora.rank);
        let _ = writeln!(s, "lora.alpha={}", self.lora.alpha);
        let targets = self.lora.targets.as_ref().map(|t| t.join(",")).unwrap_or_else(|| "default".into());
        let _ = writeln!(s, "lora.targets={targets}");
        let _ = writeln!(s, "expand.k_new_blocks={}", self.expand.k_new_blocks);
        let c = &self.corpus;
        let _ = writeln!(s, "corpus.story={}", path_text(&c.story));
        let _ = writeln!(s, "corpus.recipe={}", path_text(&c.recipe));
        let _ = writeln!(s, "corpus.synth_docs={}", c.synth_docs);
        let _ = writeln!(s, "corpus.val_fraction={}", c.val_fraction);
        let _ = writeln!(s, "corpus.balance_tolerance={}", opt_text(&c.balance_tolerance));
        let _ = writeln!(s, "corpus.source={}", c.source);
        let t = &self.tokenizer;
        let _ = writeln!(s, "tokenizer.path={}", path_text(&t.path));
        let _ = writeln!(s, "tokenizer.vocab_size={}", t.vocab_size);
        let _ = writeln!(s, "tokenizer.scope={}", t.scope.as_str());
        let e = &self.eval;
        let _ = writeln!(s, "eval.prompts={}", e.prompts);
        let _ = writeln!(s, "eval.max_new_tokens={}", e.sampling.max_new_tokens);
        let mode = match e.sampling.mode {
            SamplingMode::Greedy => "greedy",
            SamplingMode::Temperature => "temperature",
        };
        let _ = writeln!(s, "eval.sampling={mode}");
        let _ = writeln!(s, "eval.temperature={}", e.sampling.temperature);
        let _ = writeln!(s, "eval.top_k={}", opt_text(&e.sampling.top_k));
        let markers = e.markers.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "bundled".into());
        let _ = writeln!(s, "eval.markers={markers}");
        let _ = writeln!(s, "eval.forgetting_threshold={}", e.forgetting_threshold);
        s
    }

    /// Short hash of the resolved config.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..6])
    }

    /// Creates `<out>/<command>-<hash>` and writes the resolved config into it.
    /// `inputs` (files the command reads) join the hash and go to `inputs.txt`.
    pub fn run_dir(&self, out: &Path, command: &str, inputs: &[(&str, String)]) -> Result<PathBuf> {
        let mut listing = String::new();
        for (k, v) in inputs {
            let _ = writeln!(listing, "{k}={v}");
        }
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(b"\n");
        h.update(self.to_text().as_bytes());
        h.update(listing.as_bytes());
        let dir = out.join(format!("{command}-{}", hex::encode(&h.finalize()[..6])));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write(&dir.join("config.txt"), &self.to_text())?;
        if !inputs.is_empty() {
            write(&dir.join("inputs.txt"), &listing)?;
        }
        Ok(dir)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn adapt_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.adapt.clone()
        }
    }

    pub fn lora_spec(&self) -> LoraSpec {
        LoraSpec {
            seed: self.seed,
            ..self.lora.clone()
        }
    }

    pub fn expansion_spec(&self) -> ExpansionSpec {
        ExpansionSpec {
            seed: self.seed,
            ..self.expand.clone()
        }
    }

    pub fn sampling(&self) -> SamplingSpec {
        SamplingSpec {
            seed: self.seed,
            ..self.eval.sampling.clone()
        }
    }

    pub fn markers(&self) -> Result<DomainMarkerSet> {
        match &self.eval.markers {
            Some(p) => DomainMarkerSet::load(p),
            None => Ok(DomainMarkerSet::bundled()),
        }
    }
}

/// Train/validation examples of one domain.
#[derive(Debug, Clone, Default)]
pub struct DomainSplit {
    pub train: Vec<InstructExample>,
    pub val: Vec<InstructExample>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpora {
    pub story: DomainSplit,
    pub recipe: DomainSplit,
    /// Documents dropped because no instruct prompt could be synthesized.
    pub skipped: usize,
}

impl Corpora {
    pub fn get(&self, d: Domain) -> &DomainSplit {
        match d {
            Domain::Story => &self.story,
            Domain::Recipe => &self.recipe,
        }
    }
}

fn other(d: Domain) -> Domain {
    match d {
        Domain::Story => Domain::Recipe,
        Domain::Recipe => Domain::Story,
    }
}

fn raw_docs(path: &Option<PathBuf>, domain: Domain, n: usize, seed: u64) -> Result<Vec<RawDocument>> {
    match path {
        Some(p) => Ok(corpus::ingest(p, domain)?.docs),
        None => Ok(corpus::synth_corpus(domain, n, seed)),
    }
}

/// Loads or synthesizes both corpora, cleans and balances them, synthesizes
/// instruct prompts and splits off validation sets.
pub fn prepare_corpora(cfg: &ExperimentConfig) -> Result<Corpora> {
    let c = &cfg.corpus;
    let story = corpus::clean(&raw_docs(&c.story, Domain::Story, c.synth_docs, cfg.seed)?);
    let recipe = corpus::clean(&raw_docs(&c.recipe, Domain::Recipe, c.synth_docs, cfg.seed)?);
    let (story, recipe) = match c.balance_tolerance {
        Some(t) => corpus::balance(&story, &recipe, &TokenizerModel::bytes_only(), t)?,
        None => {
            let n = story.len().min(recipe.len());
            (story[..n].to_vec(), recipe[..n].to_vec())
        }
    };
    let lex = Lexicon::bundled();
    let mut out = Corpora::default();
    for (docs, slot) in [(story, &mut out.story), (recipe, &mut out.recipe)] {
        let (examples, skipped) = corpus::synthesize_all(&docs, cfg.seed, &lex);
        out.skipped += skipped.len();
        let (train, val) = corpus::split(&examples, c.val_fraction, cfg.seed)?;
        *slot = DomainSplit { train, val };
    }
    Ok(out)
}

fn training_text(examples: &[InstructExample]) -> impl Iterator<Item = String> + '_ {
    examples.iter().map(|e| format!("{}\n{}", e.prompt, e.completion))
}

/// Loads the configured tokenizer file or trains one on the training splits.
pub fn build_tokenizer(cfg: &ExperimentConfig, corpora: &Corpora) -> Result<TokenizerModel> {
    let t = &cfg.tokenizer;
    if let Some(p) = &t.path {
        return TokenizerModel::load(p);
    }
    let texts: Vec<String> = match t.scope {
        TokenizerScope::Generic => return TokenizerModel::generic(t.vocab_size),
        TokenizerScope::Story => training_text(&corpora.story.train).collect(),
        TokenizerScope::Recipe => training_text(&corpora.recipe.train).collect(),
        TokenizerScope::Combined => training_text(&corpora.story.train)
            .chain(training_text(&corpora.recipe.train))
            .collect(),
    };
    TokenizerModel::train(&texts, t.vocab_size)
}

/// Trains a fresh model on `domain`.
pub fn train_base(
    cfg: &ExperimentConfig,
    tok: &TokenizerModel,
    corpora: &Corpora,
    domain: Domain,
    metrics: Option<&mut MetricsWriter>,
) -> Result<TrainOutcome> {
    let mut model: ModelCheckpoint = init(&cfg.model_config(tok.vocab_size())?, cfg.seed)?;
    model.tokenizer_id = Some(tok.id());
    let split = corpora.get(domain);
    let freeze = model.params.freeze_map();
    train_loop(model, &split.train, &split.val, tok, &cfg.train_config(), &freeze, metrics)
}

/// Adapts `base` to `domain` with `strategy`.
pub fn adapt(
    cfg: &ExperimentConfig,
    base: &ModelCheckpoint,
    strategy: Strategy,
    tok: &TokenizerModel,
    corpora: &Corpora,
    domain: Domain,
    metrics: Option<&mut MetricsWriter>,
) -> Result<AdaptationOutcome> {
    let spec = AdaptationSpec {
        strategy,
        train: cfg.adapt_config(),
    };
    let split = corpora.get(domain);
    run_adaptation(base, &spec, tok, &split.train, &split.val, metrics)
}

/// Balanced held-out prompts drawn from the validation splits.
pub fn heldout_prompts(cfg: &ExperimentConfig, corpora: &Corpora) -> Vec<(String, Domain)> {
    let per = cfg.eval.prompts / 2;
    let mut out = Vec::with_capacity(per * 2);
    for d in Domain::ALL {
        out.extend(corpora.get(d).val.iter().take(per).map(|e| (e.prompt.clone(), d)));
    }
    out
}

/// Per-domain validation sets for perplexity evaluation.
pub fn eval_sets(corpora: &Corpora) -> Vec<(Domain, Vec<InstructExample>)> {
    Domain::ALL.iter().map(|&d| (d, corpora.get(d).val.clone())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub base: ModelCheckpoint,
    pub full_finetune: AdaptationOutcome,
    pub lora: AdaptationOutcome,
    pub expand: AdaptationOutcome,
    pub report: ForgettingReport,
    pub task: TaskDetection,
    pub checks: Vec<Check>,
}

impl BenchResult {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        s
    }
}

fn strategy_checks(report: &ForgettingReport, source: Domain, task: &TaskDetection) -> Vec<Check> {
    let target = other(source);
    let ppl = |c: &str, d: Domain| report.row(c, d).map(|r| r.perplexity).unwrap_or(f64::NAN);
    let loss = |c: &str, d: Domain| report.row(c, d).map(|r| r.loss).unwrap_or(f64::NAN);
    let base_src = ppl("base", source);
    let full_src = ppl("full_finetune", source);
    let exp_src = ppl("expand", source);
    let full_tgt = ppl("full_finetune", target);
    let exp_tgt = ppl("expand", target);
    let check = |name: &str, pass: bool, detail: String| Check {
        name: name.to_owned(),
        pass,
        detail,
    };
    vec![
        check(
            "full fine-tune forgets the source domain",
            full_src >= 2.0 * base_src,
            format!("{source} ppl {full_src:.3} vs base {base_src:.3} (ratio {:.3}, need >= 2)", full_src / base_src),
        ),
        check(
            "expansion retains the source domain",
            exp_src <= 1.25 * base_src,
            format!("{source} ppl {exp_src:.3} vs base {base_src:.3} (ratio {:.3}, need <= 1.25)", exp_src / base_src),
        ),
        check(
            "expansion learns the target domain",
            (exp_tgt - full_tgt).abs() <= 0.3 * full_tgt,
            format!("{target} ppl {exp_tgt:.3} vs full fine-tune {full_tgt:.3} (need within 30%)"),
        ),
        check(
            "lora stays behind expansion on the target domain",
            loss("lora", target) > loss("expand", target),
            format!("{target} loss {:.4} vs expansion {:.4}", loss("lora", target), loss("expand", target)),
        ),
        check(
            "expansion forgets less than full fine-tune",
            exp_src < full_src,
            format!("{source} ppl {exp_src:.3} vs {full_src:.3}"),
        ),
        check(
            "expanded model routes tasks",
            task.accuracy >= 0.90,
            format!("accuracy {:.3} (need >= 0.90)", task.accuracy),
        ),
    ]
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains (or reuses) a base model on the source domain, adapts it to the
/// other domain with all three strategies under one step budget, and reports
/// perplexity on both domains plus task routing of the expanded model.
/// With `out`, every checkpoint, metrics file and report lands there.
pub fn forgetting_bench(
    cfg: &ExperimentConfig,
    base: Option<ModelCheckpoint>,
    tok: &TokenizerModel,
    corpora: &Corpora,
    out: Option<&Path>,
) -> Result<BenchResult> {
    let source = cfg.corpus.source;
    let target = other(source);
    let writer = |name: &str| -> Result<Option<MetricsWriter>> {
        out.map(|d| MetricsWriter::create(&d.join(format!("metrics-{name}.csv"))))
            .transpose()
    };
    let base = match base {
        Some(b) => b,
        None => {
            let mut w = writer("base")?;
            train_base(cfg, tok, corpora, source, w.as_mut())?.model
        }
    };
    let run = |strategy: Strategy| -> Result<AdaptationOutcome> {
        let mut w = writer(strategy.name())?;
        adapt(cfg, &base, strategy, tok, corpora, target, w.as_mut())
    };
    let full_finetune = run(Strategy::FullFinetune)?;
    let lora = run(Strategy::Lora(cfg.lora_spec()))?;
    let expand = run(Strategy::Expand(cfg.expansion_spec()))?;

    let adapted = vec![
        ("full_finetune".to_owned(), full_finetune.model.clone()),
        ("lora".to_owned(), lora.model.clone()),
        ("expand".to_owned(), expand.model.clone()),
    ];
    let report = forgetting_report(&base, &adapted, &eval_sets(corpora), tok, source, cfg.eval.forgetting_threshold)?;
    let prompts = heldout_prompts(cfg, corpora);
    let task = task_detection(&expand.model, tok, &prompts, &cfg.sampling(), &cfg.markers()?)?;
    let checks = strategy_checks(&report, source, &task);
    let result = BenchResult {
        base,
        full_finetune,
        lora,
        expand,
        report,
        task,
        checks,
    };
    if let Some(d) = out {
        save_checkpoint(&result.base, d.join("base.slmx"))?;
        save_checkpoint(&result.full_finetune.model, d.join("full_finetune.slmx"))?;
        save_checkpoint(&result.lora.model, d.join("lora.slmx"))?;
        if let Some(a) = &result.lora.adapters {
            save_lora_delta(a, &d.join("lora_delta.slmx"))?;
        }
        save_checkpoint(&result.expand.model, d.join("expand.slmx"))?;
        write(&d.join("forgetting.csv"), &result.report.to_csv())?;
        write(&d.join("forgetting.txt"), &result.report.to_text())?;
        write(&d.join("summary.txt"), &result.summary())?;
        let json = serde_json::to_string_pretty(&result.task).expect("task detection serializes");
        write(&d.join("task_detection.json"), &json)?;
    }
    Ok(result)
}
