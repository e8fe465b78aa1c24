//! `slm-forge`: corpora, tokenizers, training, adaptation and evaluation from
//! one command line.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use slm_forge_core::adaptation::Strategy;
use slm_forge_core::corpus::{self, Domain};
use slm_forge_core::eval::{self, classify_domain};
use slm_forge_core::experiment::{self, Corpora, ExperimentConfig};
use slm_forge_core::model::{self, load_checkpoint, save_checkpoint, save_lora_delta, ModelCheckpoint};
use slm_forge_core::training::MetricsWriter;
use slm_forge_core::{Error, TokenizerModel};

#[derive(Parser, Debug)]
#[command(name = "slm-forge", version, about = "Continual-learning experiments for small language models")]
struct Cli {
    /// Experiment config (key=value lines); flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Fixed-order reductions: results independent of thread count.
    #[arg(long, global = true)]
    bit_exact: bool,
    /// Extra config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ModelInput {
    /// Checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tokenizer file; rebuilt from the config when omitted.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic JSONL corpus.
    CorpusSynth {
        #[arg(long)]
        domain: Domain,
        #[arg(long)]
        n: usize,
        /// Output file instead of a run directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a BPE tokenizer on the configured corpora.
    TokenizerTrain {
        /// combined, story, recipe or generic.
        #[arg(long)]
        scope: Option<String>,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Train a base model on one domain.
    Train {
        #[arg(long)]
        domain: Option<Domain>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// Fine-tune every parameter of a checkpoint on a new domain.
    Finetune {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long)]
        domain: Option<Domain>,
    },
    /// Train LoRA adapters on a new domain.
    Lora {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long)]
        domain: Option<Domain>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Freeze a checkpoint, append blocks and train them on a new domain.
    Expand {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long)]
        domain: Option<Domain>,
        /// Number of new blocks.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Perplexity on both validation sets plus task detection.
    Eval {
        #[command(flatten)]
        input: ModelInput,
        /// Skip generation-based task detection.
        #[arg(long)]
        no_task: bool,
    },
    /// Generate a completion for one prompt.
    Generate {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Base training plus full fine-tune, LoRA and expansion under one budget.
    ForgettingBench {
        /// Reuse a trained base instead of training one.
        #[arg(long, requires = "tokenizer")]
        base: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
}

fn other(d: Domain) -> Domain {
    match d {
        Domain::Story => Domain::Recipe,
        Domain::Recipe => Domain::Story,
    }
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let text = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let mut over = Vec::new();
    if let Some(s) = cli.seed {
        over.push(format!("seed={s}"));
    }
    if cli.bit_exact {
        over.push("train.bit_exact=true".into());
        over.push("adapt.bit_exact=true".into());
    }
    let tok = |p: &Option<PathBuf>| p.as_ref().map(|p| format!("tokenizer.path={}", p.display()));
    match &cli.command {
        Command::TokenizerTrain { scope, vocab_size } => {
            over.extend(scope.as_ref().map(|s| format!("tokenizer.scope={s}")));
            over.extend(vocab_size.map(|v| format!("tokenizer.vocab_size={v}")));
        }
        Command::Train { domain, tokenizer } => {
            over.extend(domain.map(|d| format!("corpus.source={d}")));
            over.extend(tok(tokenizer));
        }
        Command::Finetune { input, domain } => {
            over.extend(domain.map(|d| format!("corpus.source={}", other(d))));
            over.extend(tok(&input.tokenizer));
        }
        Command::Lora { input, domain, rank, alpha } => {
            over.extend(domain.map(|d| format!("corpus.source={}", other(d))));
            over.extend(rank.map(|r| format!("lora.rank={r}")));
            over.extend(alpha.map(|a| format!("lora.alpha={a}")));
            over.extend(tok(&input.tokenizer));
        }
        Command::Expand { input, domain, k } => {
            over.extend(domain.map(|d| format!("corpus.source={}", other(d))));
            over.extend(k.map(|k| format!("expand.k_new_blocks={k}")));
            over.extend(tok(&input.tokenizer));
        }
        Command::Eval { input, .. } => over.extend(tok(&input.tokenizer)),
        Command::Generate {
            input,
            max_new_tokens,
            temperature,
            top_k,
            ..
        } => {
            over.extend(tok(&input.tokenizer));
            over.extend(max_new_tokens.map(|n| format!("eval.max_new_tokens={n}")));
            if let Some(t) = temperature {
                over.push("eval.sampling=temperature".into());
                over.push(format!("eval.temperature={t}"));
            }
            over.extend(top_k.map(|k| format!("eval.top_k={k}")));
        }
        Command::ForgettingBench { tokenizer, .. } => over.extend(tok(tokenizer)),
        Command::CorpusSynth { .. } => {}
    }
    over.extend(cli.set.iter().cloned());
    Ok(ExperimentConfig::resolve(text.as_deref(), &over)?)
}

fn path_input(name: &'static str, p: &Path) -> (&'static str, String) {
    (name, p.display().to_string())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn metrics(dir: &Path) -> Result<MetricsWriter> {
    Ok(MetricsWriter::create(&dir.join("metrics.csv"))?)
}

fn load(input: &ModelInput) -> Result<ModelCheckpoint> {
    Ok(load_checkpoint(&input.checkpoint)?)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    let out = &cli.out;
    let inputs_of = |input: &ModelInput| {
        let mut v = vec![path_input("checkpoint", &input.checkpoint)];
        if let Some(t) = &input.tokenizer {
            v.push(path_input("tokenizer", t));
        }
        v
    };
    let corpora_and_tok = |cfg: &ExperimentConfig| -> Result<(Corpora, TokenizerModel)> {
        let corpora = experiment::prepare_corpora(cfg)?;
        let tok = experiment::build_tokenizer(cfg, &corpora)?;
        Ok((corpora, tok))
    };
    match &cli.command {
        Command::CorpusSynth { domain, n, output } => {
            let docs = corpus::synth_corpus(*domain, *n, cfg.seed);
            let path = match output {
                Some(p) => p.clone(),
                None => cfg
                    .run_dir(out, "corpus-synth", &[("domain", domain.to_string()), ("n", n.to_string())])?
                    .join(format!("{domain}.jsonl")),
            };
            corpus::write_jsonl(&path, &docs)?;
            println!("{}", path.display());
        }
        Command::TokenizerTrain { .. } => {
            let dir = cfg.run_dir(out, "tokenizer-train", &[])?;
            let (corpora, tok) = corpora_and_tok(&cfg)?;
            tok.save(dir.join("tokenizer.bpe"))?;
            let mut stats = format!("tokenizer_id={}\nvocab_size={}\n", tok.id(), tok.vocab_size());
            for d in Domain::ALL {
                let texts: Vec<&str> = corpora.get(d).val.iter().map(|e| e.completion.as_str()).collect();
                stats.push_str(&format!("tokens_per_byte.{d}={}\n", tok.compression(&texts)?));
            }
            write(&dir.join("stats.txt"), &stats)?;
            println!("{}", dir.display());
        }
        Command::Train { .. } => {
            let dir = cfg.run_dir(out, "train", &[])?;
            let (corpora, tok) = corpora_and_tok(&cfg)?;
            tok.save(dir.join("tokenizer.bpe"))?;
            let mut w = metrics(&dir)?;
            let outcome = experiment::train_base(&cfg, &tok, &corpora, cfg.corpus.source, Some(&mut w))?;
            save_checkpoint(&outcome.model, dir.join("model.slmx"))?;
            println!("{}", dir.display());
        }
        Command::Finetune { input, .. } | Command::Lora { input, .. } | Command::Expand { input, .. } => {
            let (name, strategy) = match &cli.command {
                Command::Finetune { .. } => ("finetune", Strategy::FullFinetune),
                Command::Lora { .. } => ("lora", Strategy::Lora(cfg.lora_spec())),
                _ => ("expand", Strategy::Expand(cfg.expansion_spec())),
            };
            let base = load(input)?;
            let dir = cfg.run_dir(out, name, &inputs_of(input))?;
            let (corpora, tok) = corpora_and_tok(&cfg)?;
            tok.save(dir.join("tokenizer.bpe"))?;
            let mut w = metrics(&dir)?;
            let target = other(cfg.corpus.source);
            let outcome = experiment::adapt(&cfg, &base, strategy, &tok, &corpora, target, Some(&mut w))?;
            save_checkpoint(&outcome.model, dir.join("model.slmx"))?;
            if let Some(a) = &outcome.adapters {
                save_lora_delta(a, &dir.join("lora_delta.slmx"))?;
            }
            println!("{}", dir.display());
        }
        Command::Eval { input, no_task } => {
            let model = load(input)?;
            let dir = cfg.run_dir(out, "eval", &inputs_of(input))?;
            let (corpora, tok) = corpora_and_tok(&cfg)?;
            let prompts = experiment::heldout_prompts(&cfg, &corpora);
            let sampling = cfg.sampling();
            let markers = cfg.markers()?;
            let task = (!no_task).then_some((prompts.as_slice(), &sampling, &markers));
            let report = eval::evaluate(&model, &tok, &experiment::eval_sets(&corpora), task)?;
            write(&dir.join("report.json"), &report.to_json())?;
            write(&dir.join("report.txt"), &report.to_text())?;
            print!("{}", report.to_text());
            println!("{}", dir.display());
        }
        Command::Generate { input, prompt, .. } => {
            let model = load(input)?;
            let mut inputs = inputs_of(input);
            inputs.push(("prompt", prompt.clone()));
            let dir = cfg.run_dir(out, "generate", &inputs)?;
            let tok = match &cfg.tokenizer.path {
                Some(p) => TokenizerModel::load(p)?,
                None => corpora_and_tok(&cfg)?.1,
            };
            let text = model::generate(&model, &tok, prompt, &cfg.sampling())?;
            let label = classify_domain(&text, &cfg.markers()?)
                .map(|d| d.to_string())
                .unwrap_or_else(|| "unknown".into());
            write(&dir.join("generation.txt"), &format!("{text}\n"))?;
            write(&dir.join("domain.txt"), &format!("{label}\n"))?;
            println!("{text}");
            eprintln!("domain: {label}");
            println!("{}", dir.display());
        }
        Command::ForgettingBench { base, tokenizer } => {
            let mut inputs = Vec::new();
            if let Some(b) = base {
                inputs.push(path_input("base", b));
            }
            if let Some(t) = tokenizer {
                inputs.push(path_input("tokenizer", t));
            }
            let base = base.as_ref().map(load_checkpoint).transpose()?;
            let dir = cfg.run_dir(out, "forgetting-bench", &inputs)?;
            let (corpora, tok) = corpora_and_tok(&cfg)?;
            tok.save(dir.join("tokenizer.bpe"))?;
            let result = experiment::forgetting_bench(&cfg, base, &tok, &corpora, Some(&dir))?;
            print!("{}", result.report.to_text());
            print!("{}", result.summary());
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn threads() -> Result<()> {
    if let Ok(v) = std::env::var("SLM_FORGE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("SLM_FORGE_THREADS must be a count, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match threads().and_then(|_| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(Error::Config(list)) = e.downcast_ref::<Error>() {
                eprintln!("error: invalid configuration");
                for item in list {
                    eprintln!("  {item}");
                }
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
