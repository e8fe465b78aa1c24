//! Full fine-tuning, LoRA adapters and knowledge expansion.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::corpus::InstructExample;
use crate::error::{Error, Result};
use crate::model::forward::{LORA_A, LORA_B};
use crate::model::{block_tensors, LoraMeta, Model, ModelCheckpoint, Tensor, FINAL_NORM, INIT_STD};
use crate::rng;
use crate::tensor::{gemm_into, MatRef, Scalar};
use crate::tokenizer::TokenizerModel;
use crate::training::{train_loop, MetricsWriter, TrainConfig, TrainOutcome};

pub type FreezeMap = BTreeMap<String, bool>;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    /// Matrices to adapt; `None` means every attention q and v projection.
    pub targets: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for LoraSpec {
    fn default() -> Self {
        LoraSpec {
            rank: 8,
            alpha: 16.0,
            targets: None,
            seed: 0,
        }
    }
}

impl LoraSpec {
    pub fn resolved_targets<T: Scalar>(&self, model: &Model<T>) -> Vec<String> {
        match &self.targets {
            Some(t) => t.clone(),
            None => (0..model.config.n_layers)
                .flat_map(|i| [format!("blocks.{i}.attn.wq"), format!("blocks.{i}.attn.wv")])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InsertAt {
    #[default]
    AppendBeforeFinalNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionSpec {
    pub k_new_blocks: usize,
    pub insert_at: InsertAt,
    pub seed: u64,
}

impl Default for ExpansionSpec {
    fn default() -> Self {
        ExpansionSpec {
            k_new_blocks: 2,
            insert_at: InsertAt::AppendBeforeFinalNorm,
            seed: 0,
        }
    }
}

/// Adaptation strategy together with its payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    FullFinetune,
    Lora(LoraSpec),
    Expand(ExpansionSpec),
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FullFinetune => "full_finetune",
            Strategy::Lora(_) => "lora",
            Strategy::Expand(_) => "expand",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationSpec {
    pub strategy: Strategy,
    pub train: TrainConfig,
}

/// Everything trainable; the parameters are returned unchanged.
pub fn plan_full_finetune<T: Scalar>(ckpt: &Model<T>) -> (Model<T>, FreezeMap) {
    let model = ckpt.clone();
    let map = model.params.tensors().iter().map(|t| (t.name.clone(), false)).collect();
    (model, map)
}

fn is_adapter(name: &str) -> bool {
    name.ends_with(LORA_A) || name.ends_with(LORA_B)
}

/// Adds `A [rank × d_in] ~ N(0, 0.02)` and `B [d_out × rank] = 0` for every
/// target; only adapter tensors stay trainable.
pub fn attach_lora<T: Scalar>(ckpt: &Model<T>, spec: &LoraSpec) -> Result<(Model<T>, FreezeMap)> {
    if ckpt.lora.is_some() {
        return Err(Error::InvalidArgument("model already carries adapters".into()));
    }
    if spec.rank == 0 {
        return Err(Error::InvalidArgument("lora rank must be at least 1".into()));
    }
    if !(spec.alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("lora alpha must be positive, got {}", spec.alpha)));
    }
    let targets = spec.resolved_targets(ckpt);
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no lora targets".into()));
    }
    let mut model = ckpt.clone();
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut added = Vec::new();
    for name in &targets {
        let t = ckpt
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown lora target {name}")))?;
        if t.shape.len() != 2 || is_adapter(name) {
            return Err(Error::InvalidArgument(format!("lora target {name} is not a weight matrix")));
        }
        let (d_out, d_in) = (t.shape[0], t.shape[1]);
        if spec.rank > d_out.min(d_in) {
            return Err(Error::InvalidArgument(format!(
                "lora rank {} exceeds min dimension {} of {name}",
                spec.rank,
                d_out.min(d_in)
            )));
        }
        let mut rng = rng::stream(spec.seed, &format!("lora:{name}"));
        let mut a = Tensor::zeros(format!("{name}{LORA_A}"), vec![spec.rank, d_in]);
        for x in &mut a.data {
            *x = T::from_f64(normal.sample(&mut rng));
        }
        added.push(a);
        added.push(Tensor::zeros(format!("{name}{LORA_B}"), vec![d_out, spec.rank]));
    }
    for t in added {
        model.params.push(t)?;
    }
    model.lora = Some(LoraMeta {
        rank: spec.rank,
        alpha: spec.alpha,
    });
    let map = model
        .params
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), !is_adapter(&t.name)))
        .collect();
    model.params.apply_freeze(&map)?;
    Ok((model, map))
}

/// Folds `(alpha/rank)·B·A` into each target and drops the adapters. The sum
/// is computed exactly as the adapted forward pass computes it.
pub fn merge_lora<T: Scalar>(adapted: &Model<T>) -> Result<Model<T>> {
    let meta = adapted.lora.ok_or(Error::NoAdapters)?;
    let scale = T::from_f64(meta.scale());
    let mut model = adapted.clone();
    let layout = crate::model::forward::Layout::resolve(adapted)?;
    if layout.adapters.is_empty() {
        return Err(Error::NoAdapters);
    }
    for ad in &layout.adapters {
        let ts = adapted.params.tensors();
        let (w, a, b) = (&ts[ad.target], &ts[ad.a], &ts[ad.b]);
        let (d_out, d_in, r) = (w.shape[0], w.shape[1], a.shape[0]);
        let mut eff = w.data.clone();
        gemm_into(
            scale,
            MatRef::new(&b.data, d_out, r),
            MatRef::new(&a.data, r, d_in),
            T::ONE,
            &mut eff,
            d_in,
            1,
        );
        model.params.tensors_mut()[ad.target].data = eff;
    }
    model.params.remove_where(|t| is_adapter(&t.name));
    for t in model.params.tensors_mut() {
        t.frozen = false;
    }
    model.lora = None;
    Ok(model)
}

/// Appends `k` blocks before the final norm. New blocks are initialized like
/// `init` except that their attention output and FFN down projections are zero,
/// so the expanded model computes exactly what the base computes. Every
/// pre-existing tensor is frozen.
pub fn expand<T: Scalar>(ckpt: &Model<T>, spec: &ExpansionSpec) -> Result<(Model<T>, FreezeMap)> {
    if spec.k_new_blocks == 0 {
        return Err(Error::InvalidArgument("k_new_blocks must be at least 1".into()));
    }
    if ckpt.lora.is_some() {
        return Err(Error::InvalidArgument("merge adapters before expanding".into()));
    }
    let mut model = ckpt.clone();
    let old = ckpt.config.n_layers;
    model.config.n_layers += spec.k_new_blocks;
    let new: Vec<Tensor<T>> = (old..model.config.n_layers)
        .flat_map(|i| block_tensors(&model.config, i, spec.seed, true))
        .collect();
    let new_names: std::collections::HashSet<String> = new.iter().map(|t| t.name.clone()).collect();
    match spec.insert_at {
        InsertAt::AppendBeforeFinalNorm => model.params.insert_before(FINAL_NORM, new)?,
    }
    let map: FreezeMap = model
        .params
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), !new_names.contains(&t.name)))
        .collect();
    model.params.apply_freeze(&map)?;
    Ok((model, map))
}

#[derive(Debug, Clone)]
pub struct AdaptationOutcome {
    /// Adapted checkpoint; for LoRA the adapters are merged in.
    pub model: ModelCheckpoint,
    /// LoRA only: the trained model with adapters still separate.
    pub adapters: Option<ModelCheckpoint>,
    pub train: TrainOutcome,
}

/// Plans the strategy, trains with its freeze map and returns the result.
pub fn run_adaptation(
    base: &ModelCheckpoint,
    spec: &AdaptationSpec,
    tok: &TokenizerModel,
    train: &[InstructExample],
    val: &[InstructExample],
    metrics: Option<&mut MetricsWriter>,
) -> Result<AdaptationOutcome> {
    let id = tok.id();
    if let Some(found) = &base.tokenizer_id {
        if *found != id {
            return Err(Error::TokenizerMismatch {
                expected: found.clone(),
                found: id,
            });
        }
    }
    let (planned, freeze) = match &spec.strategy {
        Strategy::FullFinetune => plan_full_finetune(base),
        Strategy::Lora(l) => attach_lora(base, l)?,
        Strategy::Expand(e) => expand(base, e)?,
    };
    let mut out = train_loop(planned, train, val, tok, &spec.train, &freeze, metrics)?;
    out.model.tokenizer_id = Some(id);
    let (model, adapters) = match spec.strategy {
        Strategy::Lora(_) => (merge_lora(&out.model)?, Some(out.model.clone())),
        _ => (out.model.clone(), None),
    };
    Ok(AdaptationOutcome {
        model,
        adapters,
        train: out,
    })
}
