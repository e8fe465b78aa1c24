//! Llama-style decoder-only transformer: RMSNorm pre-norm blocks, rotary
//! position encoding, SwiGLU feed-forward, no biases, tied unembedding by
//! default.

mod checkpoint;
mod config;
pub(crate) mod forward;
mod generate;

use std::collections::{BTreeMap, HashMap};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Scalar;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, load_lora_delta, save_checkpoint, save_lora_delta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use forward::{forward, rms_norm};
pub use generate::{generate, generate_ids, SamplingMode, SamplingSpec};

pub const INIT_STD: f64 = 0.02;

pub const EMBEDDING: &str = "tok_embeddings";
pub const FINAL_NORM: &str = "norm";
pub const OUTPUT: &str = "output";

/// Tensor names of block `i`, in storage order.
pub fn block_tensor_names(i: usize) -> [String; 9] {
    [
        format!("blocks.{i}.attn_norm"),
        format!("blocks.{i}.attn.wq"),
        format!("blocks.{i}.attn.wk"),
        format!("blocks.{i}.attn.wv"),
        format!("blocks.{i}.attn.wo"),
        format!("blocks.{i}.ffn_norm"),
        format!("blocks.{i}.ffn.w_gate"),
        format!("blocks.{i}.ffn.w_up"),
        format!("blocks.{i}.ffn.w_down"),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub frozen: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            name: name.into(),
            shape,
            data: vec![T::ZERO; n],
            frozen: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_norm(&self) -> bool {
        self.shape.len() == 1
    }
}

/// Named tensors with one freeze flag each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<T = f32> {
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, t: Tensor<T>) -> Result<()> {
        if self.index.contains_key(&t.name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor {}", t.name)));
        }
        self.index.insert(t.name.clone(), self.tensors.len());
        self.tensors.push(t);
        Ok(())
    }

    /// Removes tensors matching `pred`, preserving the order of the rest.
    pub fn remove_where(&mut self, pred: impl Fn(&Tensor<T>) -> bool) -> Vec<Tensor<T>> {
        let (gone, kept): (Vec<_>, Vec<_>) = std::mem::take(&mut self.tensors).into_iter().partition(pred);
        self.tensors = kept;
        self.reindex();
        gone
    }

    /// Inserts `items` before the tensor called `before` (or at the end).
    pub fn insert_before(&mut self, before: &str, items: Vec<Tensor<T>>) -> Result<()> {
        for t in &items {
            if self.index.contains_key(&t.name) {
                return Err(Error::InvalidArgument(format!("duplicate tensor {}", t.name)));
            }
        }
        let at = self.index.get(before).copied().unwrap_or(self.tensors.len());
        self.tensors.splice(at..at, items);
        self.reindex();
        Ok(())
    }

    fn reindex(&mut self) {
        self.index = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.tensors.iter().filter(|t| !t.frozen).map(Tensor::numel).sum()
    }

    pub fn freeze_map(&self) -> BTreeMap<String, bool> {
        self.tensors.iter().map(|t| (t.name.clone(), t.frozen)).collect()
    }

    /// Applies a freeze map that must name every tensor exactly.
    pub fn apply_freeze(&mut self, map: &BTreeMap<String, bool>) -> Result<()> {
        if map.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "freeze map covers {} tensors, model has {}",
                map.len(),
                self.tensors.len()
            )));
        }
        for t in &mut self.tensors {
            t.frozen = *map
                .get(&t.name)
                .ok_or_else(|| Error::UnknownTensor(t.name.clone()))?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                    frozen: t.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraMeta {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraMeta {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Configuration plus parameters; the unit that gets trained, adapted and saved.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParameterStore<T>,
    pub lora: Option<LoraMeta>,
    /// Content hash of the tokenizer the model was trained with.
    pub tokenizer_id: Option<String>,
}

pub type ModelCheckpoint = Model<f32>;

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            lora: self.lora,
            tokenizer_id: self.tokenizer_id.clone(),
        }
    }
}

fn truncated_normal<R: rand::Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 3.0 {
            return z * std;
        }
    }
}

/// Seeded truncated-normal tensor; each tensor draws from its own stream keyed by name.
pub(crate) fn random_tensor<T: Scalar>(name: &str, shape: Vec<usize>, std: f64, seed: u64) -> Tensor<T> {
    let mut rng = rng::stream(seed, name);
    let n: usize = shape.iter().product();
    Tensor {
        name: name.to_owned(),
        shape,
        data: (0..n).map(|_| T::from_f64(truncated_normal(&mut rng, std))).collect(),
        frozen: false,
    }
}

fn ones<T: Scalar>(name: &str, dim: usize) -> Tensor<T> {
    Tensor {
        name: name.to_owned(),
        shape: vec![dim],
        data: vec![T::ONE; dim],
        frozen: false,
    }
}

/// Tensors of transformer block `i`. With `zero_residual` the attention and FFN
/// output projections start at exactly zero.
pub(crate) fn block_tensors<T: Scalar>(
    config: &ModelConfig,
    i: usize,
    seed: u64,
    zero_residual: bool,
) -> Vec<Tensor<T>> {
    let d = config.dim;
    let f = config.ffn_hidden;
    let residual_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
    let [an, wq, wk, wv, wo, fnorm, wg, wu, wd] = block_tensor_names(i);
    let out = |name: &str, shape: Vec<usize>| {
        if zero_residual {
            Tensor::zeros(name, shape)
        } else {
            random_tensor(name, shape, residual_std, seed)
        }
    };
    vec![
        ones(&an, d),
        random_tensor(&wq, vec![d, d], INIT_STD, seed),
        random_tensor(&wk, vec![d, d], INIT_STD, seed),
        random_tensor(&wv, vec![d, d], INIT_STD, seed),
        out(&wo, vec![d, d]),
        ones(&fnorm, d),
        random_tensor(&wg, vec![f, d], INIT_STD, seed),
        random_tensor(&wu, vec![f, d], INIT_STD, seed),
        out(&wd, vec![d, f]),
    ]
}

/// Fresh model with seeded weights, unit norms and no frozen tensors.
pub fn init<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut params = ParameterStore::new();
    params.push(random_tensor(
        EMBEDDING,
        vec![config.vocab_size, config.dim],
        INIT_STD,
        seed,
    ))?;
    for i in 0..config.n_layers {
        for t in block_tensors(config, i, seed, false) {
            params.push(t)?;
        }
    }
    params.push(ones(FINAL_NORM, config.dim))?;
    if !config.tied_embeddings {
        params.push(random_tensor(
            OUTPUT,
            vec![config.vocab_size, config.dim],
            INIT_STD,
            seed,
        ))?;
    }
    Ok(Model {
        config: config.clone(),
        params,
        lora: None,
        tokenizer_id: None,
    })
}

/// Closed-form parameter count.
pub fn param_count(config: &ModelConfig) -> usize {
    let (v, d, f) = (config.vocab_size, config.dim, config.ffn_hidden);
    let per_block = 4 * d * d + 3 * d * f + 2 * d;
    let head = if config.tied_embeddings { 0 } else { v * d };
    v * d + config.n_layers * per_block + d + head
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(tied: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            dim: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 16,
            context_len: 16,
            tied_embeddings: tied,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn param_count_examples() {
        // embedding 128 + block (4*64 + 3*128 + 16 = 656) + final norm 8
        assert_eq!(param_count(&tiny(true)), 128 + 656 + 8);
        assert_eq!(param_count(&tiny(true)), 792);
        assert_eq!(param_count(&tiny(false)), 920);
    }

    #[test]
    fn paper_analog_preset_in_bracket() {
        let n = param_count(&ModelConfig::paper_analog());
        assert!((19_000_000..=23_000_000).contains(&n), "{n}");
    }

    #[test]
    fn init_is_deterministic_with_unit_norms() {
        let c = ModelConfig::desk(512);
        let a: Model = init(&c, 7).unwrap();
        let b: Model = init(&c, 7).unwrap();
        assert_eq!(a, b);
        for t in a.params.tensors() {
            assert!(!t.frozen);
            if t.is_norm() {
                assert!(t.data.iter().all(|&x| x == 1.0), "{}", t.name);
            }
        }
        assert_eq!(a.params.total_elements(), param_count(&c));
        let c2: Model = init(&c, 8).unwrap();
        assert_ne!(a.params.get(EMBEDDING), c2.params.get(EMBEDDING));
    }

    #[test]
    fn init_stddev_close_to_target() {
        let c = ModelConfig {
            vocab_size: 512,
            dim: 512,
            n_heads: 8,
            ffn_hidden: 64,
            n_layers: 1,
            ..ModelConfig::tiny()
        };
        let m: Model = init(&c, 1).unwrap();
        let w = &m.params.get(EMBEDDING).unwrap().data;
        let n = w.len() as f64;
        let mean = w.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = w.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.02).abs() / 0.02 < 0.05, "{}", var.sqrt());
        assert!(w.iter().all(|x| x.abs() <= 0.06 + 1e-7));
        let wo = &m.params.get("blocks.0.attn.wo").unwrap().data;
        let max = wo.iter().fold(0f32, |a, &b| a.max(b.abs()));
        assert!(max <= (0.06 / 2f64.sqrt()) as f32 + 1e-7);
    }

    #[test]
    fn invalid_config_rejected() {
        let c = ModelConfig {
            n_heads: 3,
            ..tiny(true)
        };
        assert!(init::<f32>(&c, 0).is_err());
    }

    #[test]
    fn freeze_map_must_cover_every_tensor() {
        let mut m: Model = init(&tiny(true), 0).unwrap();
        let mut map = m.params.freeze_map();
        map.remove(EMBEDDING);
        assert!(m.params.apply_freeze(&map).is_err());
        let all: BTreeMap<_, _> = m.params.freeze_map().into_keys().map(|k| (k, true)).collect();
        m.params.apply_freeze(&all).unwrap();
        assert_eq!(m.params.trainable_elements(), 0);
    }
}
