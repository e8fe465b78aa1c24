//! AdamW with decoupled weight decay and optional global-norm clipping.

use crate::error::{Error, Result};
use crate::model::{Model, Tensor, EMBEDDING, OUTPUT};
use crate::tensor::Scalar;
use crate::training::{Gradients, TrainConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per tensor, allocated lazily on first update.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Option<Vec<f64>>>,
    pub v: Vec<Option<Vec<f64>>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

fn decays(t: &Tensor<impl Scalar>) -> bool {
    t.shape.len() == 2 && t.name != EMBEDDING && t.name != OUTPUT
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Scalar>(grads: &Gradients<T>) -> f64 {
    grads
        .grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x.to_f64() * x.to_f64())
        .sum::<f64>()
        .sqrt()
}

/// Applies one AdamW update to every tensor that has a gradient. Frozen tensors
/// are never touched. Fails before modifying anything if a gradient is not finite.
pub fn optimizer_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    let ts = model.params.tensors();
    for (t, g) in ts.iter().zip(&grads.grads) {
        if let Some(g) = g {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(t.name.clone()));
            }
        }
    }
    let n = ts.len();
    state.m.resize(n, None);
    state.v.resize(n, None);
    let clip = match cfg.grad_clip {
        Some(max) => {
            let norm = grad_norm(grads);
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let step = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(step);
    let bc2 = 1.0 - ADAM_BETA2.powi(step);
    let lr = cfg.learning_rate;
    for (i, t) in model.params.tensors_mut().iter_mut().enumerate() {
        let Some(g) = grads.grads.get(i).and_then(|g| g.as_ref()) else { continue };
        if t.frozen {
            continue;
        }
        let wd = if decays(t) { cfg.weight_decay } else { 0.0 };
        let m = state.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
        for (((p, &g), m), v) in t.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g.to_f64() * clip;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            let mut x = p.to_f64();
            x -= lr * wd * x;
            x -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            *p = T::from_f64(x);
        }
    }
    Ok(())
}
