//! Forward evaluation of one token sequence.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{block_tensor_names, Model, EMBEDDING, FINAL_NORM, OUTPUT};
use crate::tensor::{gemm_into, matmul, sigmoid, silu, MatRef, Scalar};

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIdx {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

impl BlockIdx {
    pub fn all(&self) -> [usize; 9] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ffn_norm,
            self.w_gate,
            self.w_up,
            self.w_down,
        ]
    }
}

/// A low-rank adapter on `target`: effective weight `W + scale * B * A`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Adapter {
    pub target: usize,
    pub a: usize,
    pub b: usize,
}

/// Tensor indices resolved once per model.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: usize,
    pub blocks: Vec<BlockIdx>,
    pub norm: usize,
    pub output: Option<usize>,
    pub adapters: Vec<Adapter>,
}

pub(crate) const LORA_A: &str = ".lora_a";
pub(crate) const LORA_B: &str = ".lora_b";

impl Layout {
    pub fn resolve<T: Scalar>(model: &Model<T>) -> Result<Self> {
        let c = &model.config;
        c.validate()?;
        let p = &model.params;
        let find = |name: &str, shape: &[usize]| -> Result<usize> {
            let i = p.index_of(name).ok_or_else(|| Error::UnknownTensor(name.to_owned()))?;
            let got = &p.tensors()[i].shape;
            if got != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {got:?}, config implies {shape:?}"
                )));
            }
            Ok(i)
        };
        let (v, d, f) = (c.vocab_size, c.dim, c.ffn_hidden);
        let embed = find(EMBEDDING, &[v, d])?;
        let blocks = (0..c.n_layers)
            .map(|i| {
                let [an, wq, wk, wv, wo, fnm, wg, wu, wd] = block_tensor_names(i);
                Ok(BlockIdx {
                    attn_norm: find(&an, &[d])?,
                    wq: find(&wq, &[d, d])?,
                    wk: find(&wk, &[d, d])?,
                    wv: find(&wv, &[d, d])?,
                    wo: find(&wo, &[d, d])?,
                    ffn_norm: find(&fnm, &[d])?,
                    w_gate: find(&wg, &[f, d])?,
                    w_up: find(&wu, &[f, d])?,
                    w_down: find(&wd, &[d, f])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = find(FINAL_NORM, &[d])?;
        let output = if c.tied_embeddings {
            None
        } else {
            Some(find(OUTPUT, &[v, d])?)
        };
        let mut adapters = Vec::new();
        for (ai, t) in p.tensors().iter().enumerate() {
            let Some(target) = t.name.strip_suffix(LORA_A) else {
                continue;
            };
            let ti = p.index_of(target).ok_or_else(|| Error::UnknownTensor(target.to_owned()))?;
            let bname = format!("{target}{LORA_B}");
            let bi = p.index_of(&bname).ok_or_else(|| Error::UnknownTensor(bname.clone()))?;
            let (tshape, ashape, bshape) = (&p.tensors()[ti].shape, &t.shape, &p.tensors()[bi].shape);
            let rank = model.lora.map(|l| l.rank).unwrap_or(0);
            if tshape.len() != 2
                || ashape[..] != [rank, tshape[1]]
                || bshape[..] != [tshape[0], rank]
            {
                return Err(Error::Checkpoint(format!(
                    "adapter on {target} has inconsistent shapes"
                )));
            }
            adapters.push(Adapter {
                target: ti,
                a: ai,
                b: bi,
            });
        }
        Ok(Layout {
            embed,
            blocks,
            norm,
            output,
            adapters,
        })
    }
}

/// Rotary tables `[position × head_dim/2]`.
pub(crate) struct Rope<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    half: usize,
}

impl<T: Scalar> Rope<T> {
    pub fn new(context_len: usize, head_dim: usize, theta: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(context_len * half);
        let mut sin = Vec::with_capacity(context_len * half);
        for p in 0..context_len {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(T::from_f64(angle.cos()));
                sin.push(T::from_f64(angle.sin()));
            }
        }
        Rope { cos, sin, half }
    }

    /// Rotates interleaved pairs `(2i, 2i+1)` of every head in `x [len × dim]`;
    /// `inverse` rotates by the negative angle.
    pub fn apply(&self, x: &mut [T], dim: usize, inverse: bool) {
        let hd = self.half * 2;
        for (p, row) in x.chunks_exact_mut(dim).enumerate() {
            let cos = &self.cos[p * self.half..(p + 1) * self.half];
            let sin = &self.sin[p * self.half..(p + 1) * self.half];
            for head in row.chunks_exact_mut(hd) {
                for i in 0..self.half {
                    let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                    let (a, b) = (head[2 * i], head[2 * i + 1]);
                    head[2 * i] = a * c - b * s;
                    head[2 * i + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Resolved weights for a forward/backward pass: adapters are folded into
/// effective matrices once, shared by every sequence of a batch.
pub(crate) struct Weights<'a, T> {
    pub model: &'a Model<T>,
    pub layout: Layout,
    effective: HashMap<usize, Vec<T>>,
    pub lora_scale: T,
    pub rope: Rope<T>,
}

impl<'a, T: Scalar> Weights<'a, T> {
    pub fn new(model: &'a Model<T>) -> Result<Self> {
        let layout = Layout::resolve(model)?;
        let scale = T::from_f64(model.lora.map(|l| l.scale()).unwrap_or(0.0));
        let ts = model.params.tensors();
        let mut effective = HashMap::new();
        for ad in &layout.adapters {
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
            effective.insert(ad.target, eff);
        }
        let c = &model.config;
        Ok(Weights {
            model,
            layout,
            effective,
            lora_scale: scale,
            rope: Rope::new(c.context_len, c.head_dim(), c.rope_theta),
        })
    }

    /// Effective value of tensor `idx`.
    pub fn w(&self, idx: usize) -> &[T] {
        match self.effective.get(&idx) {
            Some(v) => v,
            None => &self.model.params.tensors()[idx].data,
        }
    }

    pub fn raw(&self, idx: usize) -> &[T] {
        &self.model.params.tensors()[idx].data
    }

    /// Unembedding matrix `[vocab × dim]`.
    pub fn head(&self) -> &[T] {
        self.w(self.layout.output.unwrap_or(self.layout.embed))
    }
}

/// Per-row RMSNorm; returns the output and the inverse RMS of every row.
pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T], eps: f64) -> (Vec<T>, Vec<T>) {
    let d = gain.len();
    let mut out = vec![T::ZERO; x.len()];
    let mut inv = Vec::with_capacity(x.len() / d);
    let eps = T::from_f64(eps);
    let n = T::from_f64(d as f64);
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
        let r = T::ONE / (ms + eps).sqrt();
        for ((o, &v), &g) in o.iter_mut().zip(row).zip(gain) {
            *o = v * r * g;
        }
        inv.push(r);
    }
    (out, inv)
}

pub(crate) struct BlockCache<T> {
    pub x_in: Vec<T>,
    pub inv1: Vec<T>,
    pub h1: Vec<T>,
    /// Rotated queries and keys.
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Attention probabilities `[head × len × len]`, zero above the diagonal.
    pub probs: Vec<T>,
    pub att: Vec<T>,
    pub x_mid: Vec<T>,
    pub inv2: Vec<T>,
    pub h2: Vec<T>,
    pub gate: Vec<T>,
    pub up: Vec<T>,
    pub act: Vec<T>,
}

pub(crate) struct ForwardCache<T> {
    pub tokens: Vec<u32>,
    pub blocks: Vec<BlockCache<T>>,
    pub x_final: Vec<T>,
    pub inv_final: Vec<T>,
    /// Final-normed hidden states of the rows whose logits were computed.
    pub h_rows: Vec<T>,
}

pub(crate) fn check_tokens(vocab: usize, context_len: usize, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if tokens.len() > context_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            context_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: vocab,
        });
    }
    Ok(())
}

fn linear<T: Scalar>(x: &[T], rows: usize, d_in: usize, w: &[T], d_out: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * d_out];
    matmul(MatRef::new(x, rows, d_in), MatRef::new(w, d_out, d_in).t(), &mut out, false);
    out
}

/// Causal multi-head attention over rotated `q`, `k` and values `v`.
fn attention<T: Scalar>(q: &[T], k: &[T], v: &[T], len: usize, dim: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let hd = dim / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut probs = vec![T::ZERO; heads * len * len];
    let mut att = vec![T::ZERO; len * dim];
    for h in 0..heads {
        let p = &mut probs[h * len * len..(h + 1) * len * len];
        gemm_into(
            scale,
            MatRef::strided(&q[h * hd..], len, hd, dim, 1),
            MatRef::strided(&k[h * hd..], len, hd, dim, 1).t(),
            T::ZERO,
            p,
            len,
            1,
        );
        for (i, row) in p.chunks_exact_mut(len).enumerate() {
            let live = &mut row[..=i];
            let max = live.iter().copied().fold(live[0], |a, b| if b > a { b } else { a });
            let mut sum = T::ZERO;
            for x in live.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in live.iter_mut() {
                *x /= sum;
            }
            for x in &mut row[i + 1..] {
                *x = T::ZERO;
            }
        }
        gemm_into(
            T::ONE,
            MatRef::new(p, len, len),
            MatRef::strided(&v[h * hd..], len, hd, dim, 1),
            T::ZERO,
            &mut att[h * hd..],
            dim,
            1,
        );
    }
    (att, probs)
}

/// Runs the model over `tokens`, returning logits for `rows` (all positions when
/// `None`) as a row-major `[rows × vocab]` matrix, plus the activation cache
/// when `keep_cache` is set.
pub(crate) fn forward_seq<T: Scalar>(
    w: &Weights<'_, T>,
    tokens: &[u32],
    rows: Option<&[usize]>,
    keep_cache: bool,
) -> Result<(Vec<T>, Option<ForwardCache<T>>)> {
    let c = &w.model.config;
    check_tokens(c.vocab_size, c.context_len, tokens)?;
    let (len, d, f) = (tokens.len(), c.dim, c.ffn_hidden);
    let emb = w.w(w.layout.embed);
    let mut x: Vec<T> = Vec::with_capacity(len * d);
    for &t in tokens {
        x.extend_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
    }
    let mut caches = Vec::with_capacity(if keep_cache { c.n_layers } else { 0 });
    for b in &w.layout.blocks {
        let (h1, inv1) = rms_norm(&x, w.w(b.attn_norm), c.norm_eps);
        let mut q = linear(&h1, len, d, w.w(b.wq), d);
        let mut k = linear(&h1, len, d, w.w(b.wk), d);
        let v = linear(&h1, len, d, w.w(b.wv), d);
        w.rope.apply(&mut q, d, false);
        w.rope.apply(&mut k, d, false);
        let (att, probs) = attention(&q, &k, &v, len, d, c.n_heads);
        let mut x_mid = x.clone();
        matmul(
            MatRef::new(&att, len, d),
            MatRef::new(w.w(b.wo), d, d).t(),
            &mut x_mid,
            true,
        );
        let (h2, inv2) = rms_norm(&x_mid, w.w(b.ffn_norm), c.norm_eps);
        let gate = linear(&h2, len, d, w.w(b.w_gate), f);
        let up = linear(&h2, len, d, w.w(b.w_up), f);
        let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
        let mut x_out = x_mid.clone();
        matmul(
            MatRef::new(&act, len, f),
            MatRef::new(w.w(b.w_down), d, f).t(),
            &mut x_out,
            true,
        );
        if keep_cache {
            caches.push(BlockCache {
                x_in: std::mem::take(&mut x),
                inv1,
                h1,
                q,
                k,
                v,
                probs,
                att,
                x_mid,
                inv2,
                h2,
                gate,
                up,
                act,
            });
        }
        x = x_out;
    }
    let (h_final, inv_final) = rms_norm(&x, w.w(w.layout.norm), c.norm_eps);
    let h_rows: Cow<'_, [T]> = match rows {
        None => Cow::Borrowed(&h_final),
        Some(rows) => Cow::Owned(
            rows.iter()
                .flat_map(|&r| h_final[r * d..(r + 1) * d].iter().copied())
                .collect(),
        ),
    };
    let n_rows = h_rows.len() / d;
    let logits = linear(&h_rows, n_rows, d, w.head(), c.vocab_size);
    let cache = keep_cache.then(|| ForwardCache {
        tokens: tokens.to_vec(),
        blocks: caches,
        x_final: x,
        inv_final,
        h_rows: h_rows.into_owned(),
    });
    Ok((logits, cache))
}

/// Logits `[seq × vocab]` for every position of `tokens`.
pub fn forward<T: Scalar>(model: &Model<T>, tokens: &[u32]) -> Result<Vec<T>> {
    let w = Weights::new(model)?;
    Ok(forward_seq(&w, tokens, None, false)?.0)
}

/// Derivative of SiLU.
pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::ONE + x * (T::ONE - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, ModelConfig};
    use proptest::prelude::*;

    #[test]
    fn rms_norm_has_unit_rms() {
        let x: Vec<f64> = (0..64).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let g = vec![1.0; 16];
        let (y, _) = rms_norm(&x, &g, 1e-5);
        for row in y.chunks(16) {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-5, "{rms}");
        }
    }

    #[test]
    fn rope_inverse_restores_input() {
        let rope = Rope::<f64>::new(8, 4, 10_000.0);
        let x: Vec<f64> = (0..64).map(|i| i as f64 * 0.1).collect();
        let mut y = x.clone();
        rope.apply(&mut y, 8, false);
        assert_ne!(x, y);
        rope.apply(&mut y, 8, true);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shapes_and_errors() {
        let m: Model = init(&ModelConfig::tiny(), 0).unwrap();
        let logits = forward(&m, &[1, 2, 3]).unwrap();
        assert_eq!(logits.len(), 3 * 16);
        assert!(matches!(forward(&m, &[16]), Err(Error::TokenOutOfRange { .. })));
        assert!(matches!(
            forward(&m, &[0; 17]),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn causal_prefix_invariance(tokens in proptest::collection::vec(0u32..16, 2..16), replace in 0u32..16, at in 0usize..15) {
            let m: Model = init(&ModelConfig::tiny(), 3).unwrap();
            let at = at % (tokens.len() - 1) + 1;
            let mut other = tokens.clone();
            other[at] = replace;
            for v in other.iter_mut().skip(at + 1) {
                *v = (*v + 5) % 16;
            }
            let a = forward(&m, &tokens).unwrap();
            let b = forward(&m, &other).unwrap();
            prop_assert_eq!(&a[..at * 16], &b[..at * 16]);
        }

        #[test]
        fn rms_norm_unit_rms_random(x in proptest::collection::vec(-10.0f64..10.0, 8)) {
            prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 8.0);
            let (y, _) = rms_norm(&x, &[1.0; 8], 1e-5);
            let rms = (y.iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
            prop_assert!((rms - 1.0).abs() < 1e-5);
        }
    }
}
