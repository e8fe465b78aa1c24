//! Reverse-mode gradients through the forward graph of `model::forward`.
//!
//! Only tensors that need a gradient get an accumulator: trainable tensors and
//! adapter targets (whose effective-weight gradient feeds the adapter factors).
//! Backpropagation stops at the lowest block that still has such a tensor.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::forward::{forward_seq, silu_grad, ForwardCache, Weights};
use crate::model::Model;
use crate::tensor::{gemm_into, matmul, silu, MatRef, Scalar};
use crate::training::Batch;

/// Per-tensor gradients, indexed like the model's parameter store. Frozen
/// tensors have no entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub(crate) grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, idx: usize) -> Option<&[T]> {
        self.grads.get(idx).and_then(|g| g.as_deref())
    }

    pub fn by_name<'a>(&'a self, model: &Model<T>, name: &str) -> Option<&'a [T]> {
        model.params.index_of(name).and_then(|i| self.get(i))
    }

    /// Number of tensors with a gradient entry.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self, model: &Model<T>) -> Vec<String> {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| model.params.tensors()[i].name.clone())
            .collect()
    }
}

pub(crate) struct GradPlan {
    /// Tensor needs a weight-gradient accumulator.
    pub need: Vec<bool>,
    /// Some tensor in a block strictly below `i`, or the embedding, needs a gradient.
    needed_below: Vec<bool>,
    needed_at_or_below: Vec<bool>,
}

impl GradPlan {
    pub fn new<T: Scalar>(w: &Weights<'_, T>) -> Self {
        let ts = w.model.params.tensors();
        let mut need: Vec<bool> = ts.iter().map(|t| !t.frozen).collect();
        for ad in &w.layout.adapters {
            need[ad.a] = false;
            need[ad.b] = false;
        }
        for ad in &w.layout.adapters {
            if !ts[ad.a].frozen || !ts[ad.b].frozen {
                need[ad.target] = true;
            }
        }
        let mut below = need[w.layout.embed];
        let mut needed_below = Vec::with_capacity(w.layout.blocks.len());
        let mut needed_at_or_below = Vec::with_capacity(w.layout.blocks.len());
        for b in &w.layout.blocks {
            needed_below.push(below);
            below |= b.all().iter().any(|&i| need[i]);
            needed_at_or_below.push(below);
        }
        GradPlan {
            need,
            needed_below,
            needed_at_or_below,
        }
    }

    pub fn any(&self) -> bool {
        self.need.iter().any(|&n| n)
    }

    pub fn accumulators<T: Scalar>(&self, w: &Weights<'_, T>) -> Vec<Option<Vec<T>>> {
        w.model
            .params
            .tensors()
            .iter()
            .zip(&self.need)
            .map(|(t, &n)| n.then(|| vec![T::ZERO; t.numel()]))
            .collect()
    }
}

fn add_into<T: Scalar>(acc: &mut [Option<Vec<T>>], other: &[Option<Vec<T>>]) {
    for (a, b) in acc.iter_mut().zip(other) {
        if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// RMSNorm backward for rows of `x`; accumulates the gain gradient into `dgain`.
fn rms_norm_backward<T: Scalar>(x: &[T], inv: &[T], gain: &[T], dy: &[T], dgain: Option<&mut Vec<T>>) -> Vec<T> {
    let d = gain.len();
    let n = T::from_f64(d as f64);
    let mut dx = vec![T::ZERO; x.len()];
    let mut dgain = dgain;
    for (((xr, dyr), dxr), &r) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(inv)
    {
        let mut dot = T::ZERO;
        for j in 0..d {
            dot += gain[j] * dyr[j] * xr[j];
        }
        let k = r * r * r * dot / n;
        for j in 0..d {
            dxr[j] = r * gain[j] * dyr[j] - k * xr[j];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..d {
                dg[j] += dyr[j] * xr[j] * r;
            }
        }
    }
    dx
}

/// `acc += dyᵀ · x` for a linear layer `y = x Wᵀ` with `W [d_out × d_in]`.
fn weight_grad<T: Scalar>(acc: &mut [T], dy: &[T], x: &[T], len: usize, d_out: usize, d_in: usize) {
    matmul(MatRef::new(dy, len, d_out).t(), MatRef::new(x, len, d_in), acc, true);
}

/// Backpropagates `dlogits [rows × vocab]` through one cached sequence.
fn backward_seq<T: Scalar>(
    w: &Weights<'_, T>,
    plan: &GradPlan,
    cache: &ForwardCache<T>,
    rows: &[usize],
    dlogits: &[T],
    acc: &mut [Option<Vec<T>>],
) {
    let c = &w.model.config;
    let (len, d, f, v, heads) = (cache.tokens.len(), c.dim, c.ffn_hidden, c.vocab_size, c.n_heads);
    let hd = d / heads;
    let r = rows.len();
    let head_idx = w.layout.output.unwrap_or(w.layout.embed);

    if let Some(g) = acc[head_idx].as_mut() {
        weight_grad(g, dlogits, &cache.h_rows, r, v, d);
    }
    if !plan.needed_at_or_below.last().copied().unwrap_or(plan.need[w.layout.embed]) && !plan.need[w.layout.norm] {
        return;
    }
    let mut dh_rows = vec![T::ZERO; r * d];
    matmul(MatRef::new(dlogits, r, v), MatRef::new(w.head(), v, d), &mut dh_rows, false);
    let mut dh = vec![T::ZERO; len * d];
    for (i, &row) in rows.iter().enumerate() {
        for j in 0..d {
            dh[row * d + j] += dh_rows[i * d + j];
        }
    }
    let mut dx = rms_norm_backward(
        &cache.x_final,
        &cache.inv_final,
        w.w(w.layout.norm),
        &dh,
        acc[w.layout.norm].as_mut(),
    );

    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    for (bi, b) in w.layout.blocks.iter().enumerate().rev() {
        if !plan.needed_at_or_below[bi] {
            break;
        }
        let bc = &cache.blocks[bi];

        // feed-forward
        let mut d_act = vec![T::ZERO; len * f];
        matmul(MatRef::new(&dx, len, d), MatRef::new(w.w(b.w_down), d, f), &mut d_act, false);
        if let Some(g) = acc[b.w_down].as_mut() {
            weight_grad(g, &dx, &bc.act, len, d, f);
        }
        let mut d_gate = d_act.clone();
        let mut d_up = d_act;
        for i in 0..len * f {
            let (g, u) = (bc.gate[i], bc.up[i]);
            d_gate[i] = d_gate[i] * u * silu_grad(g);
            d_up[i] = d_up[i] * silu(g);
        }
        let mut dh2 = vec![T::ZERO; len * d];
        matmul(MatRef::new(&d_gate, len, f), MatRef::new(w.w(b.w_gate), f, d), &mut dh2, false);
        matmul(MatRef::new(&d_up, len, f), MatRef::new(w.w(b.w_up), f, d), &mut dh2, true);
        if let Some(g) = acc[b.w_gate].as_mut() {
            weight_grad(g, &d_gate, &bc.h2, len, f, d);
        }
        if let Some(g) = acc[b.w_up].as_mut() {
            weight_grad(g, &d_up, &bc.h2, len, f, d);
        }
        let dx_norm = rms_norm_backward(&bc.x_mid, &bc.inv2, w.w(b.ffn_norm), &dh2, acc[b.ffn_norm].as_mut());
        for (a, &g) in dx.iter_mut().zip(&dx_norm) {
            *a += g;
        }

        // attention
        let attn_weights = [b.attn_norm, b.wq, b.wk, b.wv, b.wo];
        if !plan.needed_below[bi] && !attn_weights.iter().any(|&i| plan.need[i]) {
            break;
        }
        let mut d_att = vec![T::ZERO; len * d];
        matmul(MatRef::new(&dx, len, d), MatRef::new(w.w(b.wo), d, d), &mut d_att, false);
        if let Some(g) = acc[b.wo].as_mut() {
            weight_grad(g, &dx, &bc.att, len, d, d);
        }
        let mut dq = vec![T::ZERO; len * d];
        let mut dk = vec![T::ZERO; len * d];
        let mut dv = vec![T::ZERO; len * d];
        let mut ds = vec![T::ZERO; len * len];
        for h in 0..heads {
            let p = &bc.probs[h * len * len..(h + 1) * len * len];
            let d_att_h = MatRef::strided(&d_att[h * hd..], len, hd, d, 1);
            // dP = dA_h · V_hᵀ
            gemm_into(
                T::ONE,
                d_att_h,
                MatRef::strided(&bc.v[h * hd..], len, hd, d, 1).t(),
                T::ZERO,
                &mut ds,
                len,
                1,
            );
            gemm_into(T::ONE, MatRef::new(p, len, len).t(), d_att_h, T::ZERO, &mut dv[h * hd..], d, 1);
            for i in 0..len {
                let prow = &p[i * len..(i + 1) * len];
                let srow = &mut ds[i * len..(i + 1) * len];
                let dot: T = (0..=i).map(|j| prow[j] * srow[j]).sum();
                for j in 0..=i {
                    srow[j] = prow[j] * (srow[j] - dot);
                }
                for s in &mut srow[i + 1..] {
                    *s = T::ZERO;
                }
            }
            gemm_into(
                scale,
                MatRef::new(&ds, len, len),
                MatRef::strided(&bc.k[h * hd..], len, hd, d, 1),
                T::ZERO,
                &mut dq[h * hd..],
                d,
                1,
            );
            gemm_into(
                scale,
                MatRef::new(&ds, len, len).t(),
                MatRef::strided(&bc.q[h * hd..], len, hd, d, 1),
                T::ZERO,
                &mut dk[h * hd..],
                d,
                1,
            );
        }
        w.rope.apply(&mut dq, d, true);
        w.rope.apply(&mut dk, d, true);
        for (idx, dy) in [(b.wq, &dq), (b.wk, &dk), (b.wv, &dv)] {
            if let Some(g) = acc[idx].as_mut() {
                weight_grad(g, dy, &bc.h1, len, d, d);
            }
        }
        if !plan.needed_below[bi] && !plan.need[b.attn_norm] {
            break;
        }
        let mut dh1 = vec![T::ZERO; len * d];
        matmul(MatRef::new(&dq, len, d), MatRef::new(w.w(b.wq), d, d), &mut dh1, false);
        matmul(MatRef::new(&dk, len, d), MatRef::new(w.w(b.wk), d, d), &mut dh1, true);
        matmul(MatRef::new(&dv, len, d), MatRef::new(w.w(b.wv), d, d), &mut dh1, true);
        let dx_norm = rms_norm_backward(&bc.x_in, &bc.inv1, w.w(b.attn_norm), &dh1, acc[b.attn_norm].as_mut());
        for (a, &g) in dx.iter_mut().zip(&dx_norm) {
            *a += g;
        }
    }

    if let Some(g) = acc[w.layout.embed].as_mut() {
        if plan.needed_below.first().copied().unwrap_or(true) {
            for (t, &tok) in cache.tokens.iter().enumerate() {
                let row = &mut g[tok as usize * d..(tok as usize + 1) * d];
                for (a, &b) in row.iter_mut().zip(&dx[t * d..(t + 1) * d]) {
                    *a += b;
                }
            }
        }
    }
}

/// Converts effective-weight accumulators into gradients of trainable tensors,
/// folding adapter targets into their low-rank factors.
fn finalize<T: Scalar>(w: &Weights<'_, T>, mut acc: Vec<Option<Vec<T>>>) -> Gradients<T> {
    let ts = w.model.params.tensors();
    for ad in &w.layout.adapters {
        let Some(dw) = acc[ad.target].clone() else { continue };
        let dw = &dw[..];
        let (d_out, d_in) = (ts[ad.target].shape[0], ts[ad.target].shape[1]);
        let rank = ts[ad.a].shape[0];
        let s = w.lora_scale;
        if !ts[ad.a].frozen {
            // dA = s · Bᵀ · dW
            let mut da = vec![T::ZERO; rank * d_in];
            gemm_into(
                s,
                MatRef::new(w.raw(ad.b), d_out, rank).t(),
                MatRef::new(dw, d_out, d_in),
                T::ZERO,
                &mut da,
                d_in,
                1,
            );
            acc[ad.a] = Some(da);
        }
        if !ts[ad.b].frozen {
            // dB = s · dW · Aᵀ
            let mut db = vec![T::ZERO; d_out * rank];
            gemm_into(
                s,
                MatRef::new(dw, d_out, d_in),
                MatRef::new(w.raw(ad.a), rank, d_in).t(),
                T::ZERO,
                &mut db,
                rank,
                1,
            );
            acc[ad.b] = Some(db);
        }
    }
    for (g, t) in acc.iter_mut().zip(ts) {
        if t.frozen {
            *g = None;
        }
    }
    Gradients { grads: acc }
}

/// One sequence of a batch: unpadded inputs, targets and loss mask.
#[derive(Clone, Copy)]
pub(crate) struct SeqWork<'b> {
    pub inputs: &'b [u32],
    pub targets: &'b [u32],
    pub mask: &'b [bool],
}

impl<'b> SeqWork<'b> {
    pub fn rows(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Cross-entropy of one logit row in f64; optionally writes `(softmax - onehot) * weight`.
fn row_ce<T: Scalar>(row: &[T], target: usize, grad: Option<(&mut [T], f64)>) -> f64 {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
    let lse = max + sum.ln();
    if let Some((g, weight)) = grad {
        for (j, (gj, v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v.to_f64() - lse).exp();
            let onehot = if j == target { 1.0 } else { 0.0 };
            *gj = T::from_f64((p - onehot) * weight);
        }
    }
    lse - row[target].to_f64()
}

/// Summed masked cross-entropy of one sequence; with `acc`, also accumulates
/// gradients of the loss scaled by `weight`.
pub(crate) fn sequence_pass<T: Scalar>(
    w: &Weights<'_, T>,
    plan: &GradPlan,
    seq: SeqWork<'_>,
    weight: f64,
    acc: Option<&mut [Option<Vec<T>>]>,
) -> Result<f64> {
    let rows = seq.rows();
    if rows.is_empty() {
        return Ok(0.0);
    }
    let v = w.model.config.vocab_size;
    let keep = acc.is_some();
    let (logits, cache) = forward_seq(w, seq.inputs, Some(&rows), keep)?;
    let mut dlogits = if keep { vec![T::ZERO; logits.len()] } else { Vec::new() };
    let mut total = 0.0;
    for (i, &r) in rows.iter().enumerate() {
        let target = seq.targets[r] as usize;
        if target >= v {
            return Err(Error::TokenOutOfRange {
                id: target as u32,
                vocab_size: v,
            });
        }
        let grad = keep.then(|| (&mut dlogits[i * v..(i + 1) * v], weight));
        total += row_ce(&logits[i * v..(i + 1) * v], target, grad);
    }
    if let (Some(acc), Some(cache)) = (acc, cache) {
        backward_seq(w, plan, &cache, &rows, &dlogits, acc);
    }
    Ok(total)
}

const CHUNK: usize = 4;

/// Mean masked loss over `seqs` and, when `with_grad`, its gradients.
///
/// In bit-exact mode sequences are grouped into fixed chunks whose partial
/// sums are combined in order, so the result is independent of thread count.
pub(crate) fn batch_pass<T: Scalar>(
    w: &Weights<'_, T>,
    plan: &GradPlan,
    seqs: &[SeqWork<'_>],
    with_grad: bool,
    bit_exact: bool,
) -> Result<(f64, Option<Gradients<T>>)> {
    let count: usize = seqs.iter().map(|s| s.mask.iter().filter(|&&m| m).count()).sum();
    if count == 0 {
        return Err(Error::Empty("batch has no mask-true positions".into()));
    }
    let weight = 1.0 / count as f64;
    let want = with_grad && plan.any();
    let run_chunk = |chunk: &[SeqWork<'_>]| -> Result<(f64, Option<Vec<Option<Vec<T>>>>)> {
        let mut acc = want.then(|| plan.accumulators(w));
        let mut loss = 0.0;
        for s in chunk {
            loss += sequence_pass(w, plan, *s, weight, acc.as_deref_mut())?;
        }
        Ok((loss, acc))
    };
    let (loss_sum, acc) = if bit_exact {
        let parts: Vec<_> = seqs.par_chunks(CHUNK).map(run_chunk).collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut total: Option<Vec<Option<Vec<T>>>> = None;
        for (l, a) in parts {
            loss += l;
            match (&mut total, a) {
                (None, a) => total = a,
                (Some(t), Some(a)) => add_into(t, &a),
                _ => {}
            }
        }
        (loss, total)
    } else {
        seqs.par_chunks(1)
            .map(run_chunk)
            .try_reduce(
                || (0.0, None),
                |(la, aa), (lb, ab)| {
                    let acc = match (aa, ab) {
                        (Some(mut a), Some(b)) => {
                            add_into(&mut a, &b);
                            Some(a)
                        }
                        (a, b) => a.or(b),
                    };
                    Ok((la + lb, acc))
                },
            )?
    };
    let grads = if with_grad {
        Some(match acc {
            Some(acc) => finalize(w, acc),
            None => Gradients {
                grads: vec![None; w.model.params.len()],
            },
        })
    } else {
        None
    };
    Ok((loss_sum * weight, grads))
}

pub(crate) fn batch_seqs(batch: &Batch) -> Vec<SeqWork<'_>> {
    (0..batch.rows)
        .filter(|&r| batch.lengths[r] > 0)
        .map(|r| SeqWork {
            inputs: batch.row_inputs(r),
            targets: batch.row_targets(r),
            mask: batch.row_mask(r),
        })
        .collect()
}

/// Mean masked cross-entropy and gradients for every non-frozen tensor.
pub fn backward<T: Scalar>(model: &Model<T>, batch: &Batch) -> Result<(f64, Gradients<T>)> {
    let w = Weights::new(model)?;
    let plan = GradPlan::new(&w);
    let (loss, grads) = batch_pass(&w, &plan, &batch_seqs(batch), true, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Mean over mask-true positions of `-log softmax(logits)[target]`, for padded
/// logits `[rows × context × vocab]`.
pub fn loss<T: Scalar>(logits: &[T], batch: &Batch, vocab: usize) -> Result<f64> {
    if logits.len() != batch.rows * batch.context * vocab {
        return Err(Error::InvalidArgument(format!(
            "logits hold {} values, batch needs {}",
            logits.len(),
            batch.rows * batch.context * vocab
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (pos, &m) in batch.loss_mask.iter().enumerate() {
        if m {
            let row = &logits[pos * vocab..(pos + 1) * vocab];
            total += row_ce(row, batch.targets[pos] as usize, None);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("no mask-true positions".into()));
    }
    Ok(total / count as f64)
}
