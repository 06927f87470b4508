//! Neural building blocks: layer normalization, two-layer MLPs, generic
//! multi-head cross-attention, classification losses, and Adam.
//!
//! All blocks are pure functions over tape tensors; parameters arrive as
//! tape ids (see [`crate::params::ParamStore::bind`]).

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::{Result, Tape, TensorError, TensorId};

/// Layer-norm variance floor. The value is not given by the training
/// setup; this is the conventional default, recorded once here.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Adam denominator floor, same convention.
pub const ADAM_EPS: f64 = 1e-8;
/// Adam first-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
/// Attention head count used at full scale.
pub const DEFAULT_HEADS: usize = 8;

/// Layer-norm parameters bound to a tape.
#[derive(Clone, Copy)]
pub struct LnIds {
    pub gamma: TensorId,
    pub beta: TensorId,
    pub eps: f64,
}

/// MLP activation placed between the two fully connected layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Exact GELU, for feature MLPs.
    Gelu,
    /// ReLU, for classifier heads.
    Relu,
}

/// Two-layer MLP parameters bound to a tape.
#[derive(Clone, Copy)]
pub struct MlpIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub act: Activation,
}

/// Attention projection parameters bound to a tape.
#[derive(Clone, Copy)]
pub struct AttnIds {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub heads: usize,
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta` over the last axis.
pub fn layer_norm(tape: &mut Tape, x: TensorId, p: LnIds) -> Result<TensorId> {
    tape.layer_norm(x, p.gamma, p.beta, p.eps)
}

/// `W2 · act(W1 · x + b1) + b2`.
pub fn mlp(tape: &mut Tape, x: TensorId, p: &MlpIds) -> Result<TensorId> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add(h, p.b1)?;
    let a = match p.act {
        Activation::Gelu => tape.gelu(h)?,
        Activation::Relu => tape.relu(h)?,
    };
    let y = tape.matmul(a, p.w2)?;
    tape.add(y, p.b2)
}

/// Multi-head scaled dot-product cross-attention.
///
/// `Q = q_in Wq`, `K = kv_in Wk`, `V = kv_in Wv`, split into `heads`
/// slices of width `D/heads`; per head `softmax(Q Kᵀ / sqrt(d_h)) V`;
/// head outputs concatenated and projected through `Wo`.
pub fn multi_head_cross_attention(
    tape: &mut Tape,
    q_in: TensorId,
    kv_in: TensorId,
    p: &AttnIds,
) -> Result<TensorId> {
    let (out, _) = mha_with_weights(tape, q_in, kv_in, p)?;
    Ok(out)
}

/// Same as [`multi_head_cross_attention`] but also returns the per-head
/// attention weight tensors (each `[B, Nq, Nk]`) for inspection.
pub fn mha_with_weights(
    tape: &mut Tape,
    q_in: TensorId,
    kv_in: TensorId,
    p: &AttnIds,
) -> Result<(TensorId, Vec<TensorId>)> {
    let d = *tape.shape(q_in).last().unwrap();
    if p.heads == 0 || d % p.heads != 0 {
        return Err(TensorError::Invalid(format!(
            "feature dim {d} not divisible by {} heads",
            p.heads
        )));
    }
    let dh = d / p.heads;
    let q = tape.matmul(q_in, p.wq)?;
    let k = tape.matmul(kv_in, p.wk)?;
    let v = tape.matmul(kv_in, p.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice_last(q, h * dh, dh)?;
        let kh = tape.slice_last(k, h * dh, dh)?;
        let vh = tape.slice_last(v, h * dh, dh)?;
        let kt = tape.transpose_last2(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let axis = tape.shape(scores).len() - 1;
        let w = tape.softmax(scores, axis)?;
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let cat_axis = tape.shape(q_in).len() - 1;
    let cat = tape.concat(&outs, cat_axis)?;
    Ok((tape.matmul(cat, p.wo)?, weights))
}

// ── Adam ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// Per-parameter first and second moments plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let m = params
            .iter()
            .map(|(n, p)| (n.clone(), vec![0.0; p.values.len()]))
            .collect();
        let v = params
            .iter()
            .map(|(n, p)| (n.clone(), vec![0.0; p.values.len()]))
            .collect();
        AdamState { m, v, t: 0 }
    }

    /// Canonical Adam with bias correction; the step counter increments
    /// before the update. Parameters without a gradient entry decay their
    /// moments against a zero gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        h: &AdamHyper,
    ) {
        self.t += 1;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name).expect("adam state matches params");
            let v = self.v.get_mut(name).expect("adam state matches params");
            let zero = vec![];
            let g = grads.get(name).unwrap_or(&zero);
            for i in 0..p.values.len() {
                let gi = g.get(i).copied().unwrap_or(0.0);
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.values[i] -= h.lr * mhat / (vhat.sqrt() + h.eps);
            }
        }
    }
}
