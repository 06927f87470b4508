//! Adaptive multi-expert fusion (AMEF).
//!
//! Three stages: regional quality-aware fusion (RQAF) builds a fused
//! visual stream by convex-combining, per spatial location, the most
//! similar optical and SAR candidate patches under question-derived
//! weights; three identical decoder experts score answers from the
//! optical, SAR and fused streams; a sigmoid gate blends the three
//! expert predictions into the final distribution.

use crate::nn::{
    layer_norm, mlp, multi_head_cross_attention, Activation, AttnIds, LnIds, MlpIds,
    LAYER_NORM_EPS,
};
use crate::params::{init_matrix, init_ones, init_zeros, BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::{topk_indices, Result, Tape, TensorError, TensorId};

/// RQAF parameters bound to a tape.
#[derive(Clone, Copy)]
pub struct RqafIds {
    pub proj_q: TensorId,
    pub proj_o: TensorId,
    pub proj_s: TensorId,
    pub ln: LnIds,
    pub mlp: MlpIds,
    pub heads: usize,
    /// Candidate patches per modality per location.
    pub r: usize,
}

/// One decoder layer: self-attention over question tokens, cross-attention
/// to the visual stream, feed-forward; pre-norm residuals throughout.
#[derive(Clone, Copy)]
pub struct DecoderLayerIds {
    pub self_attn: AttnIds,
    pub self_ln: LnIds,
    pub cross_attn: AttnIds,
    pub cross_ln: LnIds,
    pub ffn_ln: LnIds,
    pub ffn: MlpIds,
}

/// A modality expert: two decoder layers plus a ReLU classifier head.
#[derive(Clone, Copy)]
pub struct ExpertIds {
    pub layers: [DecoderLayerIds; 2],
    pub head: MlpIds,
}

/// Gate of the adaptive fusion network: one `3C -> 3` affine map.
#[derive(Clone, Copy)]
pub struct GateIds {
    pub w: TensorId,
    pub b: TensorId,
}

/// Candidate indices for one location: the `R` patches of one modality
/// most similar to the patch at `location` (scaled dot product on the
/// projected features). The location itself is always included; the
/// remaining `R-1` follow by descending similarity, ties to the lower
/// index. Selection is gradient-opaque.
pub fn rqaf_candidates(
    tape: &Tape,
    f_proj: TensorId,
    location: usize,
    r: usize,
) -> Result<Vec<Vec<usize>>> {
    let shape = tape.shape(f_proj).to_vec();
    let (b, m, d) = (shape[0], shape[1], shape[2]);
    if location >= m {
        return Err(TensorError::IndexOutOfRange {
            index: location,
            extent: m,
        });
    }
    if r == 0 || r > m {
        return Err(TensorError::KOutOfRange { k: r, max: m });
    }
    let vals = tape.values(f_proj);
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let base = bi * m * d;
        let anchor = &vals[base + location * d..base + (location + 1) * d];
        let sims: Vec<f64> = (0..m)
            .map(|j| {
                let row = &vals[base + j * d..base + (j + 1) * d];
                anchor.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
            })
            .collect();
        let mut picked = vec![location];
        if r > 1 {
            let ranked = topk_indices(&sims, m)?;
            picked.extend(ranked.into_iter().filter(|&j| j != location).take(r - 1));
        }
        out.push(picked);
    }
    Ok(out)
}

/// Fusion weights over a candidate stack: softmax over the `2R`
/// candidates of the mean over question tokens of
/// `F_q set_iᵀ / sqrt(D_h)`. Shapes `[B,N,Dh] x [B,2R,Dh] -> [B,2R]`.
pub fn rqaf_weights(tape: &mut Tape, f_q_proj: TensorId, set_i: TensorId) -> Result<TensorId> {
    let dh = *tape.shape(f_q_proj).last().unwrap();
    let st = tape.transpose_last2(set_i)?;
    let s = tape.matmul(f_q_proj, st)?;
    let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
    let s = tape.mean_axis(s, 1)?;
    tape.softmax(s, 1)
}

/// Regional quality-aware fusion: `[B,N,D] question, two [B,M,D] visual
/// streams -> [B,M,D]` fused stream. Per location and head slice, the
/// output is the weight-averaged candidate stack; a residual norm + MLP
/// follows the stacked locations.
pub fn rqaf_fuse(
    tape: &mut Tape,
    f_q: TensorId,
    f_oe: TensorId,
    f_se: TensorId,
    p: &RqafIds,
) -> Result<TensorId> {
    let shape = tape.shape(f_oe).to_vec();
    let (b, m, d) = (shape[0], shape[1], shape[2]);
    if p.heads == 0 || d % p.heads != 0 {
        return Err(TensorError::Invalid(format!(
            "feature dim {d} not divisible by {} heads",
            p.heads
        )));
    }
    if p.r == 0 || p.r > m {
        return Err(TensorError::KOutOfRange { k: p.r, max: m });
    }
    let dh = d / p.heads;
    let q_proj = tape.matmul(f_q, p.proj_q)?;
    let o_proj = tape.matmul(f_oe, p.proj_o)?;
    let s_proj = tape.matmul(f_se, p.proj_s)?;
    let mut locations = Vec::with_capacity(m);
    for i in 0..m {
        let idx_o = rqaf_candidates(tape, o_proj, i, p.r)?;
        let idx_s = rqaf_candidates(tape, s_proj, i, p.r)?;
        let cand_o = tape.gather_rows(o_proj, &idx_o)?;
        let cand_s = tape.gather_rows(s_proj, &idx_s)?;
        let set = tape.concat(&[cand_o, cand_s], 1)?;
        let mut heads = Vec::with_capacity(p.heads);
        for h in 0..p.heads {
            let qh = tape.slice_last(q_proj, h * dh, dh)?;
            let sh = tape.slice_last(set, h * dh, dh)?;
            let w = rqaf_weights(tape, qh, sh)?;
            let w = tape.reshape(w, vec![b, 1, 2 * p.r])?;
            heads.push(tape.matmul(w, sh)?);
        }
        locations.push(tape.concat(&heads, 2)?);
    }
    let fused = tape.concat(&locations, 1)?;
    let fn_ = layer_norm(tape, fused, p.ln)?;
    let ff = mlp(tape, fn_, &p.mlp)?;
    tape.add(fused, ff)
}

/// One pre-norm decoder layer.
pub fn decoder_layer(
    tape: &mut Tape,
    x: TensorId,
    f_vis: TensorId,
    p: &DecoderLayerIds,
) -> Result<TensorId> {
    let sn = layer_norm(tape, x, p.self_ln)?;
    let sa = multi_head_cross_attention(tape, sn, sn, &p.self_attn)?;
    let x = tape.add(x, sa)?;
    let cn = layer_norm(tape, x, p.cross_ln)?;
    let ca = multi_head_cross_attention(tape, cn, f_vis, &p.cross_attn)?;
    let x = tape.add(x, ca)?;
    let fnorm = layer_norm(tape, x, p.ffn_ln)?;
    let ff = mlp(tape, fnorm, &p.ffn)?;
    tape.add(x, ff)
}

/// Expert prediction: two decoder layers over the question conditioned on
/// one visual stream, global average pooling over tokens, then the
/// FC-ReLU-FC classifier. Returns raw class scores `[B,1,C]`.
pub fn expert_predict(
    tape: &mut Tape,
    f_q: TensorId,
    f_vis: TensorId,
    p: &ExpertIds,
) -> Result<TensorId> {
    let mut x = f_q;
    for layer in &p.layers {
        x = decoder_layer(tape, x, f_vis, layer)?;
    }
    let pooled = tape.mean_axis(x, 1)?;
    let logits = mlp(tape, pooled, &p.head)?;
    let shape = tape.shape(logits).to_vec();
    tape.reshape(logits, vec![shape[0], 1, shape[1]])
}

/// Sigmoid-gated fusion of the three expert score vectors.
///
/// `W_A = sigmoid(FC(concat over classes))`, then the final distribution
/// `Pre = softmax(W_A · stack over experts)`. Returns `(Pre, W_A)`.
pub fn adaptive_fuse(
    tape: &mut Tape,
    p_oe: TensorId,
    p_se: TensorId,
    p_os: TensorId,
    gate: &GateIds,
) -> Result<(TensorId, TensorId)> {
    let cat = tape.concat(&[p_oe, p_se, p_os], 2)?;
    let logits = tape.matmul(cat, gate.w)?;
    let logits = tape.add(logits, gate.b)?;
    let w_a = tape.sigmoid(logits)?;
    let stack = tape.concat(&[p_oe, p_se, p_os], 1)?;
    let mixed = tape.matmul(w_a, stack)?;
    let pre = tape.softmax(mixed, 2)?;
    Ok((pre, w_a))
}

// ── Parameter construction ───────────────────────────────────────────

pub fn init_rqaf_params(store: &mut ParamStore, rng: &mut Rng, d: usize, hidden: usize) {
    init_matrix(store, rng, "rqaf.proj_q", d, d);
    init_matrix(store, rng, "rqaf.proj_o", d, d);
    init_matrix(store, rng, "rqaf.proj_s", d, d);
    init_ones(store, "rqaf.ln.gamma", d);
    init_zeros(store, "rqaf.ln.beta", d);
    init_matrix(store, rng, "rqaf.mlp.w1", d, hidden);
    init_zeros(store, "rqaf.mlp.b1", hidden);
    init_matrix(store, rng, "rqaf.mlp.w2", hidden, d);
    init_zeros(store, "rqaf.mlp.b2", d);
}

pub fn bind_rqaf(bound: &BoundParams, heads: usize, r: usize) -> RqafIds {
    RqafIds {
        proj_q: bound.id("rqaf.proj_q"),
        proj_o: bound.id("rqaf.proj_o"),
        proj_s: bound.id("rqaf.proj_s"),
        ln: LnIds {
            gamma: bound.id("rqaf.ln.gamma"),
            beta: bound.id("rqaf.ln.beta"),
            eps: LAYER_NORM_EPS,
        },
        mlp: MlpIds {
            w1: bound.id("rqaf.mlp.w1"),
            b1: bound.id("rqaf.mlp.b1"),
            w2: bound.id("rqaf.mlp.w2"),
            b2: bound.id("rqaf.mlp.b2"),
            act: Activation::Gelu,
        },
        heads,
        r,
    }
}

/// Insert one expert's parameters under `expert.<name>.`. All experts
/// share this architecture; parameters are independent.
pub fn init_expert_params(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    d: usize,
    hidden: usize,
    head_hidden: usize,
    classes: usize,
) {
    for l in 0..2 {
        let pfx = format!("expert.{name}.layer{l}");
        for sub in ["self", "cross"] {
            for w in ["wq", "wk", "wv", "wo"] {
                init_matrix(store, rng, &format!("{pfx}.{sub}.{w}"), d, d);
            }
            init_ones(store, &format!("{pfx}.{sub}_ln.gamma"), d);
            init_zeros(store, &format!("{pfx}.{sub}_ln.beta"), d);
        }
        init_ones(store, &format!("{pfx}.ffn_ln.gamma"), d);
        init_zeros(store, &format!("{pfx}.ffn_ln.beta"), d);
        init_matrix(store, rng, &format!("{pfx}.ffn.w1"), d, hidden);
        init_zeros(store, &format!("{pfx}.ffn.b1"), hidden);
        init_matrix(store, rng, &format!("{pfx}.ffn.w2"), hidden, d);
        init_zeros(store, &format!("{pfx}.ffn.b2"), d);
    }
    init_matrix(store, rng, &format!("expert.{name}.head.w1"), d, head_hidden);
    init_zeros(store, &format!("expert.{name}.head.b1"), head_hidden);
    init_matrix(store, rng, &format!("expert.{name}.head.w2"), head_hidden, classes);
    init_zeros(store, &format!("expert.{name}.head.b2"), classes);
}

pub fn bind_expert(bound: &BoundParams, name: &str, heads: usize) -> ExpertIds {
    let layer = |l: usize| {
        let pfx = format!("expert.{name}.layer{l}");
        let attn = |sub: &str| AttnIds {
            wq: bound.id(&format!("{pfx}.{sub}.wq")),
            wk: bound.id(&format!("{pfx}.{sub}.wk")),
            wv: bound.id(&format!("{pfx}.{sub}.wv")),
            wo: bound.id(&format!("{pfx}.{sub}.wo")),
            heads,
        };
        let ln = |sub: &str| LnIds {
            gamma: bound.id(&format!("{pfx}.{sub}.gamma")),
            beta: bound.id(&format!("{pfx}.{sub}.beta")),
            eps: LAYER_NORM_EPS,
        };
        DecoderLayerIds {
            self_attn: attn("self"),
            self_ln: ln("self_ln"),
            cross_attn: attn("cross"),
            cross_ln: ln("cross_ln"),
            ffn_ln: ln("ffn_ln"),
            ffn: MlpIds {
                w1: bound.id(&format!("{pfx}.ffn.w1")),
                b1: bound.id(&format!("{pfx}.ffn.b1")),
                w2: bound.id(&format!("{pfx}.ffn.w2")),
                b2: bound.id(&format!("{pfx}.ffn.b2")),
                act: Activation::Gelu,
            },
        }
    };
    ExpertIds {
        layers: [layer(0), layer(1)],
        head: MlpIds {
            w1: bound.id(&format!("expert.{name}.head.w1")),
            b1: bound.id(&format!("expert.{name}.head.b1")),
            w2: bound.id(&format!("expert.{name}.head.w2")),
            b2: bound.id(&format!("expert.{name}.head.b2")),
            act: Activation::Relu,
        },
    }
}

pub fn init_gate_params(store: &mut ParamStore, rng: &mut Rng, classes: usize) {
    init_matrix(store, rng, "gate.w", 3 * classes, 3);
    init_zeros(store, "gate.b", 3);
}

pub fn bind_gate(bound: &BoundParams) -> GateIds {
    GateIds {
        w: bound.id("gate.w"),
        b: bound.id("gate.b"),
    }
}
