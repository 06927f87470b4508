//! Text-guided coarse-to-fine attention refinement (CFAR).
//!
//! Two identical blocks, each per modality stream: pool patches into
//! regions, score regions against the question (key region routing),
//! gather the patches of the top-k regions, fuse them into the question
//! stream through multi-head cross-attention (MCA), then re-weight the
//! full patch map with question-conditioned similarity scores (IE).
//! Block two re-pools and re-routes on block one's enhanced features.

use crate::encoders::FeatureBundle;
use crate::nn::{
    layer_norm, mlp, multi_head_cross_attention, Activation, AttnIds, LnIds, MlpIds,
    LAYER_NORM_EPS,
};
use crate::params::{init_matrix, init_ones, init_zeros, BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::{topk_indices, Result, Tape, TensorError, TensorId};

/// Fixed number of stacked refinement blocks.
pub const CFAR_BLOCKS: usize = 2;

/// Maps each of `T` regions to its `P` member patch indices. The regions
/// partition the `M` patches.
#[derive(Debug, Clone)]
pub struct RegionCodebook {
    regions: Vec<Vec<usize>>,
    m: usize,
}

impl RegionCodebook {
    /// Deterministic grid codebook. When the patch grid and the region
    /// size are both square and compatible (`sqrt(M) % sqrt(P) == 0`),
    /// regions are contiguous `sqrt(P) x sqrt(P)` blocks in row-major
    /// block order; otherwise regions are contiguous runs of `P` patch
    /// indices.
    pub fn grid(m: usize, t: usize, p: usize) -> Result<Self> {
        if t == 0 || p == 0 || t * p != m {
            return Err(TensorError::Invalid(format!(
                "codebook needs T*P == M, got {t}*{p} != {m}"
            )));
        }
        let gm = (m as f64).sqrt().round() as usize;
        let gp = (p as f64).sqrt().round() as usize;
        let square = gm * gm == m && gp * gp == p && gm % gp == 0;
        let regions = if square {
            let per_side = gm / gp;
            (0..t)
                .map(|r| {
                    let (br, bc) = (r / per_side, r % per_side);
                    let mut members = Vec::with_capacity(p);
                    for dr in 0..gp {
                        for dc in 0..gp {
                            members.push((br * gp + dr) * gm + (bc * gp + dc));
                        }
                    }
                    members
                })
                .collect()
        } else {
            (0..t).map(|r| (r * p..(r + 1) * p).collect()).collect()
        };
        Ok(RegionCodebook { regions, m })
    }

    /// Codebook from explicit region lists; must partition `[0, m)`.
    pub fn from_regions(regions: Vec<Vec<usize>>, m: usize) -> Result<Self> {
        let mut seen = vec![false; m];
        let p = regions.first().map(|r| r.len()).unwrap_or(0);
        for r in &regions {
            if r.len() != p {
                return Err(TensorError::Invalid("ragged codebook regions".into()));
            }
            for &i in r {
                if i >= m || seen[i] {
                    return Err(TensorError::Invalid(format!(
                        "codebook does not partition patches: index {i}"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(TensorError::Invalid(
                "codebook leaves some patches unassigned".into(),
            ));
        }
        Ok(RegionCodebook { regions, m })
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn patches_per_region(&self) -> usize {
        self.regions[0].len()
    }

    pub fn num_patches(&self) -> usize {
        self.m
    }

    pub fn patches(&self, region: usize) -> &[usize] {
        &self.regions[region]
    }
}

/// Routing record for one modality in one block: raw region scores
/// (`B x T`, row-major) and the selected region ids per batch element.
#[derive(Debug, Clone)]
pub struct ModalityRouting {
    pub scores: Vec<f64>,
    pub num_regions: usize,
    pub selected: Vec<Vec<usize>>,
}

/// Routing record for one block.
#[derive(Debug, Clone)]
pub struct BlockRouting {
    pub opt: ModalityRouting,
    pub sar: ModalityRouting,
}

/// One record per block, in execution order.
pub type RoutingReport = Vec<BlockRouting>;

/// MCA sub-block: pre-norm residual cross-attention plus MLP.
#[derive(Clone, Copy)]
pub struct McaIds {
    pub attn: AttnIds,
    pub ln1: LnIds,
    pub ln2: LnIds,
    pub mlp: MlpIds,
}

/// IE sub-block: attention-shaped projections driving similarity
/// enhancement, plus the same norm/MLP scaffolding as MCA.
#[derive(Clone, Copy)]
pub struct IeIds {
    pub attn: AttnIds,
    pub ln1: LnIds,
    pub ln2: LnIds,
    pub mlp: MlpIds,
}

/// One modality stream of one block.
#[derive(Clone, Copy)]
pub struct CfarStreamIds {
    pub w_t: TensorId,
    pub w_i: TensorId,
    pub mca: McaIds,
    pub ie: IeIds,
}

#[derive(Clone, Copy)]
pub struct CfarBlockIds {
    pub opt: CfarStreamIds,
    pub sar: CfarStreamIds,
}

#[derive(Clone, Copy)]
pub struct CfarIds {
    pub blocks: [CfarBlockIds; CFAR_BLOCKS],
}

/// Region representation: mean of each region's member patch rows.
pub fn region_pool(tape: &mut Tape, f: TensorId, cb: &RegionCodebook) -> Result<TensorId> {
    let shape = tape.shape(f).to_vec();
    let (b, m, d) = (shape[0], shape[1], shape[2]);
    if m != cb.num_patches() {
        return Err(TensorError::Invalid(format!(
            "codebook covers {} patches, features have {m}",
            cb.num_patches()
        )));
    }
    let (t, p) = (cb.num_regions(), cb.patches_per_region());
    let order: Vec<usize> = (0..t).flat_map(|r| cb.patches(r).iter().copied()).collect();
    let idx: Vec<Vec<usize>> = (0..b).map(|_| order.clone()).collect();
    let gathered = tape.gather_rows(f, &idx)?;
    let grouped = tape.reshape(gathered, vec![b, t, p, d])?;
    tape.mean_axis(grouped, 2)
}

/// Question-region correlation scores:
/// `S = mean_over_tokens((W_T F_q)(W_I F_or)^T / sqrt(D))`, shape `[B, T]`.
pub fn krr_scores(
    tape: &mut Tape,
    f_q: TensorId,
    f_or: TensorId,
    w_t: TensorId,
    w_i: TensorId,
) -> Result<TensorId> {
    let d = *tape.shape(f_q).last().unwrap();
    let q = tape.matmul(f_q, w_t)?;
    let r = tape.matmul(f_or, w_i)?;
    let rt = tape.transpose_last2(r)?;
    let s = tape.matmul(q, rt)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt())?;
    tape.mean_axis(s, 1)
}

/// Gather the patches of the top-k regions per batch element, ordered by
/// descending score then ascending region id, member order preserved.
/// Selection is gradient-opaque; the gathered rows are exact copies.
pub fn select_key_regions(
    tape: &mut Tape,
    s: TensorId,
    k: usize,
    cb: &RegionCodebook,
    f: TensorId,
) -> Result<(TensorId, Vec<Vec<usize>>)> {
    let sshape = tape.shape(s).to_vec();
    let (b, t) = (sshape[0], sshape[1]);
    if k == 0 || k > t {
        return Err(TensorError::KOutOfRange { k, max: t });
    }
    let scores = tape.values(s).to_vec();
    let mut selected = Vec::with_capacity(b);
    let mut idx = Vec::with_capacity(b);
    for bi in 0..b {
        let row = &scores[bi * t..(bi + 1) * t];
        let regions = topk_indices(row, k)?;
        let mut patches = Vec::with_capacity(k * cb.patches_per_region());
        for &r in &regions {
            patches.extend_from_slice(cb.patches(r));
        }
        selected.push(regions);
        idx.push(patches);
    }
    let f_key = tape.gather_rows(f, &idx)?;
    Ok((f_key, selected))
}

/// Pre-norm residual cross-attention block:
/// `h = F_q + MHCA(LN(F_q), F_key)`, `out = h + MLP(LN(h))`.
pub fn mca(tape: &mut Tape, f_q: TensorId, f_key: TensorId, p: &McaIds) -> Result<TensorId> {
    let qn = layer_norm(tape, f_q, p.ln1)?;
    let att = multi_head_cross_attention(tape, qn, f_key, &p.attn)?;
    let h = tape.add(f_q, att)?;
    let hn = layer_norm(tape, h, p.ln2)?;
    let ff = mlp(tape, hn, &p.mlp)?;
    tape.add(h, ff)
}

/// Per-head similarity scores: softmax over the patches of the mean over
/// query tokens of `Q Kᵀ / sqrt(d_h)`. Shapes `[B,N,dh] x [B,M,dh] -> [B,M]`.
pub fn se_scores(tape: &mut Tape, qh: TensorId, kh: TensorId) -> Result<TensorId> {
    let dh = *tape.shape(qh).last().unwrap();
    let kt = tape.transpose_last2(kh)?;
    let s = tape.matmul(qh, kt)?;
    let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
    let s = tape.mean_axis(s, 1)?;
    tape.softmax(s, 1)
}

/// Similarity-enhancement block. Per head, every V patch row is scaled by
/// its scalar score; heads are concatenated and projected, then the same
/// residual + norm + MLP scaffolding as [`mca`] is applied around the
/// image stream.
pub fn similarity_enhance(
    tape: &mut Tape,
    f_q_fused: TensorId,
    f_img: TensorId,
    p: &IeIds,
) -> Result<TensorId> {
    let d = *tape.shape(f_img).last().unwrap();
    let heads = p.attn.heads;
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Invalid(format!(
            "feature dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let kv = layer_norm(tape, f_img, p.ln1)?;
    let q = tape.matmul(f_q_fused, p.attn.wq)?;
    let k = tape.matmul(kv, p.attn.wk)?;
    let v = tape.matmul(kv, p.attn.wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_last(q, h * dh, dh)?;
        let kh = tape.slice_last(k, h * dh, dh)?;
        let vh = tape.slice_last(v, h * dh, dh)?;
        let scores = se_scores(tape, qh, kh)?;
        outs.push(tape.scale_rows(vh, scores)?);
    }
    let cat = tape.concat(&outs, 2)?;
    let proj = tape.matmul(cat, p.attn.wo)?;
    let h = tape.add(f_img, proj)?;
    let hn = layer_norm(tape, h, p.ln2)?;
    let ff = mlp(tape, hn, &p.mlp)?;
    tape.add(h, ff)
}

/// Full two-block refinement. Each modality keeps its own fused question
/// stream; the returned features are the enhanced patch maps after the
/// final block.
pub fn cfar_forward(
    tape: &mut Tape,
    bundle: &FeatureBundle,
    ids: &CfarIds,
    cb: &RegionCodebook,
    k: usize,
) -> Result<(TensorId, TensorId, RoutingReport)> {
    let mut report = Vec::with_capacity(CFAR_BLOCKS);
    let mut streams = [
        (bundle.f_q, bundle.f_o), // optical: (question stream, features)
        (bundle.f_q, bundle.f_s), // sar
    ];
    for block in &ids.blocks {
        let mut routings = Vec::with_capacity(2);
        for (si, stream_ids) in [block.opt, block.sar].iter().enumerate() {
            let (q_stream, f_m) = streams[si];
            let pooled = region_pool(tape, f_m, cb)?;
            let s = krr_scores(tape, q_stream, pooled, stream_ids.w_t, stream_ids.w_i)?;
            let (f_key, selected) = select_key_regions(tape, s, k, cb, f_m)?;
            let q_next = mca(tape, q_stream, f_key, &stream_ids.mca)?;
            let f_next = similarity_enhance(tape, q_next, f_m, &stream_ids.ie)?;
            routings.push(ModalityRouting {
                scores: tape.values(s).to_vec(),
                num_regions: cb.num_regions(),
                selected,
            });
            streams[si] = (q_next, f_next);
        }
        let sar = routings.pop().unwrap();
        let opt = routings.pop().unwrap();
        report.push(BlockRouting { opt, sar });
    }
    Ok((streams[0].1, streams[1].1, report))
}

// ── Parameter construction ───────────────────────────────────────────

fn init_sublayer(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d: usize, hidden: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        init_matrix(store, rng, &format!("{prefix}.{w}"), d, d);
    }
    for ln in ["ln1", "ln2"] {
        init_ones(store, &format!("{prefix}.{ln}.gamma"), d);
        init_zeros(store, &format!("{prefix}.{ln}.beta"), d);
    }
    init_matrix(store, rng, &format!("{prefix}.mlp.w1"), d, hidden);
    init_zeros(store, &format!("{prefix}.mlp.b1"), hidden);
    init_matrix(store, rng, &format!("{prefix}.mlp.w2"), hidden, d);
    init_zeros(store, &format!("{prefix}.mlp.b2"), d);
}

/// Insert all CFAR parameters: per block, per modality stream, the two
/// routing matrices plus full MCA and IE sub-blocks. Streams are
/// independent; nothing is shared across modalities or blocks.
pub fn init_cfar_params(store: &mut ParamStore, rng: &mut Rng, d: usize, hidden: usize) {
    for b in 0..CFAR_BLOCKS {
        for s in ["opt", "sar"] {
            let pfx = format!("cfar.b{b}.{s}");
            init_matrix(store, rng, &format!("{pfx}.w_t"), d, d);
            init_matrix(store, rng, &format!("{pfx}.w_i"), d, d);
            init_sublayer(store, rng, &format!("{pfx}.mca"), d, hidden);
            init_sublayer(store, rng, &format!("{pfx}.ie"), d, hidden);
        }
    }
}

fn bind_sublayer(bound: &BoundParams, prefix: &str, heads: usize) -> (AttnIds, LnIds, LnIds, MlpIds) {
    let attn = AttnIds {
        wq: bound.id(&format!("{prefix}.wq")),
        wk: bound.id(&format!("{prefix}.wk")),
        wv: bound.id(&format!("{prefix}.wv")),
        wo: bound.id(&format!("{prefix}.wo")),
        heads,
    };
    let ln1 = LnIds {
        gamma: bound.id(&format!("{prefix}.ln1.gamma")),
        beta: bound.id(&format!("{prefix}.ln1.beta")),
        eps: LAYER_NORM_EPS,
    };
    let ln2 = LnIds {
        gamma: bound.id(&format!("{prefix}.ln2.gamma")),
        beta: bound.id(&format!("{prefix}.ln2.beta")),
        eps: LAYER_NORM_EPS,
    };
    let mlp = MlpIds {
        w1: bound.id(&format!("{prefix}.mlp.w1")),
        b1: bound.id(&format!("{prefix}.mlp.b1")),
        w2: bound.id(&format!("{prefix}.mlp.w2")),
        b2: bound.id(&format!("{prefix}.mlp.b2")),
        act: Activation::Gelu,
    };
    (attn, ln1, ln2, mlp)
}

fn bind_stream(bound: &BoundParams, prefix: &str, heads: usize) -> CfarStreamIds {
    let (attn, ln1, ln2, mlp) = bind_sublayer(bound, &format!("{prefix}.mca"), heads);
    let mca = McaIds { attn, ln1, ln2, mlp };
    let (attn, ln1, ln2, mlp) = bind_sublayer(bound, &format!("{prefix}.ie"), heads);
    let ie = IeIds { attn, ln1, ln2, mlp };
    CfarStreamIds {
        w_t: bound.id(&format!("{prefix}.w_t")),
        w_i: bound.id(&format!("{prefix}.w_i")),
        mca,
        ie,
    }
}

pub fn bind_cfar(bound: &BoundParams, heads: usize) -> CfarIds {
    let block = |b: usize| CfarBlockIds {
        opt: bind_stream(bound, &format!("cfar.b{b}.opt"), heads),
        sar: bind_stream(bound, &format!("cfar.b{b}.sar"), heads),
    };
    CfarIds {
        blocks: [block(0), block(1)],
    }
}

/// Names of the output-projection and MLP-output parameters whose zeroing
/// makes the whole CFAR stack the identity on its feature streams.
pub fn cfar_passthrough_params() -> Vec<String> {
    let mut names = Vec::new();
    for b in 0..CFAR_BLOCKS {
        for s in ["opt", "sar"] {
            for sub in ["mca", "ie"] {
                names.push(format!("cfar.b{b}.{s}.{sub}.wo"));
                names.push(format!("cfar.b{b}.{s}.{sub}.mlp.w2"));
                names.push(format!("cfar.b{b}.{s}.{sub}.mlp.b2"));
            }
        }
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_grad, rel_err_vec, FD_STEP};
    use crate::rng::Rng;

    #[test]
    fn grid_codebook_square_blocks_16_patches() {
        let cb = RegionCodebook::grid(16, 4, 4).unwrap();
        assert_eq!(cb.patches(0), &[0, 1, 4, 5]);
        assert_eq!(cb.patches(1), &[2, 3, 6, 7]);
        assert_eq!(cb.patches(2), &[8, 9, 12, 13]);
        assert_eq!(cb.patches(3), &[10, 11, 14, 15]);
    }

    #[test]
    fn grid_codebook_falls_back_to_runs() {
        let cb = RegionCodebook::grid(4, 2, 2).unwrap();
        assert_eq!(cb.patches(0), &[0, 1]);
        assert_eq!(cb.patches(1), &[2, 3]);
    }

    #[test]
    fn codebook_partitions_patches() {
        for (m, t, p) in [(16, 4, 4), (4, 2, 2), (16, 8, 2), (36, 9, 4)] {
            let cb = RegionCodebook::grid(m, t, p).unwrap();
            let mut seen = vec![0usize; m];
            for r in 0..t {
                assert_eq!(cb.patches(r).len(), p);
                for &i in cb.patches(r) {
                    seen[i] += 1;
                }
            }
            assert!(
                seen.iter().all(|&c| c == 1),
                "every patch in exactly one region ({m},{t},{p})"
            );
        }
    }

    #[test]
    fn codebook_rejects_bad_factorization() {
        assert!(RegionCodebook::grid(16, 3, 4).is_err());
        assert!(RegionCodebook::from_regions(vec![vec![0, 1], vec![1, 2]], 4).is_err());
        assert!(RegionCodebook::from_regions(vec![vec![0, 1]], 4).is_err());
    }

    #[test]
    fn region_pool_identical_patches() {
        let cb = RegionCodebook::grid(4, 2, 2).unwrap();
        let mut tape = Tape::new();
        let f = tape.leaf(vec![1.5; 4 * 3], vec![1, 4, 3]).unwrap();
        let pooled = region_pool(&mut tape, f, &cb).unwrap();
        assert_eq!(tape.shape(pooled), &[1, 2, 3]);
        assert!(tape.values(pooled).iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn region_pool_hand_average() {
        // T=2, P=2, contiguous blocks, D=1, rows [1,3,5,7] -> regions [2,6].
        let cb = RegionCodebook::grid(4, 2, 2).unwrap();
        let mut tape = Tape::new();
        let f = tape.leaf(vec![1.0, 3.0, 5.0, 7.0], vec![1, 4, 1]).unwrap();
        let pooled = region_pool(&mut tape, f, &cb).unwrap();
        assert_eq!(tape.values(pooled), &[2.0, 6.0]);
    }

    #[test]
    fn region_pool_conserves_sums() {
        let mut rng = Rng::new(40);
        let cb = RegionCodebook::grid(16, 4, 4).unwrap();
        let data = rng.uniform_vec(2 * 16 * 3, -1.0, 1.0);
        let mut tape = Tape::new();
        let f = tape.leaf(data.clone(), vec![2, 16, 3]).unwrap();
        let pooled = region_pool(&mut tape, f, &cb).unwrap();
        let patch_sum: f64 = data.iter().sum();
        let region_sum: f64 = tape.values(pooled).iter().sum();
        assert!((region_sum * 4.0 - patch_sum).abs() < 1e-9);
    }

    #[test]
    fn krr_scores_hand_case() {
        // N=1, D=1, identity W: F_q=[[2]], F_or=[[1],[3]] -> S=[2,6].
        let mut tape = Tape::new();
        let f_q = tape.leaf(vec![2.0], vec![1, 1, 1]).unwrap();
        let f_or = tape.leaf(vec![1.0, 3.0], vec![1, 2, 1]).unwrap();
        let eye = tape.leaf(vec![1.0], vec![1, 1]).unwrap();
        let s = krr_scores(&mut tape, f_q, f_or, eye, eye).unwrap();
        assert_eq!(tape.values(s), &[2.0, 6.0]);
    }

    #[test]
    fn krr_scores_zero_question_is_zero() {
        let mut rng = Rng::new(41);
        let mut tape = Tape::new();
        let f_q = tape.leaf(vec![0.0; 2 * 3 * 4], vec![2, 3, 4]).unwrap();
        let f_or = tape.leaf(rng.uniform_vec(2 * 2 * 4, -1.0, 1.0), vec![2, 2, 4]).unwrap();
        let wt = tape.leaf(rng.uniform_vec(16, -1.0, 1.0), vec![4, 4]).unwrap();
        let wi = tape.leaf(rng.uniform_vec(16, -1.0, 1.0), vec![4, 4]).unwrap();
        let s = krr_scores(&mut tape, f_q, f_or, wt, wi).unwrap();
        assert!(tape.values(s).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn krr_scores_match_naive_loop() {
        for seed in 0..10 {
            let mut rng = Rng::new(1100 + seed);
            let (b, n, t, d) = (2, 3, 2, 4);
            let fq = rng.uniform_vec(b * n * d, -1.0, 1.0);
            let fr = rng.uniform_vec(b * t * d, -1.0, 1.0);
            let wt = rng.uniform_vec(d * d, -1.0, 1.0);
            let wi = rng.uniform_vec(d * d, -1.0, 1.0);
            let mut tape = Tape::new();
            let fq_t = tape.leaf(fq.clone(), vec![b, n, d]).unwrap();
            let fr_t = tape.leaf(fr.clone(), vec![b, t, d]).unwrap();
            let wt_t = tape.leaf(wt.clone(), vec![d, d]).unwrap();
            let wi_t = tape.leaf(wi.clone(), vec![d, d]).unwrap();
            let s = krr_scores(&mut tape, fq_t, fr_t, wt_t, wi_t).unwrap();
            // Naive loop oracle.
            let proj = |x: &[f64], w: &[f64], rows: usize, base: usize| {
                let mut y = vec![0.0; rows * d];
                for r in 0..rows {
                    for c in 0..d {
                        for u in 0..d {
                            y[r * d + c] += x[base + r * d + u] * w[u * d + c];
                        }
                    }
                }
                y
            };
            for bi in 0..b {
                let q = proj(&fq, &wt, n, bi * n * d);
                let r = proj(&fr, &wi, t, bi * t * d);
                for ti in 0..t {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let mut dot = 0.0;
                        for u in 0..d {
                            dot += q[ni * d + u] * r[ti * d + u];
                        }
                        acc += dot / (d as f64).sqrt();
                    }
                    acc /= n as f64;
                    let got = tape.values(s)[bi * t + ti];
                    assert!((got - acc).abs() < 1e-12, "seed {seed}");
                }
            }
        }
    }

    fn feature_tensor(tape: &mut Tape, rng: &mut Rng, b: usize, m: usize, d: usize) -> TensorId {
        tape.leaf(rng.uniform_vec(b * m * d, -1.0, 1.0), vec![b, m, d]).unwrap()
    }

    #[test]
    fn select_key_regions_all_is_permutation() {
        let mut rng = Rng::new(42);
        let cb = RegionCodebook::grid(4, 2, 2).unwrap();
        let mut tape = Tape::new();
        let f = feature_tensor(&mut tape, &mut rng, 1, 4, 3);
        let s = tape.leaf(vec![0.1, 0.9], vec![1, 2]).unwrap();
        let (fk, sel) = select_key_regions(&mut tape, s, 2, &cb, f).unwrap();
        assert_eq!(sel, vec![vec![1, 0]]);
        // All four patch rows appear exactly once.
        let fd = tape.values(f);
        let kd = tape.values(fk);
        let mut expect: Vec<&[f64]> = vec![&fd[6..9], &fd[9..12], &fd[0..3], &fd[3..6]];
        let got: Vec<&[f64]> = (0..4).map(|r| &kd[r * 3..(r + 1) * 3]).collect();
        assert_eq!(got, expect.drain(..).collect::<Vec<_>>());
    }

    #[test]
    fn select_key_regions_forced_ordering() {
        // S = [0.9, 0.1, 0.5, 0.7], k=2, P=2 -> regions 0 then 3.
        let mut rng = Rng::new(43);
        let cb = RegionCodebook::grid(8, 4, 2).unwrap();
        let mut tape = Tape::new();
        let f = feature_tensor(&mut tape, &mut rng, 1, 8, 2);
        let s = tape.leaf(vec![0.9, 0.1, 0.5, 0.7], vec![1, 4]).unwrap();
        let (fk, sel) = select_key_regions(&mut tape, s, 2, &cb, f).unwrap();
        assert_eq!(sel, vec![vec![0, 3]]);
        let fd = tape.values(f);
        let kd = tape.values(fk);
        let expected_rows = [0usize, 1, 6, 7];
        for (j, &row) in expected_rows.iter().enumerate() {
            assert_eq!(&kd[j * 2..(j + 1) * 2], &fd[row * 2..(row + 1) * 2]);
        }
    }

    #[test]
    fn select_key_regions_gradient_mask() {
        let cb = RegionCodebook::grid(4, 2, 2).unwrap();
        let mut tape = Tape::new();
        let f = tape
            .param((0..8).map(|v| v as f64).collect(), vec![1, 4, 2])
            .unwrap();
        let s = tape.leaf(vec![0.2, 0.8], vec![1, 2]).unwrap();
        let (fk, _) = select_key_regions(&mut tape, s, 1, &cb, f).unwrap();
        let loss = tape.sum_all(fk).unwrap();
        tape.backward(loss).unwrap();
        // Region 1 selected: patches 2,3 get gradient 1, others 0.
        assert_eq!(tape.grad(f).unwrap(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn selection_is_shift_invariant() {
        let mut rng = Rng::new(44);
        let cb = RegionCodebook::grid(4, 2, 2).unwrap();
        let scores = rng.uniform_vec(2 * 2, -1.0, 1.0);
        let shifted: Vec<f64> = scores.iter().map(|v| v + 1234.5).collect();
        let mut tape = Tape::new();
        let f = feature_tensor(&mut tape, &mut rng, 2, 4, 2);
        let s1 = tape.leaf(scores, vec![2, 2]).unwrap();
        let s2 = tape.leaf(shifted, vec![2, 2]).unwrap();
        let (_, sel1) = select_key_regions(&mut tape, s1, 1, &cb, f).unwrap();
        let (_, sel2) = select_key_regions(&mut tape, s2, 1, &cb, f).unwrap();
        assert_eq!(sel1, sel2);
    }

    #[test]
    fn region_permutation_equivariance() {
        // Permuting region order in the codebook (scores permuted the same
        // way) selects the same multiset of patch vectors.
        let mut rng = Rng::new(45);
        let cb1 = RegionCodebook::from_regions(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let cb2 = RegionCodebook::from_regions(vec![vec![2, 3], vec![0, 1]], 4).unwrap();
        let data = rng.uniform_vec(4 * 2, -1.0, 1.0);
        let mut tape = Tape::new();
        let f = tape.leaf(data, vec![1, 4, 2]).unwrap();
        let s1 = tape.leaf(vec![0.3, 0.9], vec![1, 2]).unwrap();
        let s2 = tape.leaf(vec![0.9, 0.3], vec![1, 2]).unwrap();
        let (k1, _) = select_key_regions(&mut tape, s1, 1, &cb1, f).unwrap();
        let (k2, _) = select_key_regions(&mut tape, s2, 1, &cb2, f).unwrap();
        assert_eq!(tape.values(k1), tape.values(k2));
    }

    fn zeroed_stream_params(d: usize, hidden: usize) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(50);
        init_cfar_params(&mut store, &mut rng, d, hidden);
        for name in cfar_passthrough_params() {
            store.zero(&name);
        }
        store
    }

    #[test]
    fn mca_zero_output_projections_is_identity() {
        let d = 4;
        let store = zeroed_stream_params(d, d);
        let mut rng = Rng::new(51);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let ids = bind_cfar(&bound, 2);
        let f_q_data = rng.uniform_vec(2 * 3 * d, -1.0, 1.0);
        let f_q = tape.leaf(f_q_data.clone(), vec![2, 3, d]).unwrap();
        let f_key = feature_tensor(&mut tape, &mut rng, 2, 2, d);
        let out = mca(&mut tape, f_q, f_key, &ids.blocks[0].opt.mca).unwrap();
        assert_eq!(tape.values(out), f_q_data.as_slice());
    }

    #[test]
    fn mca_singleton_key_matches_hand_formula() {
        // One key patch: attention weights are exactly 1, so the attention
        // output is Wo(Wv kv) for every query token. Whole block by hand.
        let d = 2;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(52);
        init_cfar_params(&mut store, &mut rng, d, d);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let ids = bind_cfar(&bound, 1);
        let p = ids.blocks[0].opt.mca;
        let f_q_data = vec![0.3, -0.8, 1.1, 0.4];
        let kv_data = vec![0.5, -0.2];
        let f_q = tape.leaf(f_q_data.clone(), vec![1, 2, d]).unwrap();
        let kv = tape.leaf(kv_data.clone(), vec![1, 1, d]).unwrap();
        let out = mca(&mut tape, f_q, kv, &p).unwrap();

        // Hand evaluation with plain loops.
        let get = |n: &str| store.get(n).values.clone();
        let (wv, wo) = (get("cfar.b0.opt.mca.wv"), get("cfar.b0.opt.mca.wo"));
        let (w1, w2) = (get("cfar.b0.opt.mca.mlp.w1"), get("cfar.b0.opt.mca.mlp.w2"));
        let matvec = |w: &[f64], x: &[f64]| -> Vec<f64> {
            (0..d).map(|c| (0..d).map(|u| x[u] * w[u * d + c]).sum()).collect()
        };
        let v = matvec(&wv, &kv_data);
        let att = matvec(&wo, &v); // weights are 1 over the single key
        let mut expect = vec![0.0; 4];
        for tok in 0..2 {
            let h: Vec<f64> = (0..d).map(|j| f_q_data[tok * d + j] + att[j]).collect();
            // LN2 with gamma=1, beta=0.
            let mu = (h[0] + h[1]) / 2.0;
            let var = ((h[0] - mu).powi(2) + (h[1] - mu).powi(2)) / 2.0;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let hn: Vec<f64> = h.iter().map(|v| (v - mu) * inv).collect();
            let a = matvec(&w1, &hn);
            let g: Vec<f64> = a.iter().map(|&v| v * crate::tensor::normal_cdf(v)).collect();
            let ff = matvec(&w2, &g);
            for j in 0..d {
                expect[tok * d + j] = h[j] + ff[j];
            }
        }
        for (got, want) in tape.values(out).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mca_gradients_match_finite_differences() {
        let d = 4;
        for seed in 0..3 {
            let mut rng = Rng::new(1200 + seed);
            let mut store = ParamStore::new();
            init_cfar_params(&mut store, &mut rng, d, d);
            let f_q_data = rng.uniform_vec(2 * d, -1.0, 1.0);
            let f_key_data = rng.uniform_vec(3 * d, -1.0, 1.0);
            let flat: Vec<f64> = store.iter().flat_map(|(_, p)| p.values.clone()).collect();
            let run = |inputs: &[Vec<f64>]| -> (Tape, TensorId) {
                let mut st = store.clone();
                let mut cursor = 0;
                for (_, p) in st.iter_mut() {
                    let n = p.values.len();
                    p.values.copy_from_slice(&inputs[0][cursor..cursor + n]);
                    cursor += n;
                }
                let mut tape = Tape::new();
                let bound = st.bind(&mut tape);
                let ids = bind_cfar(&bound, 2);
                let f_q = tape.leaf(f_q_data.clone(), vec![1, 2, d]).unwrap();
                let f_key = tape.leaf(f_key_data.clone(), vec![1, 3, d]).unwrap();
                let out = mca(&mut tape, f_q, f_key, &ids.blocks[0].opt.mca).unwrap();
                let sq = tape.mul(out, out).unwrap();
                let loss = tape.sum_all(sq).unwrap();
                (tape, loss)
            };
            let (mut tape, loss) = run(&[flat.clone()]);
            tape.backward(loss).unwrap();
            // Parameters were bound first, in lexicographic order, so their
            // tape ids are 0..n in that same order.
            let mut analytic = Vec::with_capacity(flat.len());
            for (i, (_, p)) in store.iter().enumerate() {
                match tape.grad(TensorId(i)) {
                    Some(g) => analytic.extend_from_slice(g),
                    None => analytic.extend(std::iter::repeat(0.0).take(p.values.len())),
                }
            }
            let numeric = fd_grad(
                |xs| {
                    let (t, l) = run(xs);
                    t.scalar_value(l)
                },
                &[flat],
                FD_STEP,
            );
            let err = rel_err_vec(&analytic, &numeric[0]);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn se_scores_singleton_patch_is_one() {
        let mut rng = Rng::new(53);
        let mut tape = Tape::new();
        let qh = tape.leaf(rng.uniform_vec(3 * 2, -1.0, 1.0), vec![1, 3, 2]).unwrap();
        let kh = tape.leaf(rng.uniform_vec(2, -1.0, 1.0), vec![1, 1, 2]).unwrap();
        let s = se_scores(&mut tape, qh, kh).unwrap();
        assert_eq!(tape.values(s), &[1.0]);
    }

    #[test]
    fn se_scores_hand_case_and_scaling() {
        // Q=[2], K=[[1],[3]], V=[[10],[20]], d_h=1:
        // scores = softmax([2,6]) = [0.01799, 0.98201],
        // scaled V = [[0.1799], [19.640]].
        let mut tape = Tape::new();
        let q = tape.leaf(vec![2.0], vec![1, 1, 1]).unwrap();
        let k = tape.leaf(vec![1.0, 3.0], vec![1, 2, 1]).unwrap();
        let v = tape.leaf(vec![10.0, 20.0], vec![1, 2, 1]).unwrap();
        let s = se_scores(&mut tape, q, k).unwrap();
        let sd = tape.values(s);
        assert!((sd[0] - 0.01799).abs() < 1e-5);
        assert!((sd[1] - 0.98201).abs() < 1e-5);
        let scaled = tape.scale_rows(v, s).unwrap();
        let out = tape.values(scaled);
        assert!((out[0] - 0.1799).abs() < 1e-4);
        assert!((out[1] - 19.640).abs() < 1e-3);
    }

    #[test]
    fn se_scores_sum_to_one_per_head() {
        let mut rng = Rng::new(54);
        for _ in 0..5 {
            let mut tape = Tape::new();
            let qh = tape.leaf(rng.uniform_vec(2 * 3 * 2, -2.0, 2.0), vec![2, 3, 2]).unwrap();
            let kh = tape.leaf(rng.uniform_vec(2 * 5 * 2, -2.0, 2.0), vec![2, 5, 2]).unwrap();
            let s = se_scores(&mut tape, qh, kh).unwrap();
            let sd = tape.values(s);
            for b in 0..2 {
                let sum: f64 = sd[b * 5..(b + 1) * 5].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    fn make_bundle(
        tape: &mut Tape,
        rng: &mut Rng,
        b: usize,
        n: usize,
        m: usize,
        d: usize,
    ) -> FeatureBundle {
        FeatureBundle {
            f_q: tape.leaf(rng.uniform_vec(b * n * d, -1.0, 1.0), vec![b, n, d]).unwrap(),
            f_o: tape.leaf(rng.uniform_vec(b * m * d, -1.0, 1.0), vec![b, m, d]).unwrap(),
            f_s: tape.leaf(rng.uniform_vec(b * m * d, -1.0, 1.0), vec![b, m, d]).unwrap(),
        }
    }

    #[test]
    fn cfar_identical_inputs_and_shared_params_give_identical_outputs() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(55);
        init_cfar_params(&mut store, &mut rng, d, d);
        let cb = RegionCodebook::grid(4, 2, 2).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let ids = bind_cfar(&bound, 2);
        // Share the optical stream parameters across both modalities.
        let shared = CfarIds {
            blocks: [
                CfarBlockIds { opt: ids.blocks[0].opt, sar: ids.blocks[0].opt },
                CfarBlockIds { opt: ids.blocks[1].opt, sar: ids.blocks[1].opt },
            ],
        };
        let f_q = tape.leaf(rng.uniform_vec(2 * 3 * d, -1.0, 1.0), vec![2, 3, d]).unwrap();
        let img = rng.uniform_vec(2 * 4 * d, -1.0, 1.0);
        let f_o = tape.leaf(img.clone(), vec![2, 4, d]).unwrap();
        let f_s = tape.leaf(img, vec![2, 4, d]).unwrap();
        let bundle = FeatureBundle { f_q, f_o, f_s };
        let (oe, se, _) = cfar_forward(&mut tape, &bundle, &shared, &cb, 1).unwrap();
        let (od, sd) = (tape.values(oe), tape.values(se));
        for (a, b) in od.iter().zip(sd) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn cfar_output_shapes() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(56);
        init_cfar_params(&mut store, &mut rng, d, d);
        let cb = RegionCodebook::grid(16, 4, 4).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let ids = bind_cfar(&bound, 2);
        let bundle = make_bundle(&mut tape, &mut rng, 3, 5, 16, d);
        let (oe, se, report) = cfar_forward(&mut tape, &bundle, &ids, &cb, 2).unwrap();
        assert_eq!(tape.shape(oe), &[3, 16, d]);
        assert_eq!(tape.shape(se), &[3, 16, d]);
        assert_eq!(report.len(), 2);
        assert_eq!(report[0].opt.scores.len(), 3 * 4);
        assert_eq!(report[0].sar.selected.len(), 3);
        assert_eq!(report[0].sar.selected[0].len(), 2);
    }

    #[test]
    fn cfar_zero_init_is_identity_on_features() {
        let d = 4;
        let store = zeroed_stream_params(d, d);
        let cb = RegionCodebook::grid(4, 2, 2).unwrap();
        let mut rng = Rng::new(57);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let ids = bind_cfar(&bound, 2);
        let bundle = make_bundle(&mut tape, &mut rng, 2, 3, 4, d);
        let (oe, se, _) = cfar_forward(&mut tape, &bundle, &ids, &cb, 1).unwrap();
        assert_eq!(tape.values(oe), tape.values(bundle.f_o));
        assert_eq!(tape.values(se), tape.values(bundle.f_s));
    }

    #[test]
    fn cfar_key_rows_are_bit_copies_of_features() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(58);
        init_cfar_params(&mut store, &mut rng, d, d);
        let cb = RegionCodebook::grid(4, 2, 2).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let ids = bind_cfar(&bound, 2);
        let f = feature_tensor(&mut tape, &mut rng, 2, 4, d);
        let f_q = tape.leaf(rng.uniform_vec(2 * 3 * d, -1.0, 1.0), vec![2, 3, d]).unwrap();
        let pooled = region_pool(&mut tape, f, &cb).unwrap();
        let s = krr_scores(&mut tape, f_q, pooled, ids.blocks[0].opt.w_t, ids.blocks[0].opt.w_i)
            .unwrap();
        let (fk, sel) = select_key_regions(&mut tape, s, 1, &cb, f).unwrap();
        let fd_vals = tape.values(f);
        let kd = tape.values(fk);
        for b in 0..2 {
            let region = sel[b][0];
            for (j, &patch) in cb.patches(region).iter().enumerate() {
                for c in 0..d {
                    assert_eq!(
                        kd[(b * 2 + j) * d + c].to_bits(),
                        fd_vals[(b * 4 + patch) * d + c].to_bits()
                    );
                }
            }
        }
    }
}
