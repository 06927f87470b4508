//! Full network assembly, training objective, and evaluation metrics.
//!
//! A `ModelConfig` pins every architectural dimension plus a variant tag;
//! the variant selects between the full model, the module-ablation
//! configurations, the simple fusion baselines, and the single-modality
//! baselines, all through the same forward path.

use crate::amef::{
    adaptive_fuse, bind_expert, bind_gate, bind_rqaf, expert_predict, init_expert_params,
    init_gate_params, init_rqaf_params, rqaf_fuse, ExpertIds, GateIds, RqafIds,
};
use crate::cfar::{
    bind_cfar, cfar_forward, init_cfar_params, CfarIds, RegionCodebook, RoutingReport,
};
use crate::encoders::{
    bind_encoder, embed_patches, embed_question, init_encoder_params, EncoderIds, FeatureBundle,
    Modality, OPTICAL_CHANNELS,
};
use crate::nn::{
    layer_norm, multi_head_cross_attention, AttnIds, LnIds, LAYER_NORM_EPS,
};
use crate::params::{init_matrix, init_ones, init_zeros, BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Result, Tape, TensorError, TensorId};

/// Model variant. `Exp4` is the full network; the others reproduce the
/// ablation rows: module ablations (`Exp1`..`Exp3`), fusion-method
/// baselines (`Add`, `Concat`, `Xformer`) and single-modality baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// No multi-expert fusion, no refinement: one expert on `F_o + F_s`.
    Exp1,
    /// Three experts plus gate; fusion stream is plain addition.
    Exp2,
    /// As `Exp2` with the two-block refinement enabled.
    Exp3,
    /// Full model: refinement plus quality-aware fusion.
    Exp4,
    /// Single expert on `F_o + F_s` (same wiring as `Exp1`).
    Add,
    /// Single expert on a linear re-projection of `[F_o ; F_s]`.
    Concat,
    /// Single expert on one cross-attention layer fusing SAR into optical.
    Xformer,
    /// Single expert on optical features only.
    OptOnly,
    /// Single expert on SAR features only.
    SarOnly,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        Some(match s {
            "exp1" => Variant::Exp1,
            "exp2" => Variant::Exp2,
            "exp3" => Variant::Exp3,
            "exp4" | "full" => Variant::Exp4,
            "add" => Variant::Add,
            "concat" => Variant::Concat,
            "xformer" => Variant::Xformer,
            "opt-only" => Variant::OptOnly,
            "sar-only" => Variant::SarOnly,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Exp1 => "exp1",
            Variant::Exp2 => "exp2",
            Variant::Exp3 => "exp3",
            Variant::Exp4 => "exp4",
            Variant::Add => "add",
            Variant::Concat => "concat",
            Variant::Xformer => "xformer",
            Variant::OptOnly => "opt-only",
            Variant::SarOnly => "sar-only",
        }
    }

    pub fn uses_cfar(&self) -> bool {
        matches!(self, Variant::Exp3 | Variant::Exp4)
    }

    pub fn uses_rqaf(&self) -> bool {
        matches!(self, Variant::Exp4)
    }

    /// Three experts plus the adaptive-fusion gate.
    pub fn multi_expert(&self) -> bool {
        matches!(self, Variant::Exp2 | Variant::Exp3 | Variant::Exp4)
    }

    pub fn uses_optical(&self) -> bool {
        !matches!(self, Variant::SarOnly)
    }

    pub fn uses_sar(&self) -> bool {
        !matches!(self, Variant::OptOnly)
    }
}

/// Which visual stream the optical/SAR experts consume when CFAR ran.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertInput {
    Enhanced,
    Raw,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Training batch size; the forward path accepts any batch.
    pub batch: usize,
    /// Question length N (padded).
    pub n_tokens: usize,
    /// Patch grid side; M = grid * grid.
    pub grid: usize,
    /// Region count T.
    pub regions: usize,
    /// Patches per region P; T * P must equal M.
    pub region_patches: usize,
    /// Routed regions k.
    pub route_k: usize,
    /// Quality-fusion candidates per modality R.
    pub rqaf_r: usize,
    /// Embedding width D.
    pub dim: usize,
    /// Attention heads h.
    pub heads: usize,
    /// Quality-fusion heads h_r.
    pub rqaf_heads: usize,
    /// Answer classes C.
    pub classes: usize,
    /// Hidden width of the feature MLPs.
    pub mlp_hidden: usize,
    /// Hidden width of the classifier heads.
    pub head_hidden: usize,
    /// Token vocabulary size.
    pub vocab: usize,
    /// Loss weights for the optical, SAR, fusion and gated terms.
    pub lambda: [f64; 4],
    pub expert_input: ExpertInput,
    pub variant: Variant,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: D=32 with 4 heads, a 4x4 patch grid in four
    /// 2x2 regions, k=2 routed regions, R=3 fusion candidates, and the
    /// loss weights all 0.5.
    fn default() -> Self {
        ModelConfig {
            batch: 32,
            n_tokens: 24,
            grid: 4,
            regions: 4,
            region_patches: 4,
            route_k: 2,
            rqaf_r: 3,
            dim: 32,
            heads: 4,
            rqaf_heads: 4,
            classes: 22,
            mlp_hidden: 32,
            head_hidden: 32,
            vocab: 64,
            lambda: [0.5; 4],
            expert_input: ExpertInput::Enhanced,
            variant: Variant::Exp4,
        }
    }
}

impl ModelConfig {
    pub fn m(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TensorError::Invalid(msg));
        if self.dim == 0 || self.heads == 0 || self.rqaf_heads == 0 {
            return fail("dim and head counts must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim % self.rqaf_heads != 0 {
            return fail(format!(
                "dim {} not divisible by rqaf_heads {}",
                self.dim, self.rqaf_heads
            ));
        }
        if self.regions * self.region_patches != self.m() {
            return fail(format!(
                "regions {} * region_patches {} != patches {}",
                self.regions,
                self.region_patches,
                self.m()
            ));
        }
        if self.route_k == 0 || self.route_k > self.regions {
            return fail(format!("route_k {} out of 1..={}", self.route_k, self.regions));
        }
        if self.rqaf_r == 0 || self.rqaf_r > self.m() {
            return fail(format!("rqaf_r {} out of 1..={}", self.rqaf_r, self.m()));
        }
        if self.lambda.iter().any(|&l| l < 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        if self.classes == 0 || self.vocab == 0 || self.n_tokens == 0 || self.batch == 0 {
            return fail("classes, vocab, n_tokens, batch must be positive".into());
        }
        RegionCodebook::grid(self.m(), self.regions, self.region_patches)?;
        Ok(())
    }

    pub fn codebook(&self) -> RegionCodebook {
        RegionCodebook::grid(self.m(), self.regions, self.region_patches)
            .expect("validated config")
    }
}

/// One batch of training data, already padded and flattened.
#[derive(Clone, Debug, Default)]
pub struct TrainBatch {
    /// `B x N` token ids.
    pub tokens: Vec<Vec<usize>>,
    /// `B x M x 3` optical channels.
    pub optical: Vec<f64>,
    /// `B x M` SAR intensities.
    pub sar: Vec<f64>,
    /// `B` answer ids.
    pub answers: Vec<usize>,
    /// `B` question-type ids.
    pub types: Vec<usize>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Everything the forward pass exposes.
pub struct ForwardOutputs {
    /// Optical expert scores `[B,1,C]` (multi-expert variants).
    pub p_oe: Option<TensorId>,
    /// SAR expert scores `[B,1,C]` (multi-expert variants).
    pub p_se: Option<TensorId>,
    /// Fusion (or sole) expert scores `[B,1,C]`.
    pub p_os: TensorId,
    /// Final distribution `[B,1,C]`.
    pub pre: TensorId,
    /// Gate values `[B,1,3]` (multi-expert variants).
    pub w_a: Option<TensorId>,
    pub report: RoutingReport,
}

/// Tape bindings of the full parameter set for one forward pass.
pub struct ModelIds {
    pub enc: EncoderIds,
    pub cfar: Option<CfarIds>,
    pub rqaf: Option<RqafIds>,
    pub expert_opt: Option<ExpertIds>,
    pub expert_sar: Option<ExpertIds>,
    pub expert_fus: ExpertIds,
    pub gate: Option<GateIds>,
    pub concat_proj: Option<TensorId>,
    pub xf: Option<(AttnIds, LnIds)>,
}

/// Initialize every parameter the variant needs, deterministically from
/// the seed. Parameters are drawn in a fixed code order.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let (d, h) = (cfg.dim, cfg.mlp_hidden);
    init_encoder_params(&mut store, &mut rng, cfg.vocab, cfg.n_tokens, cfg.m(), d);
    if cfg.variant.uses_cfar() {
        init_cfar_params(&mut store, &mut rng, d, h);
    }
    if cfg.variant.uses_rqaf() {
        init_rqaf_params(&mut store, &mut rng, d, h);
    }
    if cfg.variant.multi_expert() {
        init_expert_params(&mut store, &mut rng, "opt", d, h, cfg.head_hidden, cfg.classes);
        init_expert_params(&mut store, &mut rng, "sar", d, h, cfg.head_hidden, cfg.classes);
    }
    init_expert_params(&mut store, &mut rng, "fus", d, h, cfg.head_hidden, cfg.classes);
    if cfg.variant.multi_expert() {
        init_gate_params(&mut store, &mut rng, cfg.classes);
    }
    match cfg.variant {
        Variant::Concat => {
            init_matrix(&mut store, &mut rng, "fuse.concat_proj", 2 * d, d);
        }
        Variant::Xformer => {
            for w in ["wq", "wk", "wv", "wo"] {
                init_matrix(&mut store, &mut rng, &format!("fuse.xf.{w}"), d, d);
            }
            init_ones(&mut store, "fuse.xf.ln.gamma", d);
            init_zeros(&mut store, "fuse.xf.ln.beta", d);
        }
        _ => {}
    }
    store
}

pub fn bind_model(bound: &BoundParams, cfg: &ModelConfig) -> ModelIds {
    ModelIds {
        enc: bind_encoder(bound),
        cfar: cfg.variant.uses_cfar().then(|| bind_cfar(bound, cfg.heads)),
        rqaf: cfg
            .variant
            .uses_rqaf()
            .then(|| bind_rqaf(bound, cfg.rqaf_heads, cfg.rqaf_r)),
        expert_opt: cfg
            .variant
            .multi_expert()
            .then(|| bind_expert(bound, "opt", cfg.heads)),
        expert_sar: cfg
            .variant
            .multi_expert()
            .then(|| bind_expert(bound, "sar", cfg.heads)),
        expert_fus: bind_expert(bound, "fus", cfg.heads),
        gate: cfg.variant.multi_expert().then(|| bind_gate(bound)),
        concat_proj: (cfg.variant == Variant::Concat).then(|| bound.id("fuse.concat_proj")),
        xf: (cfg.variant == Variant::Xformer).then(|| {
            (
                AttnIds {
                    wq: bound.id("fuse.xf.wq"),
                    wk: bound.id("fuse.xf.wk"),
                    wv: bound.id("fuse.xf.wv"),
                    wo: bound.id("fuse.xf.wo"),
                    heads: cfg.heads,
                },
                LnIds {
                    gamma: bound.id("fuse.xf.ln.gamma"),
                    beta: bound.id("fuse.xf.ln.beta"),
                    eps: LAYER_NORM_EPS,
                },
            )
        }),
    }
}

fn validate_batch(cfg: &ModelConfig, batch: &TrainBatch) -> Result<()> {
    let b = batch.tokens.len();
    if b == 0 {
        return Err(TensorError::Invalid("empty batch".into()));
    }
    let m = cfg.m();
    if cfg.variant.uses_optical() && batch.optical.len() != b * m * OPTICAL_CHANNELS {
        return Err(TensorError::Invalid(format!(
            "optical grid has {} values, expected {}",
            batch.optical.len(),
            b * m * OPTICAL_CHANNELS
        )));
    }
    if cfg.variant.uses_sar() && batch.sar.len() != b * m {
        return Err(TensorError::Invalid(format!(
            "sar grid has {} values, expected {}",
            batch.sar.len(),
            b * m
        )));
    }
    if batch.answers.len() != b || batch.types.len() != b {
        return Err(TensorError::Invalid(
            "answers/types length mismatch with batch".into(),
        ));
    }
    if let Some(&bad) = batch.answers.iter().find(|&&a| a >= cfg.classes) {
        return Err(TensorError::IndexOutOfRange {
            index: bad,
            extent: cfg.classes,
        });
    }
    Ok(())
}

/// Run the variant's forward pass on a fresh tape. Deterministic given
/// parameters and inputs.
pub fn forward_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    batch: &TrainBatch,
) -> Result<(ForwardOutputs, BoundParams)> {
    validate_batch(cfg, batch)?;
    let b = batch.tokens.len();
    let bound = store.bind(tape);
    let ids = bind_model(&bound, cfg);
    let f_q = embed_question(tape, &batch.tokens, &ids.enc)?;

    // Single-modality baselines never touch the other grid.
    let f_o = if cfg.variant.uses_optical() {
        Some(embed_patches(tape, &batch.optical, b, Modality::Optical, &ids.enc)?)
    } else {
        None
    };
    let f_s = if cfg.variant.uses_sar() {
        Some(embed_patches(tape, &batch.sar, b, Modality::Sar, &ids.enc)?)
    } else {
        None
    };

    let (v_o, v_s, report) = match (&ids.cfar, f_o, f_s) {
        (Some(cfar_ids), Some(f_o), Some(f_s)) => {
            let bundle = FeatureBundle { f_q, f_o, f_s };
            let cb = cfg.codebook();
            let (oe, se, report) = cfar_forward(tape, &bundle, cfar_ids, &cb, cfg.route_k)?;
            match cfg.expert_input {
                ExpertInput::Enhanced => (Some(oe), Some(se), report),
                ExpertInput::Raw => (Some(f_o), Some(f_s), report),
            }
        }
        _ => (f_o, f_s, Vec::new()),
    };

    // Visual stream for the fusion (or sole) expert.
    let fusion_stream = match cfg.variant {
        Variant::Exp4 => {
            let p = ids.rqaf.as_ref().expect("exp4 binds rqaf");
            rqaf_fuse(tape, f_q, v_o.unwrap(), v_s.unwrap(), p)?
        }
        Variant::Exp1 | Variant::Exp2 | Variant::Exp3 | Variant::Add => {
            tape.add(v_o.unwrap(), v_s.unwrap())?
        }
        Variant::Concat => {
            let cat = tape.concat(&[v_o.unwrap(), v_s.unwrap()], 2)?;
            tape.matmul(cat, ids.concat_proj.unwrap())?
        }
        Variant::Xformer => {
            let (attn, ln) = ids.xf.as_ref().unwrap();
            let o = v_o.unwrap();
            let on = layer_norm(tape, o, *ln)?;
            let att = multi_head_cross_attention(tape, on, v_s.unwrap(), attn)?;
            tape.add(o, att)?
        }
        Variant::OptOnly => v_o.unwrap(),
        Variant::SarOnly => v_s.unwrap(),
    };

    let p_os = expert_predict(tape, f_q, fusion_stream, &ids.expert_fus)?;
    let outputs = if cfg.variant.multi_expert() {
        let p_oe = expert_predict(tape, f_q, v_o.unwrap(), ids.expert_opt.as_ref().unwrap())?;
        let p_se = expert_predict(tape, f_q, v_s.unwrap(), ids.expert_sar.as_ref().unwrap())?;
        let (pre, w_a) = adaptive_fuse(tape, p_oe, p_se, p_os, ids.gate.as_ref().unwrap())?;
        ForwardOutputs {
            p_oe: Some(p_oe),
            p_se: Some(p_se),
            p_os,
            pre,
            w_a: Some(w_a),
            report,
        }
    } else {
        let pre = tape.softmax(p_os, 2)?;
        ForwardOutputs {
            p_oe: None,
            p_se: None,
            p_os,
            pre,
            w_a: None,
            report,
        }
    };
    Ok((outputs, bound))
}

/// Training objective. For multi-expert variants:
/// `l1*CE(P_OE) + l2*CE(P_SE) + l3*CE(P_OS) + l4*NLL(Pre)`.
/// Single-expert variants train on the cross-entropy of their only
/// expert's scores.
pub fn total_loss(
    tape: &mut Tape,
    outs: &ForwardOutputs,
    answers: &[usize],
    lambda: [f64; 4],
) -> Result<TensorId> {
    let b = answers.len();
    let flat = |tape: &mut Tape, t: TensorId| -> Result<TensorId> {
        let c = *tape.shape(t).last().unwrap();
        tape.reshape(t, vec![b, c])
    };
    match (outs.p_oe, outs.p_se) {
        (Some(p_oe), Some(p_se)) => {
            let oe = flat(tape, p_oe)?;
            let se = flat(tape, p_se)?;
            let os = flat(tape, outs.p_os)?;
            let pre = flat(tape, outs.pre)?;
            let l_oe = tape.cross_entropy(oe, answers)?;
            let l_se = tape.cross_entropy(se, answers)?;
            let l_os = tape.cross_entropy(os, answers)?;
            let l_pre = tape.nll_rows(pre, answers)?;
            let t1 = tape.scale(l_oe, lambda[0])?;
            let t2 = tape.scale(l_se, lambda[1])?;
            let t3 = tape.scale(l_os, lambda[2])?;
            let t4 = tape.scale(l_pre, lambda[3])?;
            let s = tape.add(t1, t2)?;
            let s = tape.add(s, t3)?;
            tape.add(s, t4)
        }
        _ => {
            let os = flat(tape, outs.p_os)?;
            tape.cross_entropy(os, answers)
        }
    }
}

/// Argmax of the final distribution per sample; ties go to the lowest
/// class id. Consumes only `Pre`.
pub fn inference(tape: &Tape, outs: &ForwardOutputs) -> Vec<usize> {
    let c = *tape.shape(outs.pre).last().unwrap();
    let vals = tape.values(outs.pre);
    let b = vals.len() / c;
    (0..b)
        .map(|bi| {
            let row = &vals[bi * c..(bi + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Overall accuracy: correct / total.
pub fn compute_oa(preds: &[usize], targets: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(TensorError::Invalid(format!(
            "oa needs equal non-empty slices, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let correct = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Average accuracy: unweighted mean of per-question-type accuracies.
pub fn compute_aa(preds: &[usize], targets: &[usize], types: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() || preds.len() != types.len() {
        return Err(TensorError::Invalid("aa needs equal non-empty slices".into()));
    }
    let accs = per_type_accuracy(preds, targets, types);
    Ok(accs.values().map(|(acc, _)| acc).sum::<f64>() / accs.len() as f64)
}

/// Per-type `(accuracy, sample count)`, keyed by type id.
pub fn per_type_accuracy(
    preds: &[usize],
    targets: &[usize],
    types: &[usize],
) -> std::collections::BTreeMap<usize, (f64, usize)> {
    let mut hit: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for ((p, t), ty) in preds.iter().zip(targets).zip(types) {
        let e = hit.entry(*ty).or_insert((0, 0));
        e.1 += 1;
        if p == t {
            e.0 += 1;
        }
    }
    hit.into_iter()
        .map(|(ty, (c, n))| (ty, (c as f64 / n as f64, n)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            batch: 2,
            n_tokens: 3,
            grid: 2,
            regions: 2,
            region_patches: 2,
            route_k: 1,
            rqaf_r: 2,
            dim: 8,
            heads: 2,
            rqaf_heads: 2,
            classes: 4,
            mlp_hidden: 8,
            head_hidden: 8,
            vocab: 8,
            lambda: [0.5; 4],
            expert_input: ExpertInput::Enhanced,
            variant,
        }
    }

    fn tiny_batch(cfg: &ModelConfig, seed: u64) -> TrainBatch {
        let mut rng = Rng::new(seed);
        let b = 2;
        let m = cfg.m();
        TrainBatch {
            tokens: (0..b)
                .map(|_| (0..cfg.n_tokens).map(|_| rng.below(cfg.vocab as u64) as usize).collect())
                .collect(),
            optical: rng.uniform_vec(b * m * 3, 0.0, 1.0),
            sar: rng.uniform_vec(b * m, 0.0, 1.0),
            answers: (0..b).map(|_| rng.below(cfg.classes as u64) as usize).collect(),
            types: vec![0, 1],
        }
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = tiny_cfg(Variant::Exp4);
        assert!(cfg.validate().is_ok());
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 2;
        cfg.regions = 3;
        assert!(cfg.validate().is_err());
        cfg.regions = 2;
        cfg.route_k = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_output_shapes() {
        let cfg = tiny_cfg(Variant::Exp4);
        let store = init_params(&cfg, 1);
        let batch = tiny_batch(&cfg, 2);
        let mut tape = Tape::new();
        let (outs, _) = forward_on_tape(&mut tape, &store, &cfg, &batch).unwrap();
        assert_eq!(tape.shape(outs.p_oe.unwrap()), &[2, 1, 4]);
        assert_eq!(tape.shape(outs.p_se.unwrap()), &[2, 1, 4]);
        assert_eq!(tape.shape(outs.p_os), &[2, 1, 4]);
        assert_eq!(tape.shape(outs.pre), &[2, 1, 4]);
        assert_eq!(tape.shape(outs.w_a.unwrap()), &[2, 1, 3]);
        assert_eq!(outs.report.len(), 2);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg(Variant::Exp4);
        let store = init_params(&cfg, 1);
        let batch = tiny_batch(&cfg, 2);
        let run = || {
            let mut tape = Tape::new();
            let (outs, _) = forward_on_tape(&mut tape, &store, &cfg, &batch).unwrap();
            tape.values(outs.pre).to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn every_variant_runs_forward_and_loss() {
        for variant in [
            Variant::Exp1,
            Variant::Exp2,
            Variant::Exp3,
            Variant::Exp4,
            Variant::Add,
            Variant::Concat,
            Variant::Xformer,
            Variant::OptOnly,
            Variant::SarOnly,
        ] {
            let cfg = tiny_cfg(variant);
            cfg.validate().unwrap();
            let store = init_params(&cfg, 3);
            let batch = tiny_batch(&cfg, 4);
            let mut tape = Tape::new();
            let (outs, _) = forward_on_tape(&mut tape, &store, &cfg, &batch).unwrap();
            let loss = total_loss(&mut tape, &outs, &batch.answers, cfg.lambda).unwrap();
            assert!(tape.scalar_value(loss).is_finite(), "{variant:?}");
            assert!(tape.scalar_value(loss) >= 0.0, "{variant:?}");
            tape.backward(loss).unwrap();
            let preds = inference(&tape, &outs);
            assert_eq!(preds.len(), 2);
            assert!(preds.iter().all(|&p| p < cfg.classes));
        }
    }

    #[test]
    fn opt_only_ignores_sar_bitwise() {
        let cfg = tiny_cfg(Variant::OptOnly);
        let store = init_params(&cfg, 5);
        let mut batch = tiny_batch(&cfg, 6);
        let run = |b: &TrainBatch| {
            let mut tape = Tape::new();
            let (outs, _) = forward_on_tape(&mut tape, &store, &cfg, b).unwrap();
            tape.values(outs.pre).to_vec()
        };
        let before = run(&batch);
        for v in batch.sar.iter_mut() {
            *v += 123.0;
        }
        let after = run(&batch);
        for (x, y) in before.iter().zip(&after) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn exp1_and_add_share_architecture() {
        let cfg1 = tiny_cfg(Variant::Exp1);
        let cfg2 = tiny_cfg(Variant::Add);
        let (s1, s2) = (init_params(&cfg1, 7), init_params(&cfg2, 7));
        assert_eq!(s1, s2, "identical parameter sets from the same seed");
        let batch = tiny_batch(&cfg1, 8);
        let mut t1 = Tape::new();
        let (o1, _) = forward_on_tape(&mut t1, &s1, &cfg1, &batch).unwrap();
        let mut t2 = Tape::new();
        let (o2, _) = forward_on_tape(&mut t2, &s2, &cfg2, &batch).unwrap();
        assert_eq!(t1.values(o1.pre), t2.values(o2.pre));
    }

    #[test]
    fn loss_weights_select_terms() {
        let cfg = tiny_cfg(Variant::Exp4);
        let store = init_params(&cfg, 9);
        let batch = tiny_batch(&cfg, 10);
        let mut tape = Tape::new();
        let (outs, _) = forward_on_tape(&mut tape, &store, &cfg, &batch).unwrap();
        let only_pre = total_loss(&mut tape, &outs, &batch.answers, [0.0, 0.0, 0.0, 1.0]).unwrap();
        let c = cfg.classes;
        let pre_flat = tape.reshape(outs.pre, vec![2, c]).unwrap();
        let nll = tape.nll_rows(pre_flat, &batch.answers).unwrap();
        assert_eq!(tape.scalar_value(only_pre), tape.scalar_value(nll));
    }

    #[test]
    fn loss_equal_terms_add_linearly() {
        // With all four weights at 0.5, total = 0.5 * sum of terms.
        let cfg = tiny_cfg(Variant::Exp4);
        let store = init_params(&cfg, 11);
        let batch = tiny_batch(&cfg, 12);
        let mut tape = Tape::new();
        let (outs, _) = forward_on_tape(&mut tape, &store, &cfg, &batch).unwrap();
        let half = total_loss(&mut tape, &outs, &batch.answers, [0.5; 4]).unwrap();
        let full = total_loss(&mut tape, &outs, &batch.answers, [1.0; 4]).unwrap();
        assert!((tape.scalar_value(full) - 2.0 * tape.scalar_value(half)).abs() < 1e-12);
    }

    #[test]
    fn zeroed_classifiers_give_uniform_loss() {
        // Closed form: with zero classifier output layers every expert
        // emits zeros, Pre is uniform, and each term is ln C.
        let cfg = tiny_cfg(Variant::Exp4);
        let mut store = init_params(&cfg, 13);
        for e in ["opt", "sar", "fus"] {
            store.zero(&format!("expert.{e}.head.w2"));
            store.zero(&format!("expert.{e}.head.b2"));
        }
        let batch = tiny_batch(&cfg, 14);
        let mut tape = Tape::new();
        let (outs, _) = forward_on_tape(&mut tape, &store, &cfg, &batch).unwrap();
        let loss = total_loss(&mut tape, &outs, &batch.answers, [0.5; 4]).unwrap();
        let expect = 4.0 * 0.5 * (cfg.classes as f64).ln();
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-6);
    }

    #[test]
    fn inference_reads_only_pre() {
        let mut tape = Tape::new();
        let pre = tape
            .leaf(vec![0.1, 0.7, 0.2, 0.25, 0.25, 0.5], vec![2, 1, 3])
            .unwrap();
        let junk = tape.leaf(vec![9.0, 9.0, 9.0], vec![1, 1, 3]).unwrap();
        let outs = ForwardOutputs {
            p_oe: Some(junk),
            p_se: Some(junk),
            p_os: junk,
            pre,
            w_a: None,
            report: Vec::new(),
        };
        assert_eq!(inference(&tape, &outs), vec![1, 2]);
    }

    #[test]
    fn inference_tie_goes_to_lowest_class() {
        let mut tape = Tape::new();
        let pre = tape.leaf(vec![0.25; 4], vec![1, 1, 4]).unwrap();
        let outs = ForwardOutputs {
            p_oe: None,
            p_se: None,
            p_os: pre,
            pre,
            w_a: None,
            report: Vec::new(),
        };
        assert_eq!(inference(&tape, &outs), vec![0]);
    }

    #[test]
    fn oa_and_aa_basics() {
        assert_eq!(compute_oa(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert_eq!(compute_oa(&[1, 1], &[1, 1]).unwrap(), 1.0);
        assert!(compute_oa(&[], &[]).is_err());
        // Two types with accuracies 1.0 and 0.5 -> 0.75.
        let aa = compute_aa(&[1, 1, 2, 9], &[1, 1, 2, 2], &[0, 0, 1, 1]).unwrap();
        assert_eq!(aa, 0.75);
        // Single type: AA == OA.
        let preds = [1, 2, 1];
        let targets = [1, 1, 1];
        let types = [5, 5, 5];
        assert_eq!(
            compute_aa(&preds, &targets, &types).unwrap(),
            compute_oa(&preds, &targets).unwrap()
        );
    }

    #[test]
    fn oa_is_permutation_invariant_and_aa_ignores_duplication() {
        let preds = [1, 2, 3, 4, 2];
        let targets = [1, 2, 0, 4, 1];
        let types = [0, 0, 1, 1, 1];
        let oa1 = compute_oa(&preds, &targets).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let p2: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let t2: Vec<usize> = perm.iter().map(|&i| targets[i]).collect();
        assert_eq!(oa1, compute_oa(&p2, &t2).unwrap());
        // Duplicating every sample of one type leaves AA unchanged.
        let aa1 = compute_aa(&preds, &targets, &types).unwrap();
        let mut pd = preds.to_vec();
        let mut td = targets.to_vec();
        let mut tyd = types.to_vec();
        for i in 0..5 {
            if types[i] == 0 {
                pd.push(preds[i]);
                td.push(targets[i]);
                tyd.push(0);
            }
        }
        let aa2 = compute_aa(&pd, &td, &tyd).unwrap();
        assert!((aa1 - aa2).abs() < 1e-15);
    }

    #[test]
    fn zeroed_enhancements_reduce_to_gated_experts_on_encoder_features() {
        // Architectural reducibility: zero the CFAR output paths, then the
        // full model's prediction equals experts + gate applied directly
        // to the encoder features, with RQAF fusing un-enhanced patches.
        use crate::cfar::cfar_passthrough_params;
        let cfg = tiny_cfg(Variant::Exp4);
        let mut store = init_params(&cfg, 21);
        for name in cfar_passthrough_params() {
            store.zero(&name);
        }
        let batch = tiny_batch(&cfg, 22);
        let mut tape = Tape::new();
        let (outs, _) = forward_on_tape(&mut tape, &store, &cfg, &batch).unwrap();

        // Reference: hand-wire encoders -> rqaf -> experts -> gate.
        let mut tape2 = Tape::new();
        let bound = store.bind(&mut tape2);
        let ids = bind_model(&bound, &cfg);
        let f_q = embed_question(&mut tape2, &batch.tokens, &ids.enc).unwrap();
        let f_o = embed_patches(&mut tape2, &batch.optical, 2, Modality::Optical, &ids.enc).unwrap();
        let f_s = embed_patches(&mut tape2, &batch.sar, 2, Modality::Sar, &ids.enc).unwrap();
        let fused = rqaf_fuse(&mut tape2, f_q, f_o, f_s, ids.rqaf.as_ref().unwrap()).unwrap();
        let p_oe = expert_predict(&mut tape2, f_q, f_o, ids.expert_opt.as_ref().unwrap()).unwrap();
        let p_se = expert_predict(&mut tape2, f_q, f_s, ids.expert_sar.as_ref().unwrap()).unwrap();
        let p_os = expert_predict(&mut tape2, f_q, fused, &ids.expert_fus).unwrap();
        let (pre, _) = adaptive_fuse(&mut tape2, p_oe, p_se, p_os, ids.gate.as_ref().unwrap()).unwrap();
        for (a, b) in tape.values(outs.pre).iter().zip(tape2.values(pre)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
