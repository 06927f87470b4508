//! Command implementations behind the `tgfnet` binary.
//!
//! Conventions: exit status 0 iff the command completed; diagnostics go
//! to stderr; machine-readable outputs go to files. Every command echoes
//! the full effective configuration into its output directory.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::model::{init_params, Variant};
use crate::params::ParamStore;
use crate::synthvqa::{
    compute_stats, format_stats, generate_dataset, read_dataset, write_dataset, QaRecord,
};
use crate::tensor::Tape;
use crate::trainer::{build_batch, evaluate, train, EvalResult};

pub const CONFIG_ECHO: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.tgfn";
pub const METRICS_FILE: &str = "metrics.csv";

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_ECHO), cfg.render())?;
    Ok(())
}

/// Generate train/val/test dataset files plus a stats report.
pub fn cmd_gen(seed: u64, scenes: u64, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let records = generate_dataset(seed, scenes, &cfg.gen)?;
    fs::create_dir_all(out)?;
    for split in ["train", "val", "test"] {
        let subset: Vec<QaRecord> = records.iter().filter(|r| r.split == split).cloned().collect();
        write_dataset(&subset, &out.join(format!("{split}.jsonl")))?;
    }
    let stats = compute_stats(&records);
    fs::write(out.join("stats.txt"), format_stats(&stats))?;
    echo_config(&cfg, out)?;
    eprintln!(
        "generated {} questions over {scenes} scenes into {}",
        records.len(),
        out.display()
    );
    Ok(())
}

fn read_split(data: &Path, split: &str) -> Result<Vec<QaRecord>> {
    let path = data.join(format!("{split}.jsonl"));
    read_dataset(&path).with_context(|| format!("reading {}", path.display()))
}

/// Train a model on `data/train.jsonl`, validating on `data/val.jsonl`,
/// and write the checkpoint plus a per-epoch metrics log.
pub fn cmd_train(config: Option<&Path>, data: &Path, out: &Path, seed: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let train_set = read_split(data, "train")?;
    let val_set = read_split(data, "val").unwrap_or_default();
    let mut store = init_params(&cfg.model, seed);
    let summary = train(&mut store, &cfg, &train_set, &val_set, seed)?;
    fs::create_dir_all(out)?;
    checkpoint::save(&store, &out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(METRICS_FILE), summary.metrics_csv())?;
    echo_config(&cfg, out)?;
    let last = summary.epochs.last();
    eprintln!(
        "trained {} steps; final train loss {:.4}{}",
        summary.steps,
        last.map(|e| e.train_loss).unwrap_or(f64::NAN),
        last.and_then(|e| e.val_oa)
            .map(|oa| format!("; val OA {oa:.4}"))
            .unwrap_or_default()
    );
    Ok(())
}

/// Find the config for a checkpoint: an explicit path wins, otherwise the
/// provenance echo sitting next to the checkpoint.
fn config_for_checkpoint(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    if let Some(p) = explicit {
        return load_config(Some(p));
    }
    let sibling = checkpoint
        .parent()
        .map(|d| d.join(CONFIG_ECHO))
        .filter(|p| p.exists())
        .ok_or_else(|| {
            anyhow!(
                "no {CONFIG_ECHO} found next to {}; pass --config",
                checkpoint.display()
            )
        })?;
    load_config(Some(&sibling))
}

/// Load a checkpoint and reject it unless its parameter names and shapes
/// match what the config would construct.
fn load_checkpoint_for(cfg: &RunConfig, path: &Path) -> Result<ParamStore> {
    let store = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let expected = init_params(&cfg.model, 0);
    if expected.len() != store.len() {
        bail!(
            "checkpoint has {} parameters, config expects {}",
            store.len(),
            expected.len()
        );
    }
    for (name, p) in expected.iter() {
        if !store.contains(name) {
            bail!("checkpoint is missing parameter {name}");
        }
        let got = store.get(name);
        if got.shape != p.shape {
            bail!(
                "parameter {name} has shape {:?}, config expects {:?}",
                got.shape,
                p.shape
            );
        }
    }
    Ok(store)
}

fn dataset_at(data: &Path) -> Result<Vec<QaRecord>> {
    let path = if data.is_dir() {
        data.join("test.jsonl")
    } else {
        data.to_path_buf()
    };
    read_dataset(&path).with_context(|| format!("reading {}", path.display()))
}

/// Render the evaluation report: OA, AA, and the per-type accuracy table.
pub fn format_eval_report(ev: &EvalResult) -> String {
    use crate::synthvqa::QUESTION_TYPES;
    let mut s = format!("OA: {:.6}\nAA: {:.6}\n\ntype\tcount\taccuracy\n", ev.oa, ev.aa);
    for (ty, (acc, n)) in &ev.per_type {
        let name = QUESTION_TYPES
            .get(*ty)
            .map(|t| t.name())
            .unwrap_or("unknown");
        s.push_str(&format!("{name}\t{n}\t{acc:.6}\n"));
    }
    s
}

/// Evaluate a checkpoint on a dataset file (or a directory's test split).
pub fn cmd_eval(
    checkpoint_path: &Path,
    data: &Path,
    report: Option<&Path>,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = config_for_checkpoint(checkpoint_path, config)?;
    let store = load_checkpoint_for(&cfg, checkpoint_path)?;
    let records = dataset_at(data)?;
    let ev = evaluate(&store, &cfg.model, &records)?;
    let text = format_eval_report(&ev);
    print!("{text}");
    if let Some(path) = report {
        fs::write(path, &text)?;
    }
    Ok(())
}

/// One ablation cell result.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub oa: f64,
    pub aa: f64,
}

/// Train and evaluate one variant for one seed; library entry point also
/// used by the ablation command and the acceptance suite.
pub fn run_variant_cell(
    base: &RunConfig,
    variant: Variant,
    seed: u64,
    train_set: &[QaRecord],
    val_set: &[QaRecord],
    test_set: &[QaRecord],
) -> Result<AblationCell> {
    let mut cfg = base.clone();
    cfg.model.variant = variant;
    let mut store = init_params(&cfg.model, seed);
    train(&mut store, &cfg, train_set, val_set, seed)?;
    let ev = evaluate(&store, &cfg.model, test_set)?;
    Ok(AblationCell {
        variant,
        seed,
        oa: ev.oa,
        aa: ev.aa,
    })
}

/// Comparison table: one row per variant x seed plus per-variant means.
pub fn format_ablation_table(cells: &[AblationCell], variants: &[Variant]) -> String {
    let mut s = String::from("variant,seed,oa,aa\n");
    for c in cells {
        s.push_str(&format!("{},{},{:.6},{:.6}\n", c.variant.name(), c.seed, c.oa, c.aa));
    }
    for v in variants {
        let of: Vec<&AblationCell> = cells.iter().filter(|c| c.variant == *v).collect();
        if of.is_empty() {
            continue;
        }
        let mean = |f: fn(&AblationCell) -> f64| {
            of.iter().map(|c| f(c)).sum::<f64>() / of.len() as f64
        };
        s.push_str(&format!(
            "{},mean,{:.6},{:.6}\n",
            v.name(),
            mean(|c| c.oa),
            mean(|c| c.aa)
        ));
    }
    s
}

/// Train and evaluate the requested variants across seeds and emit the
/// comparison table.
pub fn cmd_ablate(
    variant_names: &[String],
    config: Option<&Path>,
    data: &Path,
    seeds: &str,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let variants: Vec<Variant> = variant_names
        .iter()
        .map(|name| Variant::parse(name).ok_or_else(|| anyhow!("unknown variant \"{name}\"")))
        .collect::<Result<_>>()?;
    if variants.is_empty() {
        bail!("no variants requested");
    }
    let seed_list: Vec<u64> = seeds
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<u64>().map_err(|_| anyhow!("bad seed \"{s}\"")))
        .collect::<Result<_>>()?;
    if seed_list.is_empty() {
        bail!("no seeds requested");
    }
    let train_set = read_split(data, "train")?;
    let val_set = read_split(data, "val").unwrap_or_default();
    let test_set = read_split(data, "test")?;
    let mut cells = Vec::new();
    for &variant in &variants {
        for &seed in &seed_list {
            eprintln!("ablate: {} seed {seed}", variant.name());
            cells.push(run_variant_cell(
                &cfg, variant, seed, &train_set, &val_set, &test_set,
            )?);
        }
    }
    let table = format_ablation_table(&cells, &variants);
    print!("{table}");
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, &table)?;
    }
    Ok(())
}

/// Binary PGM (P5), one byte per pixel.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Min-max normalize scores into 0..=255 bytes; a constant map renders
/// as all zeros.
pub fn scores_to_bytes(scores: &[f64]) -> Vec<u8> {
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .map(|&s| {
            if hi > lo {
                ((s - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Export a sample's region-routing scores (CSV and PGM heat maps
/// upsampled to the patch grid) and its gate values.
pub fn cmd_export_attention(
    checkpoint_path: &Path,
    data: &Path,
    sample_id: usize,
    out: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = config_for_checkpoint(checkpoint_path, config)?;
    let store = load_checkpoint_for(&cfg, checkpoint_path)?;
    let records = dataset_at(data)?;
    let record = records
        .get(sample_id)
        .ok_or_else(|| anyhow!("sample {sample_id} not found ({} records)", records.len()))?;
    let batch = build_batch(&[record], &cfg.model)?;
    let mut tape = Tape::new();
    let (outs, _) = crate::model::forward_on_tape(&mut tape, &store, &cfg.model, &batch)?;
    fs::create_dir_all(out)?;
    let cb = cfg.model.codebook();
    for (bi, block) in outs.report.iter().enumerate() {
        for (name, routing) in [("opt", &block.opt), ("sar", &block.sar)] {
            let scores = &routing.scores; // batch of one
            let csv: String = scores
                .iter()
                .map(|s| format!("{s:.9}"))
                .collect::<Vec<_>>()
                .join(",");
            fs::write(out.join(format!("block{bi}_{name}_scores.csv")), csv + "\n")?;
            // Upsample region scores onto the patch grid.
            let m = cfg.model.m();
            let mut patch_scores = vec![0.0; m];
            for r in 0..cb.num_regions() {
                for &p in cb.patches(r) {
                    patch_scores[p] = scores[r];
                }
            }
            let bytes = scores_to_bytes(&patch_scores);
            write_pgm(
                &out.join(format!("block{bi}_{name}_heat.pgm")),
                cfg.model.grid,
                cfg.model.grid,
                &bytes,
            )?;
        }
    }
    if let Some(w_a) = outs.w_a {
        let gates = tape.values(w_a);
        let csv: String = gates
            .iter()
            .map(|g| format!("{g:.9}"))
            .collect::<Vec<_>>()
            .join(",");
        fs::write(out.join("gates.csv"), csv + "\n")?;
    } else {
        eprintln!("variant {} has no expert gate; gates.csv skipped", cfg.model.variant.name());
    }
    if outs.report.is_empty() {
        eprintln!(
            "variant {} has no routing blocks; no heat maps written",
            cfg.model.variant.name()
        );
    }
    echo_config(&cfg, out)?;
    Ok(())
}
