//! The subcommands behind the CLI. Each writes into `run.output`:
//!
//! ```text
//! config.toml  seeds.txt  VERSION
//! pretrain_summary.{csv,json}  transfer-<variant>_summary.{csv,json}  lwf_report.{csv,json}
//! seed-<s>/data/{source,target}/          (synthetic data only)
//! seed-<s>/pretrain/                      checkpoint/ training_log.csv metrics.json config.toml
//! seed-<s>/transfer-<variant>/            ... gates/ features.csv
//! seed-<s>/lwf-<variant>/                 ...
//! ```
//!
//! Seeds run in parallel; every per-seed result is independent of the
//! schedule and summaries are sorted by seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{export_features, gate_report};
use crate::data::{save_dataset, Dataset, Split};
use crate::error::{Error, Result, ResultExt};
use crate::files::{write_bytes, write_json};
use crate::model::checkpoint::{load_backbone, load_checkpoint, read_manifest, save_checkpoint, MANIFEST_FILE};
use crate::model::{GtnModel, Variant};
use crate::optim::{evaluate, EvalStats};
use crate::tensor::Rng;

use super::config::{DataKind, ExperimentConfig};
use super::pipeline::{load_task, mean, pretrain, refinetune_source, transfer, Checkpointing, Trained};

/// Which task of a seed's source/target pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Source,
    Target,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Source => "source",
            Task::Target => "target",
        }
    }
}

/// Runs `f` for every configured seed, in parallel on `run.threads` workers
/// (0 = all cores). Results come back sorted by seed.
pub fn for_each_seed<T: Send>(cfg: &ExperimentConfig, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let seeds = cfg.seeds();
    let run = || {
        seeds
            .par_iter()
            .map(|&s| f(s).with_context(|| format!("seed {s}")))
            .collect::<Result<Vec<_>>>()
    };
    if cfg.run.threads == 0 {
        return run();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.threads)
        .build()
        .map_err(|e| Error::Config(format!("run.threads: {e}")))?
        .install(run)
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.run.output.join(format!("seed-{seed}"))
}

/// Writes the resolved config, the seed list and the version string into
/// the run directory.
pub fn archive_run(cfg: &ExperimentConfig, version: &str) -> Result<()> {
    let out = &cfg.run.output;
    write_bytes(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let seeds: String = cfg.seeds().iter().map(|s| format!("{s}\n")).collect();
    write_bytes(&out.join("seeds.txt"), seeds.as_bytes())?;
    write_bytes(&out.join("VERSION"), format!("{version}\n").as_bytes())
}

fn checkpointing(cfg: &ExperimentConfig, stage: &Path) -> Option<PathBuf> {
    (cfg.optim.checkpoint_every > 0).then(|| stage.join("checkpoints"))
}

fn overlap(cfg: &ExperimentConfig) -> Option<f64> {
    (cfg.data.kind == DataKind::Synthetic).then_some(cfg.data.overlap)
}

/// Per-stage record written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub seed: u64,
    pub stage: String,
    pub variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<f64>,
    pub epochs: usize,
    pub final_val_acc: Option<f64>,
    pub test: EvalStats,
}

fn write_stage(cfg: &ExperimentConfig, dir: &Path, stage: &str, seed: u64, trained: &Trained) -> Result<StageMetrics> {
    let metrics = StageMetrics {
        seed,
        stage: stage.into(),
        variant: trained.model.variant_name().into(),
        overlap: overlap(cfg),
        epochs: trained.log.epochs.len(),
        final_val_acc: trained.log.last().map(|e| e.val_acc),
        test: trained.test.clone(),
    };
    let meta = BTreeMap::from([
        ("seed".to_string(), serde_json::json!(seed)),
        ("stage".to_string(), serde_json::json!(stage)),
        ("test_acc".to_string(), serde_json::json!(trained.test.accuracy)),
    ]);
    save_checkpoint(&trained.model, &dir.join("checkpoint"), meta)?;
    write_bytes(&dir.join("training_log.csv"), trained.log.to_csv().as_bytes())?;
    write_bytes(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// `seed,<columns...>` rows plus a final `mean` row.
fn summary_csv(columns: &[&str], rows: &[(u64, Vec<f64>)]) -> String {
    let mut out = format!("seed,{}\n", columns.join(","));
    for (seed, values) in rows {
        let v: Vec<String> = values.iter().map(|x| x.to_string()).collect();
        out.push_str(&format!("{seed},{}\n", v.join(",")));
    }
    let means: Vec<String> = (0..columns.len())
        .map(|j| mean(&rows.iter().map(|(_, v)| v[j]).collect::<Vec<_>>()).to_string())
        .collect();
    out.push_str(&format!("mean,{}\n", means.join(",")));
    out
}

fn write_summary<T: Serialize>(cfg: &ExperimentConfig, name: &str, csv: &str, records: &T) -> Result<()> {
    write_bytes(&cfg.run.output.join(format!("{name}.csv")), csv.as_bytes())?;
    write_json(&cfg.run.output.join(format!("{name}.json")), records)
}

/// Trains the backbone and a plain classifier on each seed's source task.
pub fn cmd_pretrain(cfg: &ExperimentConfig, version: &str) -> Result<Vec<StageMetrics>> {
    archive_run(cfg, version)?;
    let records = for_each_seed(cfg, |seed| {
        let data = load_task(cfg, seed)?;
        let sdir = seed_dir(cfg, seed);
        if cfg.data.kind == DataKind::Synthetic {
            save_dataset(&data.source, &sdir.join("data/source"))?;
            save_dataset(&data.target, &sdir.join("data/target"))?;
        }
        let stage = sdir.join("pretrain");
        let ckpt = checkpointing(cfg, &stage);
        let hook = ckpt.as_deref().map(|dir| Checkpointing {
            dir,
            every: cfg.optim.checkpoint_every,
        });
        let trained = pretrain(cfg, &data.source, seed, hook)?;
        write_stage(cfg, &stage, "pretrain", seed, &trained)
    })?;
    let rows: Vec<_> = records
        .iter()
        .map(|m| (m.seed, vec![m.final_val_acc.unwrap_or(f64::NAN), m.test.accuracy]))
        .collect();
    write_summary(cfg, "pretrain_summary", &summary_csv(&["val_acc", "test_acc"], &rows), &records)?;
    Ok(records)
}

/// A checkpoint directory itself, or the seed's `pretrain` checkpoint
/// under a run directory.
pub fn resolve_checkpoint(root: &Path, seed: u64, stage: &str) -> PathBuf {
    if root.join(MANIFEST_FILE).is_file() {
        root.to_path_buf()
    } else {
        root.join(format!("seed-{seed}")).join(stage).join("checkpoint")
    }
}

/// Fine-tunes `variant` on each seed's target task from the pretrained
/// backbone found under `source` (default: the run directory).
pub fn cmd_transfer(
    cfg: &ExperimentConfig,
    version: &str,
    variant: Variant,
    source: Option<&Path>,
) -> Result<Vec<StageMetrics>> {
    archive_run(cfg, version)?;
    let root = source.unwrap_or(&cfg.run.output);
    let records = for_each_seed(cfg, |seed| {
        let data = load_task(cfg, seed)?;
        let spec = cfg.backbone_spec(data.target.train.sample_shape())?;
        let ckpt = resolve_checkpoint(root, seed, "pretrain");
        let backbone = load_backbone(&ckpt, &spec, cfg.aux_tap())?;
        let stage = seed_dir(cfg, seed).join(format!("transfer-{variant}"));
        let periodic = checkpointing(cfg, &stage);
        let hook = periodic.as_deref().map(|dir| Checkpointing {
            dir,
            every: cfg.optim.checkpoint_every,
        });
        let mut trained = transfer(cfg, backbone, &data.target, variant, seed, hook)?;
        let metrics = write_stage(cfg, &stage, &format!("transfer-{variant}"), seed, &trained)?;
        write_analysis(cfg, &mut trained.model, &data.target.test, "target test", seed, &stage)?;
        Ok(metrics)
    })?;
    let rows: Vec<_> = records
        .iter()
        .map(|m| {
            let gate = m.test.gate_mean.unwrap_or(f64::NAN);
            (m.seed, vec![m.final_val_acc.unwrap_or(f64::NAN), m.test.accuracy, gate])
        })
        .collect();
    let csv = summary_csv(&["val_acc", "test_acc", "gate_mean"], &rows);
    write_summary(cfg, &format!("transfer-{variant}_summary"), &csv, &records)?;
    Ok(records)
}

/// Gate report (if the model has a transfer module), features and the main
/// classifier's weights of `model` on `data`.
fn write_analysis(cfg: &ExperimentConfig, model: &mut GtnModel, data: &Dataset, name: &str, seed: u64, dir: &Path) -> Result<()> {
    if model.transfer().is_some() {
        let mut rng = Rng::new(seed).child("analysis.gates");
        gate_report(model, data, cfg.run.gate_samples, &mut rng, name)?.write(&dir.join("gates"))?;
    }
    export_features(model, data, &dir.join("features.csv"))?;
    write_bytes(
        &dir.join("classifier_weights.csv"),
        model.main_head().weight.value.to_csv().as_bytes(),
    )
}

/// Loads a checkpoint and evaluates it on one split of the seed's task.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, task: Task, split: Split, seed: u64) -> Result<EvalStats> {
    let (mut model, _) = load_checkpoint(checkpoint)?;
    let data = load_task(cfg, seed)?;
    let ds = match task {
        Task::Source => data.source,
        Task::Target => data.target,
    };
    if ds.num_classes() != model.num_classes() {
        return Err(Error::Incompatible(format!(
            "{}: {} classes, but the {} task has {}",
            checkpoint.display(),
            model.num_classes(),
            task.name(),
            ds.num_classes()
        )));
    }
    evaluate(&mut model, ds.get(split), 256)
}

/// Source test accuracy of the never-transferred model and of each
/// re-fine-tuned target model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LwfRecord {
    pub seed: u64,
    pub oracle: f64,
    /// Variant name to source accuracy after re-fine-tuning.
    pub refinetuned: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LwfReport {
    pub records: Vec<LwfRecord>,
    pub mean_oracle: f64,
    pub mean_refinetuned: BTreeMap<String, f64>,
    /// `mean_oracle - mean_refinetuned` per variant.
    pub gap: BTreeMap<String, f64>,
}

impl LwfReport {
    pub fn new(records: Vec<LwfRecord>) -> Self {
        let mean_oracle = mean(&records.iter().map(|r| r.oracle).collect::<Vec<_>>());
        let names: Vec<String> = records.first().map(|r| r.refinetuned.keys().cloned().collect()).unwrap_or_default();
        let mean_refinetuned: BTreeMap<String, f64> = names
            .iter()
            .map(|n| (n.clone(), mean(&records.iter().map(|r| r.refinetuned[n]).collect::<Vec<_>>())))
            .collect();
        let gap = mean_refinetuned.iter().map(|(n, v)| (n.clone(), mean_oracle - v)).collect();
        LwfReport {
            records,
            mean_oracle,
            mean_refinetuned,
            gap,
        }
    }

    pub fn to_csv(&self) -> String {
        let names: Vec<&String> = self.mean_refinetuned.keys().collect();
        let mut cols = vec!["oracle".to_string()];
        cols.extend(names.iter().map(|n| n.to_string()));
        let rows: Vec<_> = self
            .records
            .iter()
            .map(|r| {
                let mut v = vec![r.oracle];
                v.extend(names.iter().map(|n| r.refinetuned[*n]));
                (r.seed, v)
            })
            .collect();
        let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
        summary_csv(&cols, &rows)
    }
}

/// Forgetting study. `target` is a run directory holding
/// `seed-<s>/transfer-<variant>/checkpoint` for gtn and classic-ft, or a
/// single target checkpoint. `source` locates the pretrained checkpoint as
/// in [`cmd_transfer`].
pub fn cmd_lwf(cfg: &ExperimentConfig, version: &str, source: Option<&Path>, target: Option<&Path>) -> Result<LwfReport> {
    archive_run(cfg, version)?;
    let source_root = source.unwrap_or(&cfg.run.output);
    let target_root = target.unwrap_or(&cfg.run.output);
    let records = for_each_seed(cfg, |seed| {
        let data = load_task(cfg, seed)?;
        let (mut oracle_model, _) = load_checkpoint(&resolve_checkpoint(source_root, seed, "pretrain"))?;
        let oracle = evaluate(&mut oracle_model, &data.source.test, 256)?.accuracy;
        let targets: Vec<PathBuf> = if target_root.join(MANIFEST_FILE).is_file() {
            vec![target_root.to_path_buf()]
        } else {
            [Variant::Gtn, Variant::ClassicFt]
                .iter()
                .map(|v| seed_dir_in(target_root, seed).join(format!("transfer-{v}/checkpoint")))
                .collect()
        };
        let mut refinetuned = BTreeMap::new();
        for ckpt in targets {
            let variant = read_manifest(&ckpt)?.variant;
            let (model, _) = load_checkpoint(&ckpt)?;
            let stage = seed_dir(cfg, seed).join(format!("lwf-{variant}"));
            let periodic = checkpointing(cfg, &stage);
            let hook = periodic.as_deref().map(|dir| Checkpointing {
                dir,
                every: cfg.optim.checkpoint_every,
            });
            let trained = refinetune_source(cfg, &model, &data.source, seed, hook)
                .with_context(|| format!("re-fine-tuning {}", ckpt.display()))?;
            write_stage(cfg, &stage, &format!("lwf-{variant}"), seed, &trained)?;
            refinetuned.insert(variant, trained.test.accuracy);
        }
        Ok(LwfRecord {
            seed,
            oracle,
            refinetuned,
        })
    })?;
    let report = LwfReport::new(records);
    write_summary(cfg, "lwf_report", &report.to_csv(), &report)?;
    Ok(report)
}

fn seed_dir_in(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// Gate report, features and classifier weights of a checkpoint on one
/// split of the seed's task, written to `out` (default: `analysis/` beside
/// the checkpoint).
pub fn cmd_analyze(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: Option<&Path>,
    task: Task,
    split: Split,
    seed: u64,
) -> Result<PathBuf> {
    let (mut model, _) = load_checkpoint(checkpoint)?;
    let data = load_task(cfg, seed)?;
    let ds = match task {
        Task::Source => data.source,
        Task::Target => data.target,
    };
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join("analysis"),
    };
    let name = format!("{} {}", task.name(), split.name());
    write_analysis(cfg, &mut model, ds.get(split), &name, seed, &dir)?;
    Ok(dir)
}
