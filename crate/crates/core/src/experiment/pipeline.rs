//! In-memory training pipelines shared by the commands and the acceptance
//! suite. Every random choice of a seed's run derives from `Rng::new(seed)`
//! through labelled child streams.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{generate_synthetic, load_dataset, SplitDataset};
use crate::error::{Result, ResultExt};
use crate::model::checkpoint::save_checkpoint;
use crate::model::{Backbone, GtnModel, ModelSpec, Variant};
use crate::optim::{evaluate, fit, EpochStats, EvalStats, TrainConfig, TrainingLog};
use crate::tensor::Rng;

use super::config::{DataKind, ExperimentConfig};

pub struct TaskData {
    pub source: SplitDataset,
    pub target: SplitDataset,
}

/// Synthetic data is generated from the seed; file data ignores it.
pub fn load_task(cfg: &ExperimentConfig, seed: u64) -> Result<TaskData> {
    match cfg.data.kind {
        DataKind::Synthetic => {
            let t = generate_synthetic(&cfg.data.synthetic(seed))?;
            Ok(TaskData {
                source: t.source,
                target: t.target,
            })
        }
        DataKind::Files => {
            let dir = |d: &Option<std::path::PathBuf>| d.clone().expect("validated config");
            Ok(TaskData {
                source: load_dataset(&dir(&cfg.data.source_dir)).context("source dataset")?,
                target: load_dataset(&dir(&cfg.data.target_dir)).context("target dataset")?,
            })
        }
    }
}

pub struct Trained {
    pub model: GtnModel,
    pub log: TrainingLog,
    pub test: EvalStats,
}

/// Where periodic checkpoints go, if anywhere: `dir/epoch-{e}` every
/// `every` epochs.
#[derive(Debug, Clone, Copy)]
pub struct Checkpointing<'a> {
    pub dir: &'a Path,
    pub every: usize,
}

fn run_fit(
    model: &mut GtnModel,
    data: &SplitDataset,
    train: &TrainConfig,
    rng: &Rng,
    checkpoints: Option<Checkpointing>,
) -> Result<TrainingLog> {
    fit(model, data, train, rng, |stats: &EpochStats, m: &GtnModel| match checkpoints {
        Some(c) if c.every > 0 && stats.epoch % c.every == 0 => {
            let meta = BTreeMap::from([
                ("epoch".to_string(), serde_json::json!(stats.epoch)),
                ("val_acc".to_string(), serde_json::json!(stats.val_acc)),
            ]);
            save_checkpoint(m, &c.dir.join(format!("epoch-{}", stats.epoch)), meta)
        }
        _ => Ok(()),
    })
}

/// Backbone plus plain classifier trained on the source task.
pub fn pretrain(
    cfg: &ExperimentConfig,
    source: &SplitDataset,
    seed: u64,
    checkpoints: Option<Checkpointing>,
) -> Result<Trained> {
    let root = Rng::new(seed);
    let backbone = cfg.backbone_spec(source.train.sample_shape())?;
    let spec = ModelSpec::plain(backbone, cfg.aux_tap(), source.num_classes());
    let mut model = GtnModel::new(spec, &root.child("pretrain.init"))?;
    let mut train = cfg.optim.train_config(cfg.optim.pretrain_epochs, 0);
    train.sgd.weight_decay = cfg.optim.pretrain_weight_decay;
    let log = run_fit(&mut model, source, &train, &root.child("pretrain.train"), checkpoints).context("pretraining")?;
    let test = evaluate(&mut model, &source.test, 256)?;
    Ok(Trained { model, log, test })
}

/// New heads and the variant's neck on a pretrained backbone, trained on
/// the target with the freeze-then-joint protocol. All variants of a seed
/// share the same head initialisation and shuffling streams.
pub fn transfer(
    cfg: &ExperimentConfig,
    backbone: Backbone,
    target: &SplitDataset,
    variant: Variant,
    seed: u64,
    checkpoints: Option<Checkpointing>,
) -> Result<Trained> {
    let root = Rng::new(seed);
    let spec = cfg.target_spec(backbone.spec().clone(), variant, target.num_classes());
    let mut model = GtnModel::with_backbone(spec, backbone, &root.child("transfer.init"))?;
    let train = cfg.optim.train_config(cfg.optim.epochs, cfg.optim.freeze_epochs);
    let log = run_fit(&mut model, target, &train, &root.child("transfer.train"), checkpoints)
        .with_context(|| format!("{variant} transfer"))?;
    let test = evaluate(&mut model, &target.test, 256)?;
    Ok(Trained { model, log, test })
}

/// Forgetting study: a fresh source head replaces the target heads, the
/// backbone stays frozen, and the neck plus the new head are re-fine-tuned
/// on the source for `optim.lwf_epochs` epochs. The model is first rebuilt
/// from its parameters alone, so an in-memory model and its checkpoint give
/// the same run.
pub fn refinetune_source(
    cfg: &ExperimentConfig,
    model: &GtnModel,
    source: &SplitDataset,
    seed: u64,
    checkpoints: Option<Checkpointing>,
) -> Result<Trained> {
    let root = Rng::new(seed);
    let mut model = rebuild(model, &root.child("lwf.rebuild"))?;
    model.replace_heads(source.num_classes(), &root.child("lwf.init"))?;
    model.remove_aux_head();
    let train = cfg.optim.train_config(cfg.optim.lwf_epochs, usize::MAX);
    let log = run_fit(&mut model, source, &train, &root.child("lwf.train"), checkpoints).context("source re-fine-tuning")?;
    let test = evaluate(&mut model, &source.test, 256)?;
    Ok(Trained { model, log, test })
}

/// A copy with the same parameters and buffers and fresh random streams.
pub fn rebuild(model: &GtnModel, rng: &Rng) -> Result<GtnModel> {
    let mut copy = GtnModel::new(model.spec().clone(), rng)?;
    copy.load_state(&model.state())?;
    Ok(copy)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
