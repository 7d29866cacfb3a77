//! SGD, the plateau learning-rate schedule, the freeze-then-joint protocol
//! and the epoch loop.

mod schedule;
mod sgd;

pub use schedule::{schedule_lrs, PlateauConfig, PlateauSchedule};
pub use sgd::{Sgd, SgdConfig};

use serde::{Deserialize, Serialize};

use crate::analysis::mean_std;
use crate::data::{Dataset, SplitDataset};
use crate::error::{Error, Result, ResultExt};
use crate::layers::{cross_entropy_terms, Mode};
use crate::model::GtnModel;
use crate::tensor::{Rng, Tensor};

/// Backbone frozen for the first `freeze_epochs` epochs, then every group
/// trains at the same rate. The transfer module is never frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeProtocol {
    pub freeze_epochs: usize,
}

impl Default for FreezeProtocol {
    fn default() -> Self {
        FreezeProtocol { freeze_epochs: 5 }
    }
}

impl FreezeProtocol {
    /// `epoch` counts from zero.
    pub fn backbone_frozen(&self, epoch: usize) -> bool {
        epoch < self.freeze_epochs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub plateau: PlateauConfig,
    pub freeze: FreezeProtocol,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            sgd: SgdConfig::default(),
            plateau: PlateauConfig::default(),
            freeze: FreezeProtocol::default(),
        }
    }
}

/// Averages over one training pass (per-sample weighted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainPass {
    pub loss: f64,
    pub accuracy: f64,
    pub main_loss: f64,
    pub aux_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    /// Mean and population std of all eval-mode gate entries, if the model
    /// has a transfer module.
    pub gate_mean: Option<f64>,
    pub gate_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Counts from one.
    pub epoch: usize,
    /// Rate used during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub main_loss: f64,
    pub aux_loss: f64,
    pub gate_mean: Option<f64>,
    pub gate_std: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochStats>,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc,main_loss,aux_loss,gate_mean,gate_std";

impl TrainingLog {
    /// One row per epoch; missing gate statistics are empty fields.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = format!("{LOG_HEADER}\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.lr,
                e.train_loss,
                e.train_acc,
                e.val_loss,
                e.val_acc,
                e.main_loss,
                e.aux_loss,
                opt(e.gate_mean),
                opt(e.gate_std)
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    Ok(logits
        .argmax_rows()?
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count())
}

/// One shuffled pass of mini-batch SGD over `data`.
pub fn train_epoch(
    model: &mut GtnModel,
    data: &Dataset,
    sgd: &mut Sgd,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<TrainPass> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let order = rng.permutation(data.len());
    let (mut loss, mut main, mut aux, mut correct) = (0.0, 0.0, 0.0, 0usize);
    for (b, chunk) in order.chunks(batch_size).enumerate() {
        let mut step = || -> Result<_> {
            let (x, y) = data.batch(chunk)?;
            model.zero_grad();
            let out = model.forward(&x, Mode::Train)?;
            let l = model.backward(&y)?;
            sgd.step(model)?;
            Ok((l, count_correct(&out.main_logits, &y)?))
        };
        let (l, c) = step().with_context(|| format!("batch {b}"))?;
        let n = chunk.len() as f64;
        loss += l.total * n;
        main += l.main * n;
        aux += l.aux * n;
        correct += c;
    }
    let n = data.len() as f64;
    Ok(TrainPass {
        loss: loss / n,
        accuracy: correct as f64 / n,
        main_loss: main / n,
        aux_loss: aux / n,
    })
}

/// Eval-mode loss, accuracy and gate summary, in fixed batch order.
pub fn evaluate(model: &mut GtnModel, data: &Dataset, batch_size: usize) -> Result<EvalStats> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    let mut gates = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let out = model.forward(&x, Mode::Eval)?;
        loss += cross_entropy_terms(&out.main_logits, &y)?.iter().sum::<f64>();
        correct += count_correct(&out.main_logits, &y)?;
        if let Some(g) = out.gate {
            gates.extend_from_slice(g.data());
        }
    }
    let n = data.len() as f64;
    let (gate_mean, gate_std) = if gates.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&gates);
        (Some(m), Some(s))
    };
    Ok(EvalStats {
        loss: loss / n,
        accuracy: correct as f64 / n,
        gate_mean,
        gate_std,
    })
}

pub fn accuracy(model: &mut GtnModel, data: &Dataset) -> Result<f64> {
    Ok(evaluate(model, data, 256)?.accuracy)
}

/// Trains on `data.train` for `config.epochs` epochs with validation-error
/// plateau decay and the freeze protocol. Epoch `e` shuffles with the child
/// stream `("epoch", e)` of `rng`. `on_epoch` runs after each epoch (e.g. to
/// write checkpoints).
pub fn fit(
    model: &mut GtnModel,
    data: &SplitDataset,
    config: &TrainConfig,
    rng: &Rng,
    mut on_epoch: impl FnMut(&EpochStats, &GtnModel) -> Result<()>,
) -> Result<TrainingLog> {
    let mut sgd = Sgd::new(config.sgd)?;
    let mut schedule = PlateauSchedule::new(config.sgd.lr, config.plateau)?;
    let mut log = TrainingLog::default();
    for epoch in 0..config.epochs {
        model.set_backbone_frozen(config.freeze.backbone_frozen(epoch));
        let lr = sgd.lr;
        let pass = train_epoch(model, &data.train, &mut sgd, config.batch_size, &mut rng.child_indexed("epoch", epoch as u64))
            .with_context(|| format!("epoch {}", epoch + 1))?;
        let val = evaluate(model, &data.val, 256)?;
        sgd.lr = schedule.observe(1.0 - val.accuracy);
        let stats = EpochStats {
            epoch: epoch + 1,
            lr,
            train_loss: pass.loss,
            train_acc: pass.accuracy,
            val_loss: val.loss,
            val_acc: val.accuracy,
            main_loss: pass.main_loss,
            aux_loss: pass.aux_loss,
            gate_mean: val.gate_mean,
            gate_std: val.gate_std,
        };
        on_epoch(&stats, model)?;
        log.epochs.push(stats);
    }
    model.set_backbone_frozen(false);
    Ok(log)
}

#[cfg(test)]
mod tests;
