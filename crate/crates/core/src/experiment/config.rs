//! Experiment configuration: a TOML file with `[model]`, `[optim]`,
//! `[data]`, `[run]` and `[acceptance]` sections. Every key has a default;
//! unknown keys are rejected. Overrides given as `section.key=value` take
//! precedence over the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticTransferSpec;
use crate::error::{Error, Result};
use crate::files::read_string;
use crate::model::{BackboneSpec, ModelSpec, Variant};
use crate::optim::{FreezeProtocol, PlateauConfig, SgdConfig, TrainConfig};
use crate::transfer::TransferConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Mlp,
    TinyCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    /// Hidden widths (MLP) or stage channels (CNN).
    pub widths: Vec<usize>,
    pub variant: Variant,
    pub reduction: usize,
    pub p1: f64,
    pub p2: f64,
    pub lambda: f64,
    /// Backbone stage feeding the auxiliary classifier; unset means the
    /// backbone's default (first stage for the MLP, second for the CNN).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux_tap: Option<usize>,
    pub gate_bias: bool,
    pub residual_sigmoid: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone: BackboneKind::Mlp,
            widths: vec![256, 128],
            variant: Variant::Gtn,
            reduction: 16,
            p1: 0.5,
            p2: 0.7,
            lambda: crate::model::DEFAULT_LAMBDA,
            aux_tap: None,
            gate_bias: true,
            residual_sigmoid: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight decay during source pretraining only.
    pub pretrain_weight_decay: f64,
    pub batch_size: usize,
    /// Target fine-tuning epochs.
    pub epochs: usize,
    pub pretrain_epochs: usize,
    /// Source re-fine-tuning epochs in the forgetting study.
    pub lwf_epochs: usize,
    pub freeze_epochs: usize,
    /// Save a checkpoint every this many epochs; 0 disables it.
    pub checkpoint_every: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_delta: f64,
    pub min_lr: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        let plateau = PlateauConfig::default();
        OptimSection {
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            pretrain_weight_decay: 0.01,
            batch_size: 32,
            epochs: 30,
            pretrain_epochs: 30,
            lwf_epochs: 10,
            freeze_epochs: FreezeProtocol::default().freeze_epochs,
            checkpoint_every: 0,
            patience: plateau.patience,
            factor: plateau.factor,
            min_delta: plateau.min_delta,
            min_lr: plateau.min_lr,
        }
    }
}

impl OptimSection {
    pub fn train_config(&self, epochs: usize, freeze_epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            sgd: SgdConfig {
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            plateau: PlateauConfig {
                factor: self.factor,
                patience: self.patience,
                min_delta: self.min_delta,
                min_lr: self.min_lr,
            },
            freeze: FreezeProtocol { freeze_epochs },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    /// Generated per seed from the synthetic keys below.
    Synthetic,
    /// Dataset directories given by `source_dir` and `target_dir`.
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    pub input_dim: usize,
    pub source_factors: usize,
    pub target_factors: usize,
    pub overlap: f64,
    pub source_classes: usize,
    pub target_classes: usize,
    pub train_per_class: usize,
    pub noise_std: f64,
    pub prototype_scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticTransferSpec::default();
        DataSection {
            kind: DataKind::Synthetic,
            input_dim: s.input_dim,
            source_factors: s.source_factors,
            target_factors: s.target_factors,
            overlap: s.overlap,
            source_classes: s.source_classes,
            target_classes: s.target_classes,
            train_per_class: s.train_per_class,
            noise_std: s.noise_std,
            prototype_scale: s.prototype_scale,
            source_dir: None,
            target_dir: None,
        }
    }
}

impl DataSection {
    /// The generator spec for one seed; the seed also picks the data.
    pub fn synthetic(&self, seed: u64) -> SyntheticTransferSpec {
        SyntheticTransferSpec {
            input_dim: self.input_dim,
            source_factors: self.source_factors,
            target_factors: self.target_factors,
            overlap: self.overlap,
            source_classes: self.source_classes,
            target_classes: self.target_classes,
            train_per_class: self.train_per_class,
            noise_std: self.noise_std,
            prototype_scale: self.prototype_scale,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Worker threads for multi-seed runs; 0 uses every core.
    pub threads: usize,
    /// Samples per gate report.
    pub gate_samples: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: vec![0, 1, 2, 3, 4],
            output: PathBuf::from("runs/default"),
            threads: 0,
            gate_samples: crate::analysis::DEFAULT_GATE_SAMPLES,
        }
    }
}

/// Tolerances and sweep settings of the acceptance suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceptanceSection {
    pub grad_seeds: usize,
    pub grad_tol: f64,
    pub grad_tol_deterministic: f64,
    pub bypass_epochs: usize,
    pub gate_draws: usize,
    pub lambda_sweep: Vec<f64>,
    /// Allowed shortfall of GTN below classic fine-tuning, as a fraction.
    pub transfer_margin: f64,
    pub similar_overlap: f64,
    pub dissimilar_overlap: f64,
    pub presets: Vec<f64>,
    /// Allowed source-accuracy gap to the never-transferred oracle.
    pub lwf_gap: f64,
    pub analysis_tol: f64,
    pub analysis_draws: usize,
}

impl Default for AcceptanceSection {
    fn default() -> Self {
        AcceptanceSection {
            grad_seeds: 5,
            grad_tol: 1e-5,
            grad_tol_deterministic: 1e-6,
            bypass_epochs: 10,
            gate_draws: 10_000,
            lambda_sweep: vec![0.0, 0.1, 0.2, 0.4, 0.8],
            transfer_margin: 0.005,
            similar_overlap: 0.9,
            dissimilar_overlap: 0.1,
            presets: vec![0.9, 0.3, 0.1],
            lwf_gap: 0.02,
            analysis_tol: 1e-12,
            analysis_draws: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub optim: OptimSection,
    pub data: DataSection,
    pub run: RunSection,
    pub acceptance: AcceptanceSection,
}

/// Parses `raw` as a TOML value, falling back to a plain string.
fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' must look like section.key")));
    }
    let section = root
        .entry(parts[0])
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let table = section
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("'{}' is not a section", parts[0])))?;
    table.insert(parts[1].to_string(), parse_override_value(raw));
    Ok(())
}

impl ExperimentConfig {
    /// Defaults, then the optional file, then `overrides` (`section.key`,
    /// value) in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut root = match file {
            Some(p) => {
                let text = read_string(p)?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            apply_override(&mut root, k, v)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".into()));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be positive".into()));
        }
        if self.model.widths.len() < 2 {
            return Err(Error::Config("model.widths needs at least two stages".into()));
        }
        if !(0.0..1.0).contains(&self.model.p1) || !(0.0..1.0).contains(&self.model.p2) {
            return Err(Error::Config("model.p1 and model.p2 must lie in [0, 1)".into()));
        }
        if self.model.reduction == 0 || !(self.model.lambda >= 0.0) {
            return Err(Error::Config("model.reduction must be positive and model.lambda non-negative".into()));
        }
        let o = &self.optim;
        let non_negative = [
            ("optim.lr", o.lr),
            ("optim.weight_decay", o.weight_decay),
            ("optim.pretrain_weight_decay", o.pretrain_weight_decay),
            ("optim.min_delta", o.min_delta),
            ("optim.min_lr", o.min_lr),
        ];
        if let Some((key, v)) = non_negative.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("{key} must be finite and non-negative, got {v}")));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(o.factor > 0.0 && o.factor <= 1.0) {
            return Err(Error::Config("optim.momentum must lie in [0, 1) and optim.factor in (0, 1]".into()));
        }
        if self.data.kind == DataKind::Files && (self.data.source_dir.is_none() || self.data.target_dir.is_none()) {
            return Err(Error::Config("data.kind = \"files\" needs data.source_dir and data.target_dir".into()));
        }
        Ok(())
    }

    /// Sorted, de-duplicated seeds.
    pub fn seeds(&self) -> Vec<u64> {
        let mut s = self.run.seeds.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Backbone for samples of the given shape (`[D]` or `[C, S, S]`).
    pub fn backbone_spec(&self, sample_shape: &[usize]) -> Result<BackboneSpec> {
        let spec = match (self.model.backbone, sample_shape) {
            (BackboneKind::Mlp, &[d]) => BackboneSpec::Mlp {
                input_dim: d,
                widths: self.model.widths.clone(),
            },
            (BackboneKind::TinyCnn, &[c, h, w]) if h == w => BackboneSpec::TinyCnn {
                in_channels: c,
                image_size: h,
                channels: self.model.widths.clone(),
            },
            (kind, shape) => {
                return Err(Error::Config(format!(
                    "backbone {kind:?} cannot take samples of shape {shape:?}"
                )))
            }
        };
        spec.validate(self.aux_tap())?;
        Ok(spec)
    }

    pub fn aux_tap(&self) -> usize {
        self.model.aux_tap.unwrap_or(match self.model.backbone {
            BackboneKind::Mlp => 0,
            BackboneKind::TinyCnn => 1,
        })
    }

    pub fn transfer_config(&self, channels: usize) -> TransferConfig {
        TransferConfig {
            reduction: self.model.reduction,
            p1: self.model.p1,
            p2: self.model.p2,
            bias: self.model.gate_bias,
            residual_sigmoid: self.model.residual_sigmoid,
            ..TransferConfig::new(channels)
        }
    }

    pub fn target_spec(&self, backbone: BackboneSpec, variant: Variant, num_classes: usize) -> ModelSpec {
        let t = self.transfer_config(backbone.feature_dim());
        variant.model_spec(backbone, self.aux_tap(), num_classes, &t, self.model.lambda)
    }
}
