//! The transfer module: a learned per-channel gate applied to pre-trained
//! features.
//!
//! For features `x: [B × C]` the gate is
//!
//! ```text
//! gate = drop₂(sigmoid(fc₂(drop₁(relu(fc₁(x))))))
//! ```
//!
//! with `fc₁: C → ⌈C/r⌉` and `fc₂: ⌈C/r⌉ → C`, and the module output is
//! `y = gate ⊙ x`. Dropout is inverted, so in evaluation mode the gate lies
//! in `[0, 1]`; in training mode kept gate entries are scaled by
//! `1 / (1 - p₂)` and may exceed 1.
//!
//! [`GateVariant`] selects the ablations: the residual form `y = F(x) + x`,
//! and the two gate-free baselines where the module is the identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{missing_forward, Dropout, Layer, Linear, Mode, Param, Relu, Sigmoid};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateVariant {
    /// `y = F(x) ⊙ x`.
    Gated,
    /// `y = F(x) + x`.
    Residual,
    /// Gate fixed to one: classic fine-tuning.
    Identity,
    /// Gate fixed to one with a permanently frozen backbone.
    FixedFeature,
}

impl GateVariant {
    pub fn is_bypass(self) -> bool {
        matches!(self, GateVariant::Identity | GateVariant::FixedFeature)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub channels: usize,
    pub reduction: usize,
    /// Dropout after `relu(fc₁ x)`.
    pub p1: f64,
    /// Dropout after the sigmoid.
    pub p2: f64,
    pub bias: bool,
    /// Keep the sigmoid in the residual variant's branch.
    pub residual_sigmoid: bool,
    pub variant: GateVariant,
}

impl TransferConfig {
    pub fn new(channels: usize) -> Self {
        TransferConfig {
            channels,
            reduction: 16,
            p1: 0.5,
            p2: 0.7,
            bias: true,
            residual_sigmoid: true,
            variant: GateVariant::Gated,
        }
    }

    pub fn hidden(&self) -> usize {
        hidden_width(self.channels, self.reduction)
    }
}

/// `max(1, ⌈C / r⌉)`.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction.max(1)).max(1)
}

/// Trainable parameters of the gate: `2·C·h` weights plus `h + C` biases.
pub fn transfer_param_count(channels: usize, reduction: usize, bias: bool) -> usize {
    let h = hidden_width(channels, reduction);
    2 * channels * h + if bias { h + channels } else { 0 }
}

#[derive(Debug, Clone)]
pub struct GateOutput {
    pub y: Tensor,
    pub gate: Tensor,
}

pub struct TransferModule {
    config: TransferConfig,
    fc1: Linear,
    relu: Relu,
    drop1: Dropout,
    fc2: Linear,
    sigmoid: Sigmoid,
    drop2: Dropout,
    cache: Option<(Tensor, Tensor)>,
}

impl TransferModule {
    pub fn new(config: TransferConfig, rng: &mut Rng) -> Result<Self> {
        if config.channels == 0 || config.reduction == 0 {
            return Err(Error::InvalidArgument("transfer module needs C > 0 and r > 0".into()));
        }
        let h = config.hidden();
        let mut init = rng.child("transfer.init");
        let fc1 = Linear::new(config.channels, h, config.bias, &mut init);
        let fc2 = Linear::new(h, config.channels, config.bias, &mut init);
        Ok(TransferModule {
            drop1: Dropout::new(config.p1, rng.child("transfer.drop1"))?,
            drop2: Dropout::new(config.p2, rng.child("transfer.drop2"))?,
            config,
            fc1,
            relu: Relu::new(),
            fc2,
            sigmoid: Sigmoid::new(),
            cache: None,
        })
    }

    pub fn config(&self) -> &TransferConfig {
        &self.config
    }

    pub fn variant(&self) -> GateVariant {
        self.config.variant
    }

    pub fn fc1(&self) -> &Linear {
        &self.fc1
    }

    pub fn fc2(&self) -> &Linear {
        &self.fc2
    }

    pub fn fc1_mut(&mut self) -> &mut Linear {
        &mut self.fc1
    }

    pub fn fc2_mut(&mut self) -> &mut Linear {
        &mut self.fc2
    }

    fn uses_sigmoid(&self) -> bool {
        self.config.variant != GateVariant::Residual || self.config.residual_sigmoid
    }

    /// The branch `F(x)`.
    fn branch_forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.fc1.forward(x, mode)?;
        let h = self.relu.forward(&h, mode)?;
        let h = self.drop1.forward(&h, mode)?;
        let mut z = self.fc2.forward(&h, mode)?;
        if self.uses_sigmoid() {
            z = self.sigmoid.forward(&z, mode)?;
        }
        self.drop2.forward(&z, mode)
    }

    fn branch_backward(&mut self, d_branch: &Tensor) -> Result<Tensor> {
        let mut g = self.drop2.backward(d_branch)?;
        if self.uses_sigmoid() {
            g = self.sigmoid.backward(&g)?;
        }
        let g = self.fc2.backward(&g)?;
        let g = self.drop1.backward(&g)?;
        let g = self.relu.backward(&g)?;
        self.fc1.backward(&g)
    }

    /// Returns the module output and the gate (the branch `F(x)` for the
    /// residual variant, all ones for the bypass variants).
    pub fn gate_forward(&mut self, x: &Tensor, mode: Mode) -> Result<GateOutput> {
        let (_, c) = x.dims2()?;
        if c != self.config.channels {
            return Err(Error::dim("transfer module channels", x.shape(), &[self.config.channels]));
        }
        let (y, gate) = match self.config.variant {
            GateVariant::Identity | GateVariant::FixedFeature => (x.clone(), Tensor::ones(x.shape())),
            GateVariant::Gated => {
                let gate = self.branch_forward(x, mode)?;
                (gate.mul(x)?, gate)
            }
            GateVariant::Residual => {
                let f = self.branch_forward(x, mode)?;
                (f.add(x)?, f)
            }
        };
        self.cache = Some((x.clone(), gate.clone()));
        Ok(GateOutput { y, gate })
    }

    /// dL/dx given dL/dy; accumulates fc₁/fc₂ gradients.
    pub fn gate_backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let (x, gate) = self.cache.as_ref().ok_or_else(|| missing_forward("transfer module"))?;
        if dy.shape() != x.shape() {
            return Err(Error::dim("transfer module backward", dy.shape(), x.shape()));
        }
        match self.config.variant {
            GateVariant::Identity | GateVariant::FixedFeature => Ok(dy.clone()),
            GateVariant::Gated => {
                let direct = dy.mul(gate)?;
                let d_gate = dy.mul(x)?;
                direct.add(&self.branch_backward(&d_gate)?)
            }
            GateVariant::Residual => {
                let through = self.branch_backward(dy)?;
                dy.add(&through)
            }
        }
    }

    pub fn last_gate(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|(_, g)| g)
    }
}

impl Layer for TransferModule {
    fn kind(&self) -> &'static str {
        "transfer"
    }

    fn hyper(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("serialisable config")
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.gate_forward(x, mode)?.y)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        self.gate_backward(grad_out)
    }

    fn params(&self) -> Vec<(String, &Param)> {
        if self.config.variant.is_bypass() {
            return Vec::new();
        }
        let mut v: Vec<_> = self.fc1.params().into_iter().map(|(n, p)| (format!("fc1.{n}"), p)).collect();
        v.extend(self.fc2.params().into_iter().map(|(n, p)| (format!("fc2.{n}"), p)));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        if self.config.variant.is_bypass() {
            return Vec::new();
        }
        let mut v: Vec<_> = self.fc1.params_mut().into_iter().map(|(n, p)| (format!("fc1.{n}"), p)).collect();
        v.extend(self.fc2.params_mut().into_iter().map(|(n, p)| (format!("fc2.{n}"), p)));
        v
    }

    fn freeze_randomness(&mut self, frozen: bool) {
        self.drop1.freeze_randomness(frozen);
        self.drop2.freeze_randomness(frozen);
    }
}

/// Gate matrix as CSV: header `g0,g1,...`, one row per sample.
pub fn gates_to_csv(gate: &Tensor) -> Result<String> {
    let (b, c) = gate.dims2()?;
    let header: Vec<String> = (0..c).map(|j| format!("g{j}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..b {
        let row: Vec<String> = gate.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}
