//! The full network: backbone, neck (transfer module or baseline), main
//! classifier and the training-only auxiliary classifier.

mod backbone;
pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneOutput, BackboneSpec};

use crate::error::{Error, Result, ResultExt};
use crate::layers::gradcheck::{check_gradients, Differentiable, DEFAULT_STEP};
use crate::layers::{
    cross_entropy_terms, BatchNorm1d, GlobalAvgPool, GradCheckReport, Layer, Linear, Mode, Param, Relu, Sequential,
    SoftmaxCrossEntropy,
};
use crate::tensor::{Rng, Tensor};
use crate::transfer::{GateVariant, TransferConfig, TransferModule};

/// Default auxiliary loss weight.
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// Experiment variants exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Gtn,
    ClassicFt,
    FixedFeature,
    Residual,
    DaCnn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Gtn,
        Variant::ClassicFt,
        Variant::FixedFeature,
        Variant::Residual,
        Variant::DaCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gtn => "gtn",
            Variant::ClassicFt => "classic-ft",
            Variant::FixedFeature => "fixed-feature",
            Variant::Residual => "residual",
            Variant::DaCnn => "da-cnn",
        }
    }

    /// Only the gated variants train with the auxiliary classifier.
    pub fn uses_aux(self) -> bool {
        matches!(self, Variant::Gtn | Variant::Residual)
    }

    /// Model spec for a target task on top of `backbone`. `transfer` supplies
    /// the gate hyperparameters; its channel count and variant are overridden.
    pub fn model_spec(
        self,
        backbone: BackboneSpec,
        aux_tap: usize,
        num_classes: usize,
        transfer: &TransferConfig,
        lambda: f64,
    ) -> ModelSpec {
        let gate = |variant| {
            NeckSpec::Transfer(TransferConfig {
                channels: backbone.feature_dim(),
                variant,
                ..transfer.clone()
            })
        };
        let neck = match self {
            Variant::Gtn => gate(GateVariant::Gated),
            Variant::Residual => gate(GateVariant::Residual),
            Variant::ClassicFt => gate(GateVariant::Identity),
            Variant::FixedFeature => gate(GateVariant::FixedFeature),
            Variant::DaCnn => NeckSpec::DepthAugmented,
        };
        ModelSpec {
            backbone,
            aux_tap,
            neck,
            num_classes,
            aux_head: self.uses_aux(),
            lambda: if self.uses_aux() { lambda } else { 0.0 },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NeckSpec {
    /// Features go straight to the classifier (source pretraining).
    Plain,
    Transfer(TransferConfig),
    /// `FC(C→C) → BatchNorm1d → ReLU`.
    DepthAugmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub aux_tap: usize,
    pub neck: NeckSpec,
    pub num_classes: usize,
    pub aux_head: bool,
    pub lambda: f64,
}

impl ModelSpec {
    /// Backbone plus a linear classifier, no gate and no auxiliary branch.
    pub fn plain(backbone: BackboneSpec, aux_tap: usize, num_classes: usize) -> Self {
        ModelSpec {
            backbone,
            aux_tap,
            neck: NeckSpec::Plain,
            num_classes,
            aux_head: false,
            lambda: 0.0,
        }
    }

    pub fn variant(&self) -> Option<Variant> {
        match &self.neck {
            NeckSpec::Plain => None,
            NeckSpec::DepthAugmented => Some(Variant::DaCnn),
            NeckSpec::Transfer(c) => Some(match c.variant {
                GateVariant::Gated => Variant::Gtn,
                GateVariant::Residual => Variant::Residual,
                GateVariant::Identity => Variant::ClassicFt,
                GateVariant::FixedFeature => Variant::FixedFeature,
            }),
        }
    }

    /// `gtn`, `classic-ft`, ... or `plain`.
    pub fn variant_name(&self) -> &'static str {
        self.variant().map_or("plain", Variant::name)
    }

    /// The fixed-feature baseline never trains its backbone.
    pub fn backbone_locked(&self) -> bool {
        matches!(&self.neck, NeckSpec::Transfer(c) if c.variant == GateVariant::FixedFeature)
    }

    fn validate(&self) -> Result<()> {
        self.backbone.validate(self.aux_tap)?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        check_lambda(self.lambda)?;
        if let NeckSpec::Transfer(c) = &self.neck {
            if c.channels != self.backbone.feature_dim() {
                return Err(Error::Config(format!(
                    "transfer module has {} channels but the backbone produces {}",
                    c.channels,
                    self.backbone.feature_dim()
                )));
            }
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Backbone,
    Neck,
    MainHead,
    AuxHead,
}

impl ParamGroup {
    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Neck => "neck",
            ParamGroup::MainHead => "main_head",
            ParamGroup::AuxHead => "aux_head",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub backbone: bool,
}

pub enum Neck {
    Plain,
    Transfer(TransferModule),
    DepthAugmented(Sequential),
}

impl Neck {
    fn build(spec: &NeckSpec, channels: usize, rng: &Rng) -> Result<Neck> {
        Ok(match spec {
            NeckSpec::Plain => Neck::Plain,
            NeckSpec::Transfer(cfg) => Neck::Transfer(TransferModule::new(cfg.clone(), &mut rng.child("neck"))?),
            NeckSpec::DepthAugmented => {
                let mut init = rng.child("neck");
                Neck::DepthAugmented(
                    Sequential::new()
                        .with("fc", Linear::new(channels, channels, true, &mut init))
                        .with("bn", BatchNorm1d::new(channels))
                        .with("relu", Relu::new()),
                )
            }
        })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<Tensor>)> {
        match self {
            Neck::Plain => Ok((x.clone(), None)),
            Neck::Transfer(t) => {
                let out = t.gate_forward(x, mode)?;
                Ok((out.y, Some(out.gate)))
            }
            Neck::DepthAugmented(s) => Ok((s.forward(x, mode)?, None)),
        }
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        match self {
            Neck::Plain => Ok(dy.clone()),
            Neck::Transfer(t) => t.gate_backward(dy),
            Neck::DepthAugmented(s) => s.backward(dy),
        }
    }

    fn layer(&self) -> Option<&dyn Layer> {
        match self {
            Neck::Plain => None,
            Neck::Transfer(t) => Some(t),
            Neck::DepthAugmented(s) => Some(s),
        }
    }

    fn layer_mut(&mut self) -> Option<&mut dyn Layer> {
        match self {
            Neck::Plain => None,
            Neck::Transfer(t) => Some(t),
            Neck::DepthAugmented(s) => Some(s),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub main_logits: Tensor,
    /// Present only in training modes on models with an auxiliary head.
    pub aux_logits: Option<Tensor>,
    /// Per-channel gate of a transfer-module neck.
    pub gate: Option<Tensor>,
    /// Pooled backbone features `[B × C]`.
    pub features: Tensor,
    /// Classifier input (gated features).
    pub head_input: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub main: f64,
    pub aux: f64,
}

/// `total = main + λ·aux`; a missing auxiliary output contributes zero.
pub fn combined_loss(
    main_logits: &Tensor,
    aux_logits: Option<&Tensor>,
    labels: &[usize],
    lambda: f64,
) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    let main = SoftmaxCrossEntropy::new().forward(main_logits, labels)?;
    let aux = match aux_logits {
        Some(a) => SoftmaxCrossEntropy::new().forward(a, labels)?,
        None => 0.0,
    };
    Ok(combine(main, aux, lambda))
}

fn combine(main: f64, aux: f64, lambda: f64) -> LossBreakdown {
    let total = if lambda == 0.0 { main } else { main + lambda * aux };
    LossBreakdown { total, main, aux }
}

struct ForwardCache {
    main_logits: Tensor,
    aux_logits: Option<Tensor>,
}

pub struct GtnModel {
    spec: ModelSpec,
    backbone: Backbone,
    neck: Neck,
    main_head: Linear,
    aux_pool: Option<GlobalAvgPool>,
    aux_head: Option<Linear>,
    freeze: FreezeMask,
    ce_main: SoftmaxCrossEntropy,
    ce_aux: SoftmaxCrossEntropy,
    cache: Option<ForwardCache>,
}

impl GtnModel {
    /// Builds every component from independent child streams of `rng`, so
    /// the backbone and main head initialise identically across necks.
    pub fn new(spec: ModelSpec, rng: &Rng) -> Result<Self> {
        spec.validate()?;
        let backbone = Backbone::new(spec.backbone.clone(), spec.aux_tap, rng)?;
        Self::assemble(spec, backbone, rng)
    }

    /// Attaches new neck and heads to an existing (pretrained) backbone.
    pub fn with_backbone(spec: ModelSpec, backbone: Backbone, rng: &Rng) -> Result<Self> {
        spec.validate()?;
        if backbone.spec() != &spec.backbone || backbone.aux_tap() != spec.aux_tap {
            return Err(Error::Incompatible(format!(
                "backbone {:?} (aux_tap {}) does not match the model spec {:?} (aux_tap {})",
                backbone.spec(),
                backbone.aux_tap(),
                spec.backbone,
                spec.aux_tap
            )));
        }
        Self::assemble(spec, backbone, rng)
    }

    fn assemble(spec: ModelSpec, backbone: Backbone, rng: &Rng) -> Result<Self> {
        let c = backbone.feature_dim();
        let neck = Neck::build(&spec.neck, c, rng)?;
        let main_head = Linear::new(c, spec.num_classes, true, &mut rng.child("main_head"));
        let (aux_pool, aux_head) = Self::build_aux(&spec, &backbone, rng);
        Ok(GtnModel {
            freeze: FreezeMask {
                backbone: spec.backbone_locked(),
            },
            spec,
            backbone,
            neck,
            main_head,
            aux_pool,
            aux_head,
            ce_main: SoftmaxCrossEntropy::new(),
            ce_aux: SoftmaxCrossEntropy::new(),
            cache: None,
        })
    }

    fn build_aux(spec: &ModelSpec, backbone: &Backbone, rng: &Rng) -> (Option<GlobalAvgPool>, Option<Linear>) {
        if !spec.aux_head {
            return (None, None);
        }
        let pool = spec.backbone.is_spatial().then(GlobalAvgPool::new);
        let head = Linear::new(backbone.tap_dim(), spec.num_classes, true, &mut rng.child("aux_head"));
        (pool, Some(head))
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn variant_name(&self) -> &'static str {
        self.spec.variant_name()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn lambda(&self) -> f64 {
        self.spec.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        check_lambda(lambda)?;
        self.spec.lambda = lambda;
        Ok(())
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn into_backbone(self) -> Backbone {
        self.backbone
    }

    pub fn neck(&self) -> &Neck {
        &self.neck
    }

    pub fn transfer(&self) -> Option<&TransferModule> {
        match &self.neck {
            Neck::Transfer(t) => Some(t),
            _ => None,
        }
    }

    pub fn transfer_mut(&mut self) -> Option<&mut TransferModule> {
        match &mut self.neck {
            Neck::Transfer(t) => Some(t),
            _ => None,
        }
    }

    pub fn main_head(&self) -> &Linear {
        &self.main_head
    }

    pub fn has_aux_head(&self) -> bool {
        self.aux_head.is_some()
    }

    /// Replaces the classifier (and the auxiliary head, if any) with freshly
    /// initialised ones for `num_classes`.
    pub fn replace_heads(&mut self, num_classes: usize, rng: &Rng) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        self.spec.num_classes = num_classes;
        self.main_head = Linear::new(self.backbone.feature_dim(), num_classes, true, &mut rng.child("main_head"));
        let (pool, head) = Self::build_aux(&self.spec, &self.backbone, rng);
        self.aux_pool = pool;
        self.aux_head = head;
        self.cache = None;
        Ok(())
    }

    /// Deletes the auxiliary branch; predictions are unaffected.
    pub fn remove_aux_head(&mut self) {
        self.spec.aux_head = false;
        self.spec.lambda = 0.0;
        self.aux_pool = None;
        self.aux_head = None;
        self.cache = None;
    }

    pub fn freeze_mask(&self) -> FreezeMask {
        self.freeze
    }

    /// Requests a frozen or trainable backbone; the fixed-feature variant
    /// stays frozen regardless.
    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        self.freeze.backbone = frozen || self.spec.backbone_locked();
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        group == ParamGroup::Backbone && self.freeze.backbone
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<ModelOutput> {
        let BackboneOutput { features, tapped } = self.backbone.forward(x, mode).context("backbone")?;
        let (head_input, gate) = self.neck.forward(&features, mode).context("neck")?;
        let main_logits = self.main_head.forward(&head_input, mode).context("main head")?;
        let aux_logits = match &mut self.aux_head {
            Some(head) if mode.is_train() => {
                let pooled = match &mut self.aux_pool {
                    Some(p) => p.forward(&tapped, mode)?,
                    None => tapped,
                };
                Some(head.forward(&pooled, mode).context("aux head")?)
            }
            _ => None,
        };
        self.cache = mode.is_train().then(|| ForwardCache {
            main_logits: main_logits.clone(),
            aux_logits: aux_logits.clone(),
        });
        Ok(ModelOutput {
            main_logits,
            aux_logits,
            gate,
            features,
            head_input,
        })
    }

    /// Backpropagates the combined loss of the last training-mode forward
    /// and accumulates gradients. Frozen groups and a zero-weighted
    /// auxiliary branch are skipped entirely.
    pub fn backward(&mut self, labels: &[usize]) -> Result<LossBreakdown> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("model backward requires a training-mode forward".into()))?;
        let lambda = self.spec.lambda;
        let main = self.ce_main.forward(&cache.main_logits, labels)?;
        let aux = match &cache.aux_logits {
            Some(a) => self.ce_aux.forward(a, labels)?,
            None => 0.0,
        };
        let d_main = self.ce_main.backward()?;
        let d_head_input = self.main_head.backward(&d_main).context("main head")?;
        let d_features = self.neck.backward(&d_head_input).context("neck")?;
        let d_tapped = match (&mut self.aux_head, cache.aux_logits.is_some() && lambda != 0.0) {
            (Some(head), true) => {
                let d_aux = self.ce_aux.backward()?.scale(lambda)?;
                let g = head.backward(&d_aux).context("aux head")?;
                Some(match &mut self.aux_pool {
                    Some(p) => p.backward(&g)?,
                    None => g,
                })
            }
            _ => None,
        };
        if !self.freeze.backbone {
            self.backbone
                .backward(&d_features, d_tapped.as_ref())
                .context("backbone")?;
        }
        Ok(combine(main, aux, lambda))
    }

    /// Argmax of the main head in eval mode.
    pub fn predict(&mut self, x: &Tensor) -> Result<Vec<usize>> {
        self.forward(x, Mode::Eval)?.main_logits.argmax_rows()
    }

    pub fn zero_grad(&mut self) {
        for (_, _, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn freeze_randomness(&mut self, frozen: bool) {
        if let Some(l) = self.neck.layer_mut() {
            l.freeze_randomness(frozen);
        }
    }

    /// `(group, full name, parameter)` in a fixed order.
    pub fn params(&self) -> Vec<(ParamGroup, String, &Param)> {
        let mut out = Vec::new();
        out.extend(tag(ParamGroup::Backbone, self.backbone.params()));
        out.extend(tag(ParamGroup::Neck, self.neck.layer().map(|l| l.params()).unwrap_or_default()));
        out.extend(tag(ParamGroup::MainHead, self.main_head.params()));
        if let Some(h) = &self.aux_head {
            out.extend(tag(ParamGroup::AuxHead, h.params()));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamGroup, String, &mut Param)> {
        let mut out = Vec::new();
        out.extend(tag(ParamGroup::Backbone, self.backbone.params_mut()));
        out.extend(tag(ParamGroup::Neck, self.neck.layer_mut().map(|l| l.params_mut()).unwrap_or_default()));
        out.extend(tag(ParamGroup::MainHead, self.main_head.params_mut()));
        if let Some(h) = &mut self.aux_head {
            out.extend(tag(ParamGroup::AuxHead, h.params_mut()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, _, p)| p.value.len()).sum()
    }

    /// Parameters added on top of the backbone for prediction: neck plus
    /// main classifier.
    pub fn head_param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(g, _, _)| matches!(g, ParamGroup::Neck | ParamGroup::MainHead))
            .map(|(_, _, p)| p.value.len())
            .sum()
    }

    /// `(layer name, layer)` for every layer in forward order.
    pub fn layers(&self) -> Vec<(String, &dyn Layer)> {
        let mut out: Vec<(String, &dyn Layer)> = self
            .backbone
            .layers()
            .into_iter()
            .map(|(n, l)| (format!("backbone.{n}"), l))
            .collect();
        match &self.neck {
            Neck::Plain => {}
            Neck::Transfer(t) => out.push(("neck".into(), t)),
            Neck::DepthAugmented(s) => out.extend(s.layers().map(|(n, l)| (format!("neck.{n}"), l))),
        }
        out.push(("main_head".into(), &self.main_head));
        if let Some(p) = &self.aux_pool {
            out.push(("aux_head.pool".into(), p));
        }
        if let Some(h) = &self.aux_head {
            out.push(("aux_head".into(), h));
        }
        out
    }

    /// Parameters and buffers by full name.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = self
            .params()
            .into_iter()
            .map(|(_, n, p)| (n, p.value.clone()))
            .collect();
        if let Some(l) = self.neck.layer() {
            out.extend(l.buffers().into_iter().map(|(n, t)| (format!("neck.{n}"), t.clone())));
        }
        out
    }

    /// Loads every parameter and buffer; missing, extra or mis-shaped
    /// tensors are incompatibilities.
    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut seen = 0usize;
        let mut slots: Vec<(String, &mut Tensor)> = Vec::new();
        let (backbone, neck, main_head, aux_head) =
            (&mut self.backbone, &mut self.neck, &mut self.main_head, &mut self.aux_head);
        slots.extend(backbone.params_mut().into_iter().map(|(n, p)| (format!("backbone.{n}"), &mut p.value)));
        if let Some(l) = neck.layer_mut() {
            slots.extend(l.params_mut().into_iter().map(|(n, p)| (format!("neck.{n}"), &mut p.value)));
        }
        slots.extend(main_head.params_mut().into_iter().map(|(n, p)| (format!("main_head.{n}"), &mut p.value)));
        if let Some(h) = aux_head {
            slots.extend(h.params_mut().into_iter().map(|(n, p)| (format!("aux_head.{n}"), &mut p.value)));
        }
        for (name, slot) in slots {
            assign(state, &name, slot)?;
            seen += 1;
        }
        if let Some(l) = self.neck.layer_mut() {
            for (n, slot) in l.buffers_mut() {
                assign(state, &format!("neck.{n}"), slot)?;
                seen += 1;
            }
        }
        if seen != state.len() {
            let known: Vec<String> = self.state().into_keys().collect();
            let extra: Vec<&String> = state.keys().filter(|k| !known.contains(k)).collect();
            return Err(Error::Incompatible(format!("unexpected tensors {extra:?}")));
        }
        self.cache = None;
        Ok(())
    }
}

fn tag<P>(group: ParamGroup, items: Vec<(String, P)>) -> impl Iterator<Item = (ParamGroup, String, P)> {
    items
        .into_iter()
        .map(move |(n, p)| (group, format!("{}.{n}", group.prefix()), p))
}

fn assign(state: &BTreeMap<String, Tensor>, name: &str, slot: &mut Tensor) -> Result<()> {
    let t = state
        .get(name)
        .ok_or_else(|| Error::Incompatible(format!("missing tensor '{name}'")))?;
    if t.shape() != slot.shape() {
        return Err(Error::Incompatible(format!(
            "tensor '{name}' has shape {:?}, expected {:?}",
            t.shape(),
            slot.shape()
        )));
    }
    *slot = t.clone();
    Ok(())
}

/// The depth-augmented baseline: pretrained features → `FC(C→C)` →
/// `BatchNorm1d` → `ReLU` → classifier, without gating or auxiliary loss.
pub fn build_da_baseline(backbone: Backbone, num_classes: usize, rng: &Rng) -> Result<GtnModel> {
    let spec = Variant::DaCnn.model_spec(
        backbone.spec().clone(),
        backbone.aux_tap(),
        num_classes,
        &TransferConfig::new(backbone.feature_dim()),
        0.0,
    );
    GtnModel::with_backbone(spec, backbone, rng)
}

/// Objective `Σᵢ (mainᵢ + λ·auxᵢ) / B` over a fixed batch, differentiated
/// with respect to every trainable parameter.
pub struct ModelProbe<'a> {
    pub model: &'a mut GtnModel,
    pub input: Tensor,
    pub labels: Vec<usize>,
    pub mode: Mode,
    /// `(parameter, element)` pairs left out of the check; `None` excludes
    /// the whole tensor.
    pub exclude: Vec<(String, Option<usize>)>,
}

impl Differentiable for ModelProbe<'_> {
    fn objective_terms(&mut self) -> Result<Vec<f64>> {
        let out = self.model.forward(&self.input, self.mode)?;
        let b = self.labels.len() as f64;
        let mut terms: Vec<f64> = cross_entropy_terms(&out.main_logits, &self.labels)?
            .into_iter()
            .map(|l| l / b)
            .collect();
        let lambda = self.model.lambda();
        if let Some(aux) = &out.aux_logits {
            if lambda != 0.0 {
                terms.extend(cross_entropy_terms(aux, &self.labels)?.into_iter().map(|l| lambda * l / b));
            }
        }
        Ok(terms)
    }

    fn analytic_gradients(&mut self) -> Result<Vec<(String, Tensor)>> {
        self.model.zero_grad();
        self.model.forward(&self.input, self.mode)?;
        self.model.backward(&self.labels)?;
        Ok(self
            .model
            .params()
            .into_iter()
            .filter(|(g, _, _)| !self.model.is_frozen(*g))
            .map(|(_, n, p)| (n, p.grad.clone()))
            .collect())
    }

    fn values_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let frozen = self.model.freeze_mask().backbone;
        self.model
            .params_mut()
            .into_iter()
            .filter(|(g, _, _)| !(frozen && *g == ParamGroup::Backbone))
            .map(|(_, n, p)| (n, &mut p.value))
            .collect()
    }

    fn is_excluded(&self, name: &str, index: usize) -> bool {
        self.exclude
            .iter()
            .any(|(n, i)| n == name && i.is_none_or(|i| i == index))
    }
}

/// Finite-difference check of the full model's combined-loss gradient on a
/// random batch. In [`Mode::Train`] dropout masks are frozen after the first
/// forward.
pub fn model_grad_check(model: &mut GtnModel, batch: usize, rng: &mut Rng, mode: Mode) -> Result<GradCheckReport> {
    if !mode.is_train() {
        return Err(Error::InvalidArgument("model gradient checks need a training mode".into()));
    }
    let mut shape = vec![batch];
    shape.extend(model.spec().backbone.input_shape());
    let input = Tensor::rand_normal(rng, &shape, 0.0, 1.0)?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(model.num_classes())).collect();
    model.forward(&input, mode)?;
    model.freeze_randomness(true);
    let mut probe = ModelProbe {
        model,
        input,
        labels,
        mode,
        exclude: Vec::new(),
    };
    let report = check_gradients(&mut probe, DEFAULT_STEP);
    probe.model.freeze_randomness(false);
    report
}

#[cfg(test)]
mod tests;
