use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::layers::{Conv2d, GlobalAvgPool, Layer, Linear, MaxPool2d, Mode, Param, Relu, Sequential};
use crate::tensor::{Rng, Tensor};

/// Architecture of the feature extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackboneSpec {
    /// `[B × input_dim]` → one `linear → relu` stage per width.
    Mlp { input_dim: usize, widths: Vec<usize> },
    /// `[B × in_channels × H × W]` → one `conv3×3 → relu → maxpool2` stage
    /// per channel count, then global average pooling.
    TinyCnn {
        in_channels: usize,
        image_size: usize,
        channels: Vec<usize>,
    },
}

impl BackboneSpec {
    pub fn default_mlp(input_dim: usize) -> Self {
        BackboneSpec::Mlp {
            input_dim,
            widths: vec![256, 128],
        }
    }

    pub fn default_cnn(in_channels: usize, image_size: usize) -> Self {
        BackboneSpec::TinyCnn {
            in_channels,
            image_size,
            channels: vec![16, 32, 64],
        }
    }

    fn widths(&self) -> &[usize] {
        match self {
            BackboneSpec::Mlp { widths, .. } => widths,
            BackboneSpec::TinyCnn { channels, .. } => channels,
        }
    }

    pub fn stage_count(&self) -> usize {
        self.widths().len()
    }

    /// Width `C` of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        *self.widths().last().expect("validated non-empty")
    }

    /// Channel count of stage `i`'s output.
    pub fn stage_width(&self, i: usize) -> usize {
        self.widths()[i]
    }

    /// Shape of one input sample (without the batch axis).
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            BackboneSpec::Mlp { input_dim, .. } => vec![*input_dim],
            BackboneSpec::TinyCnn {
                in_channels,
                image_size,
                ..
            } => vec![*in_channels, *image_size, *image_size],
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self, BackboneSpec::TinyCnn { .. })
    }

    pub fn validate(&self, aux_tap: usize) -> Result<()> {
        let widths = self.widths();
        if widths.len() < 2 {
            return Err(Error::Config("backbone needs at least two stages".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if aux_tap + 1 >= widths.len() {
            return Err(Error::Config(format!(
                "aux_tap {aux_tap} must precede the last stage (index {})",
                widths.len() - 1
            )));
        }
        if let BackboneSpec::TinyCnn { image_size, .. } = self {
            if image_size >> widths.len() == 0 {
                return Err(Error::Config(format!(
                    "image size {image_size} too small for {} pooling stages",
                    widths.len()
                )));
            }
        }
        Ok(())
    }
}

pub struct BackboneOutput {
    pub features: Tensor,
    pub tapped: Tensor,
}

/// Staged feature extractor with one intermediate tap for the auxiliary
/// classifier.
pub struct Backbone {
    spec: BackboneSpec,
    aux_tap: usize,
    stages: Vec<Sequential>,
    pool: Option<GlobalAvgPool>,
}

impl Backbone {
    pub fn new(spec: BackboneSpec, aux_tap: usize, rng: &Rng) -> Result<Self> {
        spec.validate(aux_tap)?;
        let mut stages = Vec::new();
        match &spec {
            BackboneSpec::Mlp { input_dim, widths } => {
                let mut prev = *input_dim;
                for (i, &w) in widths.iter().enumerate() {
                    let mut init = rng.child_indexed("backbone.stage", i as u64);
                    stages.push(
                        Sequential::new()
                            .with("fc", Linear::new(prev, w, true, &mut init))
                            .with("relu", Relu::new()),
                    );
                    prev = w;
                }
            }
            BackboneSpec::TinyCnn {
                in_channels,
                channels,
                ..
            } => {
                let mut prev = *in_channels;
                for (i, &c) in channels.iter().enumerate() {
                    let mut init = rng.child_indexed("backbone.stage", i as u64);
                    stages.push(
                        Sequential::new()
                            .with("conv", Conv2d::new(prev, c, 3, 1, 1, &mut init))
                            .with("relu", Relu::new())
                            .with("pool", MaxPool2d::new(2)),
                    );
                    prev = c;
                }
            }
        }
        let pool = spec.is_spatial().then(GlobalAvgPool::new);
        Ok(Backbone {
            spec,
            aux_tap,
            stages,
            pool,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn aux_tap(&self) -> usize {
        self.aux_tap
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn tap_dim(&self) -> usize {
        self.spec.stage_width(self.aux_tap)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<BackboneOutput> {
        let expected = self.spec.input_shape();
        if x.rank() != expected.len() + 1 || x.shape()[1..] != expected[..] {
            return Err(Error::dim("backbone input", x.shape(), &expected));
        }
        let mut h = x.clone();
        let mut tapped = None;
        for (i, stage) in self.stages.iter_mut().enumerate() {
            h = stage.forward(&h, mode).with_context(|| format!("backbone stage {i}"))?;
            if i == self.aux_tap {
                tapped = Some(h.clone());
            }
        }
        let features = match &mut self.pool {
            Some(pool) => pool.forward(&h, mode)?,
            None => h,
        };
        Ok(BackboneOutput {
            features,
            tapped: tapped.expect("aux_tap validated"),
        })
    }

    /// Backpropagates the feature gradient plus an optional gradient at the
    /// tapped stage; returns dL/dinput.
    pub fn backward(&mut self, d_features: &Tensor, d_tapped: Option<&Tensor>) -> Result<Tensor> {
        let mut g = match &mut self.pool {
            Some(pool) => pool.backward(d_features)?,
            None => d_features.clone(),
        };
        for i in (0..self.stages.len()).rev() {
            if i == self.aux_tap {
                if let Some(dt) = d_tapped {
                    g = g.add(dt)?;
                }
            }
            g = self.stages[i]
                .backward(&g)
                .with_context(|| format!("backbone stage {i}"))?;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<(String, &Param)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.params().into_iter().map(move |(n, p)| (format!("stage{i}.{n}"), p)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.stages
            .iter_mut()
            .enumerate()
            .flat_map(|(i, s)| s.params_mut().into_iter().map(move |(n, p)| (format!("stage{i}.{n}"), p)))
            .collect()
    }

    /// `(layer name, layer)` in forward order.
    pub fn layers(&self) -> Vec<(String, &dyn Layer)> {
        let mut out: Vec<(String, &dyn Layer)> = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            for (n, l) in s.layers() {
                out.push((format!("stage{i}.{n}"), l));
            }
        }
        if let Some(p) = &self.pool {
            out.push(("pool".into(), p));
        }
        out
    }

    pub fn state(&self) -> BTreeMap<String, Tensor> {
        self.params()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .collect()
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in self.params_mut() {
            let t = state
                .get(&name)
                .ok_or_else(|| Error::Incompatible(format!("missing backbone tensor '{name}'")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Incompatible(format!(
                    "backbone tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// Independent copy with identical parameters.
    pub fn try_clone(&self) -> Result<Backbone> {
        let mut b = Backbone::new(self.spec.clone(), self.aux_tap, &Rng::new(0))?;
        b.load_state(&self.state())?;
        Ok(b)
    }

    /// Order-sensitive digest of all parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, p) in self.params() {
            for v in p.value.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }
}
