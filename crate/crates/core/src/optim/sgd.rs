use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::model::GtnModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient:
///
/// ```text
/// g' = g + wd·w
/// v  = μ·v − lr·g'
/// w  = w + v
/// ```
///
/// With `wd = 0` the decay term is skipped, so the update is bit-identical to
/// a decay-free implementation.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = config;
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "invalid SGD settings lr={lr}, momentum={momentum}, weight_decay={weight_decay}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    /// Updates one named parameter; `group` names it in error messages.
    pub fn update(&mut self, group: &str, name: &str, param: &mut Param) -> Result<()> {
        if param.grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of '{name}' in parameter group '{group}'")));
        }
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.value.shape()));
        if v.shape() != param.value.shape() {
            return Err(Error::dim("sgd velocity", v.shape(), param.value.shape()));
        }
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let grads = param.grad.data();
        for ((w, vi), &g) in param.value.data_mut().iter_mut().zip(v.data_mut()).zip(grads) {
            let g = if wd == 0.0 { g } else { g + wd * *w };
            *vi = mu * *vi - lr * g;
            *w += *vi;
        }
        Ok(())
    }

    /// Steps every parameter outside the model's frozen groups.
    pub fn step(&mut self, model: &mut GtnModel) -> Result<()> {
        let frozen = model.freeze_mask();
        for (group, name, p) in model.params_mut() {
            if frozen.backbone && group == crate::model::ParamGroup::Backbone {
                continue;
            }
            self.update(group.prefix(), &name, p)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64, g: f64) -> Param {
        let mut p = Param::new(Tensor::full(&[1], w));
        p.grad = Tensor::full(&[1], g);
        p
    }

    fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Sgd {
        Sgd::new(SgdConfig {
            lr,
            momentum,
            weight_decay,
        })
        .unwrap()
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = scalar(1.0, 0.1);
        sgd(0.1, 0.0, 0.0).update("g", "w", &mut p).unwrap();
        assert!((p.value.data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn decay_only_step() {
        let mut p = scalar(1.0, 0.0);
        sgd(0.1, 0.0, 1e-4).update("g", "w", &mut p).unwrap();
        assert!((p.value.data()[0] - 0.99999).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_follow_the_recurrence() {
        let mut opt = sgd(0.1, 0.9, 0.0);
        let mut p = scalar(1.0, 1.0);
        let (mut w, mut v) = (1.0f64, 0.0f64);
        let mut expected = Vec::new();
        for _ in 0..2 {
            v = 0.9 * v - 0.1 * 1.0;
            w += v;
            expected.push(w);
        }
        let mut got = Vec::new();
        for _ in 0..2 {
            opt.update("g", "w", &mut p).unwrap();
            got.push(p.value.data()[0]);
        }
        assert_eq!(got, expected);
        assert!((got[0] - 0.9).abs() < 1e-15 && (got[1] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_decay_matches_decay_free_update_bit_exactly() {
        let mut rng = crate::Rng::new(4);
        let mut p = Param::new(Tensor::rand_normal(&mut rng, &[5, 3], 0.0, 1.0).unwrap());
        let mut opt = sgd(0.03, 0.9, 0.0);
        let (mut w, mut v) = (p.value.data().to_vec(), vec![0.0; 15]);
        for _ in 0..4 {
            p.grad = Tensor::rand_normal(&mut rng, &[5, 3], 0.0, 1.0).unwrap();
            for i in 0..15 {
                v[i] = 0.9 * v[i] - 0.03 * p.grad.data()[i];
                w[i] += v[i];
            }
            opt.update("g", "w", &mut p).unwrap();
        }
        assert_eq!(p.value.data(), &w[..]);
    }

    #[test]
    fn non_finite_gradient_names_the_group() {
        let mut p = scalar(1.0, f64::NAN);
        let err = sgd(0.1, 0.9, 0.0).update("neck", "neck.fc1.weight", &mut p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("neck") && msg.contains("fc1"), "{msg}");
    }

    #[test]
    fn invalid_settings_are_rejected() {
        assert!(Sgd::new(SgdConfig { lr: -1.0, ..Default::default() }).is_err());
        assert!(Sgd::new(SgdConfig { momentum: 1.0, ..Default::default() }).is_err());
    }
}
