//! Central finite-difference verification of analytic gradients.
//!
//! A [`Differentiable`] exposes a scalar objective (as the list of terms it
//! sums), its analytic gradients, and mutable access to the values those
//! gradients refer to. The checker perturbs every element by `±h` and
//! compares `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
//!
//! The numeric derivative is `Σᵢ (termᵢ(v+h) - termᵢ(v-h)) / 2h`: terms
//! untouched by the perturbation cancel exactly instead of adding roundoff
//! from the full objective.

use super::{Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
    pub checked: usize,
}

pub trait Differentiable {
    /// Terms whose sum is the objective, in a fixed order.
    fn objective_terms(&mut self) -> Result<Vec<f64>>;
    fn analytic_gradients(&mut self) -> Result<Vec<(String, Tensor)>>;
    fn values_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Elements left out of the comparison.
    fn is_excluded(&self, _name: &str, _index: usize) -> bool {
        false
    }
}

pub fn check_gradients(target: &mut dyn Differentiable, h: f64) -> Result<GradCheckReport> {
    let analytic = target.analytic_gradients()?;
    let names: Vec<(String, usize)> = target
        .values_mut()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (name, len) in names {
        let grad = analytic
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, g)| g)
            .ok_or_else(|| Error::State(format!("no analytic gradient for '{name}'")))?;
        if grad.len() != len {
            return Err(Error::State(format!("gradient shape mismatch for '{name}'")));
        }
        for i in 0..len {
            if target.is_excluded(&name, i) {
                continue;
            }
            let original = set_value(target, &name, i, None);
            set_value(target, &name, i, Some(original + h));
            let plus = target.objective_terms()?;
            set_value(target, &name, i, Some(original - h));
            let minus = target.objective_terms()?;
            set_value(target, &name, i, Some(original));
            let numeric = plus.iter().zip(&minus).map(|(p, m)| p - m).sum::<f64>() / (2.0 * h);
            let err = relative_error(grad.data()[i], numeric);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("gradient check of '{name}'")));
            }
            if err > report.max_relative_error || report.worst.is_empty() {
                report.max_relative_error = err.max(report.max_relative_error);
                report.worst = format!("{name}[{i}]");
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn set_value(target: &mut dyn Differentiable, name: &str, i: usize, value: Option<f64>) -> f64 {
    let mut values = target.values_mut();
    let (_, t) = values.iter_mut().find(|(n, _)| n == name).expect("name listed");
    let slot = &mut t.data_mut()[i];
    let old = *slot;
    if let Some(v) = value {
        *slot = v;
    }
    old
}

/// Objective `Σ R ⊙ layer(x)` for a fixed random projection `R`.
pub struct LayerProbe<'a> {
    pub layer: &'a mut dyn Layer,
    pub input: Tensor,
    pub projection: Tensor,
    pub mode: Mode,
}

impl Differentiable for LayerProbe<'_> {
    fn objective_terms(&mut self) -> Result<Vec<f64>> {
        let y = self.layer.forward(&self.input, self.mode)?;
        Ok(y.mul(&self.projection)?.into_data())
    }

    fn analytic_gradients(&mut self) -> Result<Vec<(String, Tensor)>> {
        self.layer.zero_grad();
        self.layer.forward(&self.input, self.mode)?;
        let dx = self.layer.backward(&self.projection)?;
        let mut out = vec![("input".to_string(), dx)];
        out.extend(self.layer.params().into_iter().map(|(n, p)| (n, p.grad.clone())));
        Ok(out)
    }

    fn values_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("input".to_string(), &mut self.input)];
        out.extend(self.layer.params_mut().into_iter().map(|(n, p)| (n, &mut p.value)));
        out
    }
}

/// Checks a layer on a random input of `input_shape`. In [`Mode::Train`] the
/// randomness sampled by the first forward is frozen for the whole check.
pub fn grad_check(layer: &mut dyn Layer, input_shape: &[usize], rng: &mut Rng, mode: Mode) -> Result<GradCheckReport> {
    for (name, p) in layer.params() {
        p.value.check_finite(&format!("parameter '{name}'"))?;
    }
    let input = Tensor::rand_normal(rng, input_shape, 0.0, 1.0)?;
    let out = layer.forward(&input, mode)?;
    let projection = Tensor::rand_normal(rng, out.shape(), 0.0, 1.0)?;
    layer.freeze_randomness(true);
    let mut probe = LayerProbe {
        layer,
        input,
        projection,
        mode,
    };
    let report = check_gradients(&mut probe, DEFAULT_STEP);
    probe.layer.freeze_randomness(false);
    report
}
