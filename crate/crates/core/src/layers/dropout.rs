use super::{missing_forward, Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Inverted dropout: in [`Mode::Train`] each element is kept with
/// probability `1 - rate` and scaled by `1 / (1 - rate)`; every other mode
/// is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: Rng,
    mask: Option<Tensor>,
    frozen: bool,
    active: bool,
}

impl Dropout {
    pub fn new(rate: f64, rng: Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
        }
        Ok(Dropout {
            rate,
            rng,
            mask: None,
            frozen: false,
            active: false,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Mask used by the last training-mode forward (already scaled).
    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }

    fn sample_mask(&mut self, shape: &[usize]) -> Tensor {
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mut m = Tensor::zeros(shape);
        for v in m.data_mut() {
            if self.rng.uniform() < keep {
                *v = scale;
            }
        }
        m
    }
}

impl Layer for Dropout {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn hyper(&self) -> serde_json::Value {
        serde_json::json!({ "rate": self.rate })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.active = mode.dropout_active() && self.rate > 0.0;
        if !self.active {
            return Ok(x.clone());
        }
        let reuse = self.frozen && self.mask.as_ref().is_some_and(|m| m.shape() == x.shape());
        if !reuse {
            self.mask = Some(self.sample_mask(x.shape()));
        }
        x.mul(self.mask.as_ref().expect("mask sampled"))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        if !self.active {
            return Ok(grad_out.clone());
        }
        let mask = self.mask.as_ref().ok_or_else(|| missing_forward("dropout"))?;
        grad_out.mul(mask)
    }

    fn freeze_randomness(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_is_bit_exact_identity() {
        let mut d = Dropout::new(0.7, Rng::new(1)).unwrap();
        let x = Tensor::rand_normal(&mut Rng::new(2), &[4, 5], 0.0, 1.0).unwrap();
        let y = d.forward(&x, Mode::Eval).unwrap();
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let g = d.backward(&x).unwrap();
        assert_eq!(g, x);
    }

    #[test]
    fn rate_out_of_range_rejected() {
        assert!(Dropout::new(1.0, Rng::new(0)).is_err());
        assert!(Dropout::new(-0.1, Rng::new(0)).is_err());
    }

    #[test]
    fn train_mode_preserves_expectation() {
        let mut d = Dropout::new(0.5, Rng::new(3)).unwrap();
        let x = Tensor::full(&[100_000], 2.0);
        let y = d.forward(&x, Mode::Train).unwrap();
        assert!((y.mean() - 2.0).abs() < 0.02, "{}", y.mean());
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn frozen_mask_is_reused() {
        let mut d = Dropout::new(0.5, Rng::new(3)).unwrap();
        let x = Tensor::ones(&[3, 8]);
        let a = d.forward(&x, Mode::Train).unwrap();
        d.freeze_randomness(true);
        let b = d.forward(&x, Mode::Train).unwrap();
        assert_eq!(a, b);
        d.freeze_randomness(false);
        let c = d.forward(&x, Mode::Train).unwrap();
        assert_ne!(a, c);
    }
}
