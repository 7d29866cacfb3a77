use super::{missing_forward, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch normalisation over `[B × C]` inputs.
///
/// Training modes normalise with the batch mean and biased variance and
/// update the running buffers (`running = (1 - momentum)·running +
/// momentum·batch`, unbiased variance); evaluation uses the running buffers
/// only.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    train: bool,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        Self::with_options(channels, 0.1, 1e-5)
    }

    pub fn with_options(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm1d {
            gamma: Param::new(Tensor::ones(&[channels])),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum,
            eps,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

impl Layer for BatchNorm1d {
    fn kind(&self) -> &'static str {
        "batchnorm1d"
    }

    fn hyper(&self) -> serde_json::Value {
        serde_json::json!({ "channels": self.channels(), "momentum": self.momentum, "eps": self.eps })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c) = x.dims2()?;
        if c != self.channels() {
            return Err(Error::dim("batchnorm1d", x.shape(), self.gamma.value.shape()));
        }
        let (mean, var) = if mode.is_train() {
            let mut mean = vec![0.0; c];
            for i in 0..b {
                for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            let mut var = vec![0.0; c];
            for i in 0..b {
                for ((s, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let unbiased: Vec<f64> = var.iter().map(|s| s / (b.max(2) - 1) as f64).collect();
            var.iter_mut().for_each(|s| *s /= b as f64);
            let mom = self.momentum;
            for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - mom) * *r + mom * m;
            }
            for (r, &v) in self.running_var.data_mut().iter_mut().zip(&unbiased) {
                *r = (1.0 - mom) * *r + mom * v;
            }
            (mean, var)
        } else {
            (self.running_mean.data().to_vec(), self.running_var.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(b * c);
        let mut y = Vec::with_capacity(b * c);
        for i in 0..b {
            for (j, &v) in x.row(i).iter().enumerate() {
                let h = (v - mean[j]) * inv_std[j];
                xhat.push(h);
                y.push(self.gamma.value.data()[j] * h + self.beta.value.data()[j]);
            }
        }
        self.cache = Some(BnCache {
            xhat: Tensor::new(vec![b, c], xhat)?,
            inv_std,
            train: mode.is_train(),
        });
        Tensor::new(vec![b, c], y)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_forward("batchnorm1d"))?;
        let (b, c) = cache.xhat.dims2()?;
        if grad_out.shape() != [b, c] {
            return Err(Error::dim("batchnorm1d backward", grad_out.shape(), &[b, c]));
        }
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..b {
            for j in 0..c {
                let g = grad_out.row(i)[j];
                dgamma[j] += g * cache.xhat.row(i)[j];
                dbeta[j] += g;
            }
        }
        let gamma = self.gamma.value.data();
        let mut dx = vec![0.0; b * c];
        if cache.train {
            // dx = inv_std/B · (B·dxhat - Σ dxhat - xhat·Σ(dxhat·xhat)), dxhat = γ·dy
            let n = b as f64;
            for j in 0..c {
                let sum_dxhat = dbeta[j] * gamma[j];
                let sum_dxhat_xhat = dgamma[j] * gamma[j];
                for i in 0..b {
                    let dxhat = grad_out.row(i)[j] * gamma[j];
                    dx[i * c + j] = cache.inv_std[j] / n
                        * (n * dxhat - sum_dxhat - cache.xhat.row(i)[j] * sum_dxhat_xhat);
                }
            }
        } else {
            for i in 0..b {
                for j in 0..c {
                    dx[i * c + j] = grad_out.row(i)[j] * gamma[j] * cache.inv_std[j];
                }
            }
        }
        self.gamma.accumulate(&Tensor::new(vec![c], dgamma)?)?;
        self.beta.accumulate(&Tensor::new(vec![c], dbeta)?)?;
        Tensor::new(vec![b, c], dx)
    }

    fn params(&self) -> Vec<(String, &Param)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }

    fn buffers(&self) -> Vec<(String, &Tensor)> {
        vec![("running_mean".into(), &self.running_mean), ("running_var".into(), &self.running_var)]
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn train_mode_normalises_batch() {
        let mut bn = BatchNorm1d::new(3);
        let x = Tensor::rand_normal(&mut Rng::new(4), &[16, 3], 2.0, 3.0).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let mean = y.sum_rows().unwrap().scale(1.0 / 16.0).unwrap();
        assert!(mean.max_abs() < 1e-12);
        assert!(bn.running_mean.max_abs() > 0.0);
    }

    #[test]
    fn eval_mode_is_deterministic_affine() {
        let mut bn = BatchNorm1d::new(3);
        let x = Tensor::rand_normal(&mut Rng::new(4), &[8, 3], 2.0, 3.0).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        let before = bn.running_mean.clone();
        let a = bn.forward(&x, Mode::Eval).unwrap();
        let b = bn.forward(&x, Mode::Eval).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(before, bn.running_mean);
    }
}
