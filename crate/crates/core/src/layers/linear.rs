use super::{kaiming_bound, missing_forward, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Fully connected layer: `y = x Wᵀ + b` for `x: [B × in]`, `W: [out × in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = kaiming_bound(in_features);
        let w = Tensor::rand_uniform(rng, &[out_features, in_features], -bound, bound)
            .expect("finite init");
        Self::from_weights(w, bias.then(|| Tensor::zeros(&[out_features])))
            .expect("consistent shapes")
    }

    pub fn from_weights(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if let Some(b) = &bias {
            if b.shape() != [out] {
                return Err(Error::dim("linear bias", weight.shape(), b.shape()));
            }
        }
        Ok(Linear {
            weight: Param::new(weight),
            bias: bias.map(Param::new),
            input: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl Layer for Linear {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn hyper(&self) -> serde_json::Value {
        serde_json::json!({
            "in": self.in_features(),
            "out": self.out_features(),
            "bias": self.bias.is_some(),
        })
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (b, d) = x.dims2().map_err(|_| Error::dim("linear", x.shape(), self.weight.value.shape()))?;
        if d != self.in_features() {
            return Err(Error::dim("linear", x.shape(), self.weight.value.shape()));
        }
        let mut y = x.matmul(&self.weight.value.transpose()?)?;
        if let Some(bias) = &self.bias {
            let out = self.out_features();
            let data = y.data_mut();
            for i in 0..b {
                for (v, &bj) in data[i * out..(i + 1) * out].iter_mut().zip(bias.value.data()) {
                    *v += bj;
                }
            }
            y.check_finite("linear bias")?;
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.input.as_ref().ok_or_else(|| missing_forward("linear"))?;
        let (b, _) = x.dims2()?;
        if grad_out.shape() != [b, self.out_features()] {
            return Err(Error::dim("linear backward", grad_out.shape(), &[b, self.out_features()]));
        }
        let gw = grad_out.transpose()?.matmul(x)?;
        self.weight.accumulate(&gw)?;
        if let Some(bias) = &mut self.bias {
            bias.accumulate(&grad_out.sum_rows()?)?;
        }
        grad_out.matmul(&self.weight.value)
    }

    fn params(&self) -> Vec<(String, &Param)> {
        let mut v = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let mut l = Linear::from_weights(Tensor::eye(3), Some(Tensor::zeros(&[3]))).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 4.0, 5.0]]).unwrap();
        assert_eq!(l.forward(&x, Mode::Eval).unwrap(), x);
    }

    #[test]
    fn forward_formula() {
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0]]).unwrap();
        let mut l = Linear::from_weights(w, Some(Tensor::new(vec![2], vec![0.5, 1.0]).unwrap())).unwrap();
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(l.forward(&x, Mode::Eval).unwrap().data(), &[11.5, -3.0]);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut l = Linear::new(2, 2, true, &mut Rng::new(0));
        assert!(matches!(l.backward(&Tensor::zeros(&[1, 2])), Err(Error::State(_))));
    }

    #[test]
    fn wrong_width_is_dimension_error() {
        let mut l = Linear::new(4, 2, true, &mut Rng::new(0));
        assert!(matches!(l.forward(&Tensor::zeros(&[1, 3]), Mode::Eval), Err(Error::Dimension { .. })));
    }

    #[test]
    fn param_count_with_and_without_bias() {
        assert_eq!(Linear::new(5, 3, true, &mut Rng::new(0)).param_count(), 18);
        assert_eq!(Linear::new(5, 3, false, &mut Rng::new(0)).param_count(), 15);
    }
}
