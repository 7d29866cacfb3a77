use super::missing_forward;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over a batch of logits `[B × K]`.
#[derive(Debug, Clone, Default)]
pub struct SoftmaxCrossEntropy {
    cache: Option<(Tensor, Vec<usize>)>,
}

impl SoftmaxCrossEntropy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, logits: &Tensor, labels: &[usize]) -> Result<f64> {
        let (b, k) = logits.dims2()?;
        if labels.len() != b {
            return Err(Error::dim("cross-entropy labels", logits.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Range(format!("label {bad} with {k} classes")));
        }
        let mut probs = Vec::with_capacity(b * k);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            total += sum.ln() - (row[label] - max);
            probs.extend(exps.iter().map(|e| e / sum));
        }
        let loss = total / b as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy".into()));
        }
        self.cache = Some((Tensor::new(vec![b, k], probs)?, labels.to_vec()));
        Ok(loss)
    }

    /// dL/dlogits of the mean loss: `(softmax - onehot) / B`.
    pub fn backward(&self) -> Result<Tensor> {
        let (probs, labels) = self.cache.as_ref().ok_or_else(|| missing_forward("cross-entropy"))?;
        let (b, k) = probs.dims2()?;
        let mut g = probs.data().to_vec();
        for (i, &l) in labels.iter().enumerate() {
            g[i * k + l] -= 1.0;
        }
        g.iter_mut().for_each(|v| *v /= b as f64);
        Tensor::new(vec![b, k], g)
    }

    pub fn probabilities(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|(p, _)| p)
    }
}

/// Per-sample cross-entropy `-log softmax(z)[label]` (not averaged).
pub fn cross_entropy_terms(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::dim("cross-entropy labels", logits.shape(), &[labels.len()]));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            if label >= k {
                return Err(Error::Range(format!("label {label} with {k} classes")));
            }
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
            Ok(sum.ln() - (row[label] - max))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn symmetric_two_class_gradient() {
        let mut ce = SoftmaxCrossEntropy::new();
        ce.forward(&Tensor::zeros(&[1, 2]), &[0]).unwrap();
        assert_eq!(ce.backward().unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in 1..20 {
            let mut ce = SoftmaxCrossEntropy::new();
            let loss = ce.forward(&Tensor::full(&[3, k], 1.7), &[0, k - 1, k / 2]).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_class_loss_is_zero() {
        let mut ce = SoftmaxCrossEntropy::new();
        let x = Tensor::rand_normal(&mut Rng::new(0), &[5, 1], 0.0, 4.0).unwrap();
        assert_eq!(ce.forward(&x, &[0; 5]).unwrap(), 0.0);
    }

    #[test]
    fn large_logits_are_stable_and_nonnegative() {
        let mut ce = SoftmaxCrossEntropy::new();
        let x = Tensor::from_rows(&[vec![1000.0, -1000.0, 999.0]]).unwrap();
        let l = ce.forward(&x, &[2]).unwrap();
        assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn per_sample_terms_average_to_the_batch_loss() {
        let logits = Tensor::rand_normal(&mut Rng::new(9), &[6, 4], 0.0, 2.0).unwrap();
        let labels = [0, 1, 2, 3, 3, 0];
        let terms = cross_entropy_terms(&logits, &labels).unwrap();
        let mean = SoftmaxCrossEntropy::new().forward(&logits, &labels).unwrap();
        assert!((terms.iter().sum::<f64>() / 6.0 - mean).abs() < 1e-15);
    }

    #[test]
    fn bad_label_is_range_error() {
        let mut ce = SoftmaxCrossEntropy::new();
        assert!(matches!(ce.forward(&Tensor::zeros(&[1, 3]), &[3]), Err(Error::Range(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = Tensor::rand_normal(&mut Rng::new(3), &[4, 5], 0.0, 2.0).unwrap();
        let labels = [0, 4, 2, 2];
        let mut ce = SoftmaxCrossEntropy::new();
        ce.forward(&logits, &labels).unwrap();
        let g = ce.backward().unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let num = (ce.forward(&p, &labels).unwrap() - ce.forward(&m, &labels).unwrap()) / (2.0 * h);
            assert!(crate::layers::relative_error(g.data()[i], num) < 1e-6);
        }
    }
}
