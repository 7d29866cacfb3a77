//! Synthetic source/target task pairs with a controllable factor overlap.
//!
//! Each class of a task has a prototype supported only on that task's
//! informative dimensions; a sample is its class prototype plus Gaussian
//! noise on every dimension. The source uses the factor set `S`, the target
//! `T`, and `ω = |S ∩ T| / |T|` plays the role of domain similarity.
//! Prototype values come from one bank drawn per seed, so with `ω = 1`,
//! `|T| = |S|` and equal class counts the two tasks are identically
//! distributed.

use serde::{Deserialize, Serialize};

use super::{Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTransferSpec {
    pub input_dim: usize,
    /// `|S|`.
    pub source_factors: usize,
    /// `|T|`.
    pub target_factors: usize,
    /// `ω`; `round(ω·|T|)` target factors are shared with the source.
    pub overlap: f64,
    pub source_classes: usize,
    pub target_classes: usize,
    /// Training samples per class; validation and test each get 15/70 of it.
    pub train_per_class: usize,
    pub noise_std: f64,
    /// Standard deviation of prototype entries on informative dimensions.
    pub prototype_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticTransferSpec {
    fn default() -> Self {
        SyntheticTransferSpec {
            input_dim: 64,
            source_factors: 24,
            target_factors: 16,
            overlap: 0.3,
            source_classes: 8,
            target_classes: 4,
            train_per_class: 200,
            noise_std: 0.5,
            prototype_scale: 0.6,
            seed: 0,
        }
    }
}

impl SyntheticTransferSpec {
    pub fn shared_factors(&self) -> usize {
        ((self.overlap * self.target_factors as f64).round() as usize).min(self.target_factors)
    }

    pub fn samples_per_class(&self) -> usize {
        (self.train_per_class as f64 / 0.7).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap must lie in [0, 1], got {}", self.overlap)));
        }
        if !(self.noise_std > 0.0) || !(self.prototype_scale > 0.0) {
            return Err(Error::Config("noise_std and prototype_scale must be positive".into()));
        }
        if self.source_factors == 0 || self.target_factors == 0 {
            return Err(Error::Config("factor sets must be non-empty".into()));
        }
        if self.shared_factors() > self.source_factors {
            return Err(Error::Config(format!(
                "{} shared factors exceed the {} source factors",
                self.shared_factors(),
                self.source_factors
            )));
        }
        let union = self.source_factors + self.target_factors - self.shared_factors();
        if union > self.input_dim {
            return Err(Error::Config(format!(
                "infeasible factor sets: |S ∪ T| = {union} exceeds input_dim {}",
                self.input_dim
            )));
        }
        if self.source_classes == 0 || self.target_classes == 0 || self.train_per_class < 5 {
            return Err(Error::Config("need classes and at least 5 training samples per class".into()));
        }
        Ok(())
    }
}

/// Construction record of a generated pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub source_dims: Vec<usize>,
    pub target_dims: Vec<usize>,
    pub shared_dims: Vec<usize>,
    /// Realised `|S ∩ T| / |T|`.
    pub overlap: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub source: SplitDataset,
    pub target: SplitDataset,
    pub meta: SyntheticMeta,
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

fn generate_task(
    spec: &SyntheticTransferSpec,
    bank: &Tensor,
    dims: &[usize],
    classes: usize,
    rng: &Rng,
    role: &str,
) -> Result<SplitDataset> {
    let d = spec.input_dim;
    let mut mask = vec![0.0; d];
    for &i in dims {
        mask[i] = 1.0;
    }
    let n = spec.samples_per_class();
    let mut sampler = rng.child("samples");
    let mut data = Vec::with_capacity(classes * n * d);
    let mut labels = Vec::with_capacity(classes * n);
    for c in 0..classes {
        let proto = bank.row(c);
        for _ in 0..n {
            data.extend((0..d).map(|j| mask[j] * proto[j] + spec.noise_std * sampler.normal()));
            labels.push(c);
        }
    }
    let pool = Dataset::new(Tensor::new(vec![classes * n, d], data)?, labels, classes)?;
    let provenance = serde_json::json!({
        "generator": "synthetic-transfer",
        "role": role,
        "spec": spec,
        "informative_dims": dims,
    });
    SplitDataset::stratified(&pool, (0.7, 0.15), &mut rng.child("split"), provenance)
}

/// Deterministic in `spec` (including its seed). The source task does not
/// depend on `overlap` or on any target setting.
pub fn generate_synthetic(spec: &SyntheticTransferSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let perm = root.child("factors").permutation(spec.input_dim);
    let (ns, nt, shared) = (spec.source_factors, spec.target_factors, spec.shared_factors());
    let source_dims = sorted(perm[..ns].to_vec());
    let shared_dims = sorted(perm[..shared].to_vec());
    let target_dims = sorted(perm[..shared].iter().chain(&perm[ns..ns + nt - shared]).copied().collect());

    let k = spec.source_classes.max(spec.target_classes);
    let bank = Tensor::rand_normal(
        &mut root.child("prototypes"),
        &[k, spec.input_dim],
        0.0,
        spec.prototype_scale,
    )?;
    let source = generate_task(spec, &bank, &source_dims, spec.source_classes, &root.child("source"), "source")?;
    let target = generate_task(spec, &bank, &target_dims, spec.target_classes, &root.child("target"), "target")?;
    Ok(SyntheticTask {
        source,
        target,
        meta: SyntheticMeta {
            overlap: shared as f64 / nt as f64,
            source_dims,
            target_dims,
            shared_dims,
        },
    })
}

/// Image classification data `[N × C × S × S]`: class `c` is a sinusoidal
/// grating with a class-specific orientation and frequency plus noise.
pub fn synthetic_images(
    num_classes: usize,
    per_class: usize,
    channels: usize,
    size: usize,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || channels == 0 || size == 0 {
        return Err(Error::InvalidArgument("image generator needs positive sizes".into()));
    }
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * channels * size * size);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        let theta = std::f64::consts::PI * c as f64 / num_classes as f64;
        let freq = 2.0 + (c % 3) as f64;
        for _ in 0..per_class {
            let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
            for ch in 0..channels {
                for y in 0..size {
                    for x in 0..size {
                        let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / size as f64;
                        let v = (std::f64::consts::TAU * freq * u + phase + ch as f64).sin();
                        data.push(v + noise_std * rng.normal());
                    }
                }
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, channels, size, size], data)?, labels, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    #[test]
    fn full_overlap_with_equal_sizes_gives_identical_distributions() {
        let spec = SyntheticTransferSpec {
            overlap: 1.0,
            source_factors: 16,
            target_factors: 16,
            source_classes: 4,
            target_classes: 4,
            ..Default::default()
        };
        let t = generate_synthetic(&spec).unwrap();
        assert_eq!(t.meta.source_dims, t.meta.target_dims);
        assert_eq!(t.meta.overlap, 1.0);
        // Same prototypes: class means agree up to sampling noise.
        for c in 0..4 {
            let mean = |ds: &Dataset, j: usize| {
                let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == c).collect();
                rows.iter().map(|&i| ds.inputs().row(i)[j]).sum::<f64>() / rows.len() as f64
            };
            for j in 0..64 {
                assert!((mean(&t.source.train, j) - mean(&t.target.train, j)).abs() < 0.2);
            }
        }
    }

    #[test]
    fn zero_overlap_gives_disjoint_factor_sets() {
        let spec = SyntheticTransferSpec {
            overlap: 0.0,
            ..Default::default()
        };
        let t = generate_synthetic(&spec).unwrap();
        assert!(t.meta.shared_dims.is_empty());
        assert!(t.meta.target_dims.iter().all(|d| !t.meta.source_dims.contains(d)));
        assert_eq!(t.meta.target_dims.len(), 16);
    }

    #[test]
    fn overlap_is_rounded_from_omega() {
        for (omega, shared) in [(0.1, 2), (0.3, 5), (0.9, 14), (1.0, 16)] {
            let spec = SyntheticTransferSpec {
                overlap: omega,
                ..Default::default()
            };
            let t = generate_synthetic(&spec).unwrap();
            assert_eq!(t.meta.shared_dims.len(), shared);
            assert!(t.meta.shared_dims.iter().all(|d| t.meta.source_dims.contains(d)));
            assert!(t.meta.shared_dims.iter().all(|d| t.meta.target_dims.contains(d)));
        }
    }

    #[test]
    fn generation_is_deterministic_and_source_ignores_omega() {
        let spec = SyntheticTransferSpec {
            seed: 3,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        let c = generate_synthetic(&SyntheticTransferSpec { overlap: 0.9, ..spec }).unwrap();
        assert_eq!(a.source.train, c.source.train);
        assert_ne!(a.target.train, c.target.train);
    }

    #[test]
    fn default_sizes_follow_the_70_15_15_split() {
        let t = generate_synthetic(&SyntheticTransferSpec::default()).unwrap();
        assert_eq!(t.source.get(Split::Train).class_counts(), vec![200; 8]);
        assert_eq!(t.source.get(Split::Val).class_counts(), vec![43; 8]);
        assert_eq!(t.target.get(Split::Test).class_counts(), vec![43; 4]);
        assert_eq!(t.target.train.sample_shape(), &[64]);
    }

    #[test]
    fn infeasible_factor_sets_are_rejected() {
        let spec = SyntheticTransferSpec {
            input_dim: 30,
            overlap: 0.0,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
        let spec = SyntheticTransferSpec {
            noise_std: 0.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn images_have_the_requested_shape() {
        let ds = synthetic_images(3, 4, 2, 8, 0.1, &mut Rng::new(0)).unwrap();
        assert_eq!(ds.inputs().shape(), &[12, 2, 8, 8]);
        assert_eq!(ds.class_counts(), vec![4; 3]);
    }
}
