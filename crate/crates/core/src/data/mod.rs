//! Datasets, splits, synthetic transfer tasks, augmentation and on-disk
//! formats.

mod augment;
mod io;
mod synthetic;

pub use augment::{
    augment, center_crop, flip_horizontal, normalize, resize_bilinear, sample_crop, AugmentationPolicy, CropBox,
};
pub use io::{
    dataset_from_csv, dataset_from_csv_file, dataset_to_csv, load_dataset, save_dataset, DatasetManifest, SplitEntry,
};
pub use synthetic::{generate_synthetic, synthetic_images, SyntheticMeta, SyntheticTask, SyntheticTransferSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Inputs `[N × …]` with integer labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rank() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::dim("dataset inputs vs labels", inputs.shape(), &[labels.len()]));
        }
        if num_classes == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one class".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Range(format!("label {bad} with {num_classes} classes")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Inputs and labels of the given rows, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.inputs.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (x, y) = self.batch(indices)?;
        Dataset::new(x, y, self.num_classes)
    }

    /// Same samples with the inputs replaced (e.g. by extracted features).
    pub fn with_inputs(&self, inputs: Tensor) -> Result<Dataset> {
        Dataset::new(inputs, self.labels.clone(), self.num_classes)
    }
}

/// Row indices of each split into the pool the splits were drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Disjoint and exhaustive over `0..pool_size`.
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        let mut seen = vec![false; pool_size];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= pool_size || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Format(format!("split index {i} is out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Format("splits do not cover every sample".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub indices: SplitIndices,
    /// Where the data came from (generator spec, source file).
    pub provenance: serde_json::Value,
}

impl SplitDataset {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes()
    }

    /// Splits a pool per class: the first `fractions[0]` of each shuffled
    /// class go to train, the next `fractions[1]` to val, the rest to test.
    /// Each split keeps pool order.
    pub fn stratified(
        pool: &Dataset,
        fractions: (f64, f64),
        rng: &mut Rng,
        provenance: serde_json::Value,
    ) -> Result<Self> {
        let (f_train, f_val) = fractions;
        if !(f_train > 0.0 && f_val >= 0.0 && f_train + f_val < 1.0) {
            return Err(Error::InvalidArgument(format!("bad split fractions {fractions:?}")));
        }
        let mut indices = SplitIndices {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for c in 0..pool.num_classes() {
            let mut members: Vec<usize> = (0..pool.len()).filter(|&i| pool.labels()[i] == c).collect();
            rng.shuffle(&mut members);
            let n = members.len();
            let n_train = (n as f64 * f_train).round() as usize;
            let n_val = ((n as f64 * f_val).round() as usize).min(n - n_train);
            indices.train.extend_from_slice(&members[..n_train]);
            indices.val.extend_from_slice(&members[n_train..n_train + n_val]);
            indices.test.extend_from_slice(&members[n_train + n_val..]);
        }
        indices.train.sort_unstable();
        indices.val.sort_unstable();
        indices.test.sort_unstable();
        Self::from_indices(pool, indices, provenance)
    }

    pub fn from_indices(pool: &Dataset, indices: SplitIndices, provenance: serde_json::Value) -> Result<Self> {
        indices.validate(pool.len())?;
        for split in Split::ALL {
            if indices.get(split).is_empty() {
                return Err(Error::InvalidArgument(format!("{} split is empty", split.name())));
            }
        }
        Ok(SplitDataset {
            train: pool.subset(&indices.train)?,
            val: pool.subset(&indices.val)?,
            test: pool.subset(&indices.test)?,
            indices,
            provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n_per_class: usize, k: usize) -> Dataset {
        let n = n_per_class * k;
        let x = Tensor::new(vec![n, 2], (0..2 * n).map(|v| v as f64).collect()).unwrap();
        Dataset::new(x, (0..n).map(|i| i % k).collect(), k).unwrap()
    }

    #[test]
    fn labels_must_be_in_range() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(matches!(Dataset::new(x.clone(), vec![0, 2], 2), Err(Error::Range(_))));
        assert!(Dataset::new(x, vec![0], 2).is_err());
    }

    #[test]
    fn stratified_split_is_disjoint_exhaustive_and_balanced() {
        let p = pool(100, 4);
        let s = SplitDataset::stratified(&p, (0.7, 0.15), &mut Rng::new(1), serde_json::Value::Null).unwrap();
        s.indices.validate(400).unwrap();
        assert_eq!(s.train.class_counts(), vec![70; 4]);
        assert_eq!(s.val.class_counts(), vec![15; 4]);
        assert_eq!(s.test.class_counts(), vec![15; 4]);
        let (row, label) = (s.indices.val[3], s.val.labels()[3]);
        assert_eq!(s.val.inputs().row(3), p.inputs().row(row));
        assert_eq!(label, p.labels()[row]);
    }

    #[test]
    fn overlapping_indices_are_rejected() {
        let idx = SplitIndices {
            train: vec![0, 1],
            val: vec![1],
            test: vec![2],
        };
        assert!(idx.validate(3).is_err());
        let idx = SplitIndices {
            train: vec![0],
            val: vec![1],
            test: vec![],
        };
        assert!(idx.validate(3).is_err());
    }
}
