//! Dataset directories and CSV interchange.
//!
//! A directory holds `manifest.json`, `{train,val,test}.bin` (tensor binary
//! format) and `{train,val,test}.labels` (little-endian `u32` per sample).
//! Every payload's SHA-256 is recorded in the manifest and verified on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Split, SplitDataset, SplitIndices};
use crate::error::{Error, Result, ResultExt};
use crate::files::{read_json, read_string, read_verified, sha256_hex, write_bytes, write_json};
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "gtn-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub count: usize,
    pub inputs_file: String,
    pub inputs_sha256: String,
    pub labels_file: String,
    pub labels_sha256: String,
    pub class_counts: Vec<usize>,
    /// Rows of the original pool in this split.
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub sample_shape: Vec<usize>,
    pub num_classes: usize,
    pub splits: BTreeMap<Split, SplitEntry>,
    pub provenance: serde_json::Value,
}

fn labels_to_bytes(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(labels.len() * 4);
    for &l in labels {
        let v = u32::try_from(l).map_err(|_| Error::Range(format!("label {l} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn labels_from_bytes(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("label payload of {} bytes is not a u32 array", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect())
}

pub fn save_dataset(ds: &SplitDataset, dir: &Path) -> Result<()> {
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let d = ds.get(split);
        let inputs = d.inputs().to_bytes();
        let labels = labels_to_bytes(d.labels())?;
        let inputs_file = format!("{}.bin", split.name());
        let labels_file = format!("{}.labels", split.name());
        write_bytes(&dir.join(&inputs_file), &inputs)?;
        write_bytes(&dir.join(&labels_file), &labels)?;
        splits.insert(
            split,
            SplitEntry {
                count: d.len(),
                inputs_sha256: sha256_hex(&inputs),
                labels_sha256: sha256_hex(&labels),
                inputs_file,
                labels_file,
                class_counts: d.class_counts(),
                indices: ds.indices.get(split).to_vec(),
            },
        );
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        sample_shape: ds.train.sample_shape().to_vec(),
        num_classes: ds.num_classes(),
        splits,
        provenance: ds.provenance.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<SplitDataset> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!(
            "{}: unsupported dataset format '{}'",
            dir.display(),
            manifest.format
        )));
    }
    let mut parts = BTreeMap::new();
    for split in Split::ALL {
        let entry = manifest
            .splits
            .get(&split)
            .ok_or_else(|| Error::Format(format!("{}: manifest lacks the {} split", dir.display(), split.name())))?;
        let inputs = Tensor::from_bytes(&read_verified(&dir.join(&entry.inputs_file), &entry.inputs_sha256)?)
            .with_context(|| format!("{} inputs", split.name()))?;
        let labels = labels_from_bytes(&read_verified(&dir.join(&entry.labels_file), &entry.labels_sha256)?)?;
        if inputs.shape()[1..] != manifest.sample_shape[..] || labels.len() != entry.count {
            return Err(Error::Format(format!(
                "{} split does not match the manifest shape {:?} / count {}",
                split.name(),
                manifest.sample_shape,
                entry.count
            )));
        }
        let d = Dataset::new(inputs, labels, manifest.num_classes)
            .with_context(|| format!("{} split of {}", split.name(), dir.display()))?;
        parts.insert(split, (d, entry.indices.clone()));
    }
    let mut take = |s: Split| parts.remove(&s).expect("all splits loaded");
    let (train, train_idx) = take(Split::Train);
    let (val, val_idx) = take(Split::Val);
    let (test, test_idx) = take(Split::Test);
    let indices = SplitIndices {
        train: train_idx,
        val: val_idx,
        test: test_idx,
    };
    indices.validate(train.len() + val.len() + test.len())?;
    Ok(SplitDataset {
        train,
        val,
        test,
        indices,
        provenance: manifest.provenance,
    })
}

/// Parses a vector dataset: a header row naming the columns, one of which is
/// `label`; every other column is a feature. Labels must be non-negative
/// integers; `num_classes` defaults to `max label + 1`.
pub fn dataset_from_csv(text: &str, num_classes: Option<usize>) -> Result<Dataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let label_col = header
        .iter()
        .position(|&h| h == "label")
        .ok_or_else(|| Error::Format("CSV header has no 'label' column".into()))?;
    let width = header.len() - 1;
    if width == 0 {
        return Err(Error::Format("CSV has no feature columns".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(Error::Format(format!(
                "CSV row {} has {} fields, expected {}",
                row + 2,
                cells.len(),
                header.len()
            )));
        }
        for (j, cell) in cells.iter().enumerate() {
            if j == label_col {
                labels.push(
                    cell.parse::<usize>()
                        .map_err(|_| Error::Format(format!("CSV row {}: bad label '{cell}'", row + 2)))?,
                );
            } else {
                data.push(
                    cell.parse::<f64>()
                        .map_err(|_| Error::Format(format!("CSV row {}: bad value '{cell}'", row + 2)))?,
                );
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Format("CSV has no data rows".into()));
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::new(Tensor::new(vec![labels.len(), width], data)?, labels, k)
}

pub fn dataset_from_csv_file(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    dataset_from_csv(&read_string(path)?, num_classes).with_context(|| path.display().to_string())
}

/// Header `x0,...,x{D-1},label`; rank-2 datasets only.
pub fn dataset_to_csv(ds: &Dataset) -> Result<String> {
    let (n, d) = ds.inputs().dims2()?;
    let mut out: String = (0..d).map(|j| format!("x{j},")).collect();
    out.push_str("label\n");
    for i in 0..n {
        for v in ds.inputs().row(i) {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{}\n", ds.labels()[i]));
    }
    Ok(out)
}
