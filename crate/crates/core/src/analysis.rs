//! Gate statistics: histograms, per-feature mean/std, sparsity, channel
//! relevance and feature exports for external embedding tools.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::files::{write_bytes, write_json};
use crate::layers::{Linear, Mode};
use crate::model::GtnModel;
use crate::tensor::{Rng, Tensor};

pub const HISTOGRAM_BINS: usize = 10;
pub const DEFAULT_GATE_SAMPLES: usize = 100;
pub const SPARSITY_THRESHOLDS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Mean and population standard deviation (two-pass). Empty input gives
/// `(NaN, NaN)`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Eval-mode gates of `n` distinct samples drawn with `rng` (all samples if
/// the dataset is smaller). Rows follow the draw order.
pub fn collect_gates(model: &mut GtnModel, data: &Dataset, n: usize, rng: &mut Rng) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot collect gates from an empty dataset".into()));
    }
    let mut rows = rng.permutation(data.len());
    rows.truncate(n.min(data.len()));
    let (x, _) = data.batch(&rows)?;
    model
        .forward(&x, Mode::Eval)?
        .gate
        .ok_or_else(|| Error::State(format!("{} model has no transfer module", model.variant_name())))
}

/// Bin `i` covers `[i/10, (i+1)/10)`; the last bin also holds 1.0.
pub fn gate_bin(v: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Range(format!("gate value {v} outside [0, 1]")));
    }
    let edge = |i: usize| i as f64 / HISTOGRAM_BINS as f64;
    let mut i = ((v * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
    // Products can round across an edge; settle against the edges themselves.
    if v < edge(i) {
        i -= 1;
    } else if i + 1 < HISTOGRAM_BINS && v >= edge(i + 1) {
        i += 1;
    }
    Ok(i)
}

pub fn histogram_gates(gates: &[f64]) -> Result<[usize; HISTOGRAM_BINS]> {
    let mut bins = [0; HISTOGRAM_BINS];
    for &g in gates {
        bins[gate_bin(g)?] += 1;
    }
    Ok(bins)
}

/// Per-column mean and population std of an `[N × C]` matrix.
pub fn feature_stats(gates: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c) = gates.dims2()?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("feature statistics need N >= 2, got {n}")));
    }
    let mut column = vec![0.0; n];
    let (mut means, mut stds) = (Vec::with_capacity(c), Vec::with_capacity(c));
    for j in 0..c {
        for (i, v) in column.iter_mut().enumerate() {
            *v = gates.data()[i * c + j];
        }
        let (m, s) = mean_std(&column);
        means.push(m);
        stds.push(s);
    }
    Ok((means, stds))
}

/// Fraction of entries strictly below `threshold`.
pub fn sparsity(gates: &[f64], threshold: f64) -> f64 {
    gates.iter().filter(|&&g| g < threshold).count() as f64 / gates.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityEntry {
    pub threshold: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub model: String,
    pub dataset: String,
    pub sample_count: usize,
    pub channels: usize,
    pub histogram: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub per_feature_mean: Vec<f64>,
    pub per_feature_std: Vec<f64>,
    pub sparsity: Vec<SparsityEntry>,
    /// Mean and population std over classes of the main classifier's weight
    /// for each input feature.
    pub classifier_weight_mean: Vec<f64>,
    pub classifier_weight_std: Vec<f64>,
}

/// Per-input-feature statistics of a `[K × C]` classifier weight.
pub fn classifier_weight_stats(head: &Linear) -> (Vec<f64>, Vec<f64>) {
    let w = &head.weight.value;
    let (k, c) = (w.shape()[0], w.shape()[1]);
    (0..c)
        .map(|j| mean_std(&(0..k).map(|i| w.data()[i * c + j]).collect::<Vec<_>>()))
        .unzip()
}

impl GateReport {
    pub fn new(gates: &Tensor, head: &Linear, model: &str, dataset: &str) -> Result<Self> {
        let (n, c) = gates.dims2()?;
        if head.in_features() != c {
            return Err(Error::dim("gate report classifier", head.weight.value.shape(), &[n, c]));
        }
        let (per_feature_mean, per_feature_std) = feature_stats(gates)?;
        let (classifier_weight_mean, classifier_weight_std) = classifier_weight_stats(head);
        let (mean, std) = mean_std(gates.data());
        Ok(GateReport {
            model: model.into(),
            dataset: dataset.into(),
            sample_count: n,
            channels: c,
            histogram: histogram_gates(gates.data())?.to_vec(),
            mean,
            std,
            per_feature_mean,
            per_feature_std,
            sparsity: SPARSITY_THRESHOLDS
                .iter()
                .map(|&t| SparsityEntry {
                    threshold: t,
                    fraction: sparsity(gates.data(), t),
                })
                .collect(),
            classifier_weight_mean,
            classifier_weight_std,
        })
    }

    pub fn histogram_csv(&self) -> String {
        let total: usize = self.histogram.iter().sum();
        let mut out = String::from("bin,lower,upper,count,fraction\n");
        for (i, &count) in self.histogram.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{count},{}\n",
                i as f64 / 10.0,
                (i + 1) as f64 / 10.0,
                count as f64 / total as f64
            ));
        }
        out
    }

    pub fn features_csv(&self) -> String {
        let mut out = String::from("feature,gate_mean,gate_std,classifier_weight_mean,classifier_weight_std\n");
        for j in 0..self.channels {
            out.push_str(&format!(
                "{j},{},{},{},{}\n",
                self.per_feature_mean[j],
                self.per_feature_std[j],
                self.classifier_weight_mean[j],
                self.classifier_weight_std[j]
            ));
        }
        out
    }

    /// Two gnuplot data blocks (`index 0` histogram, `index 1` per-feature
    /// statistics) separated by blank lines.
    pub fn gnuplot_data(&self) -> String {
        let mut out = format!("# gate histogram: {} on {}\n# bin_center count\n", self.model, self.dataset);
        for (i, c) in self.histogram.iter().enumerate() {
            out.push_str(&format!("{} {c}\n", (i as f64 + 0.5) / 10.0));
        }
        out.push_str("\n\n# feature gate_mean gate_std classifier_weight_mean classifier_weight_std\n");
        for j in 0..self.channels {
            out.push_str(&format!(
                "{j} {} {} {} {}\n",
                self.per_feature_mean[j],
                self.per_feature_std[j],
                self.classifier_weight_mean[j],
                self.classifier_weight_std[j]
            ));
        }
        out
    }

    /// Writes `gate_report.json`, `gate_histogram.csv`, `gate_features.csv`
    /// and `gate_plot.dat` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("gate_report.json"), self)?;
        write_bytes(&dir.join("gate_histogram.csv"), self.histogram_csv().as_bytes())?;
        write_bytes(&dir.join("gate_features.csv"), self.features_csv().as_bytes())?;
        write_bytes(&dir.join("gate_plot.dat"), self.gnuplot_data().as_bytes())
    }
}

/// Collects gates on `n` samples and summarises them.
pub fn gate_report(
    model: &mut GtnModel,
    data: &Dataset,
    n: usize,
    rng: &mut Rng,
    dataset: &str,
) -> Result<GateReport> {
    let gates = collect_gates(model, data, n, rng)?;
    let name = model.variant_name().to_string();
    GateReport::new(&gates, model.main_head(), &name, dataset)
}

/// Eval-mode classifier inputs for the whole dataset, in order.
pub fn extract_features(model: &mut GtnModel, data: &Dataset) -> Result<Tensor> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts = idx
        .chunks(256)
        .map(|chunk| Ok(model.forward(&data.batch(chunk)?.0, Mode::Eval)?.head_input))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts)
}

/// CSV with header `f0,...,f{C-1},label`, one row per sample.
pub fn features_to_csv(features: &Tensor, labels: &[usize]) -> Result<String> {
    let (n, c) = features.dims2()?;
    if n != labels.len() {
        return Err(Error::dim("feature export", features.shape(), &[labels.len()]));
    }
    let mut out: String = (0..c).map(|j| format!("f{j},")).collect();
    out.push_str("label\n");
    for (i, label) in labels.iter().enumerate() {
        for v in features.row(i) {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{label}\n"));
    }
    Ok(out)
}

pub fn export_features(model: &mut GtnModel, data: &Dataset, path: &Path) -> Result<()> {
    let features = extract_features(model, data)?;
    write_bytes(path, features_to_csv(&features, data.labels())?.as_bytes())
}

/// Fisher ratio per column: variance of the class means over the mean
/// within-class variance. Constant columns score zero.
pub fn channel_relevance(features: &Tensor, labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let (n, c) = features.dims2()?;
    if n != labels.len() || n == 0 {
        return Err(Error::dim("channel relevance", features.shape(), &[labels.len()]));
    }
    let mut counts = vec![0usize; num_classes];
    let mut sums = vec![0.0; num_classes * c];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (j, v) in features.row(i).iter().enumerate() {
            sums[l * c + j] += v;
        }
    }
    let present: Vec<usize> = (0..num_classes).filter(|&k| counts[k] > 0).collect();
    let means: Vec<f64> = (0..num_classes * c)
        .map(|i| sums[i] / counts[i / c].max(1) as f64)
        .collect();
    let mut within = vec![0.0; c];
    for (i, &l) in labels.iter().enumerate() {
        for (j, v) in features.row(i).iter().enumerate() {
            within[j] += (v - means[l * c + j]).powi(2);
        }
    }
    Ok((0..c)
        .map(|j| {
            let class_means: Vec<f64> = present.iter().map(|&k| means[k * c + j]).collect();
            let (_, between) = mean_std(&class_means);
            let w = within[j] / n as f64;
            if between == 0.0 {
                0.0
            } else {
                between * between / (w + 1e-12)
            }
        })
        .collect())
}

/// Columns whose relevance is strictly above the median form the
/// informative set; the rest are uninformative.
pub fn split_by_relevance(relevance: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut sorted = relevance.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.is_empty() {
        0.0
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    (0..relevance.len()).partition(|&j| relevance[j] > median)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneSpec, ModelSpec, Variant};
    use crate::transfer::TransferConfig;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    fn model(variant: Variant, seed: u64) -> GtnModel {
        let bb = BackboneSpec::Mlp {
            input_dim: 6,
            widths: vec![8, 5],
        };
        let spec = variant.model_spec(bb, 0, 3, &TransferConfig::new(5), 0.2);
        GtnModel::new(spec, &Rng::new(seed)).unwrap()
    }

    fn data(n: usize, seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let x = Tensor::rand_normal(&mut rng, &[n, 6], 0.0, 1.0).unwrap();
        Dataset::new(x, (0..n).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn identity_gates_fill_the_last_bin() {
        let mut m = model(Variant::ClassicFt, 0);
        let g = collect_gates(&mut m, &data(150, 1), DEFAULT_GATE_SAMPLES, &mut Rng::new(2)).unwrap();
        assert_eq!(g.shape(), &[100, 5]);
        let h = histogram_gates(g.data()).unwrap();
        assert_eq!(h[9], 500);
        assert_eq!(h.iter().sum::<usize>(), 500);
    }

    #[test]
    fn zeroed_transfer_parameters_give_one_half() {
        let mut m = model(Variant::Gtn, 0);
        for (_, name, p) in m.params_mut() {
            if name.starts_with("neck.") {
                p.value.fill(0.0);
            }
        }
        let g = collect_gates(&mut m, &data(20, 1), 100, &mut Rng::new(0)).unwrap();
        assert_eq!(g.shape(), &[20, 5]);
        assert!(g.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn collected_gates_match_per_sample_forwards() {
        let mut m = model(Variant::Gtn, 4);
        let ds = data(40, 3);
        let g = collect_gates(&mut m, &ds, 10, &mut Rng::new(9)).unwrap();
        let rows = {
            let mut r = Rng::new(9).permutation(40);
            r.truncate(10);
            r
        };
        for (i, &row) in rows.iter().enumerate() {
            let (x, _) = ds.batch(&[row]).unwrap();
            let features = m.forward(&x, Mode::Eval).unwrap().features;
            let one = m.transfer_mut().unwrap().gate_forward(&features, Mode::Eval).unwrap().gate;
            assert_eq!(g.row(i), one.data());
        }
        let again = collect_gates(&mut m, &ds, 10, &mut Rng::new(9)).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn gate_collection_errors() {
        let mut m = model(Variant::Gtn, 0);
        assert!(collect_gates(&mut m, &data(5, 0), 10, &mut Rng::new(0)).is_ok());
        let bb = BackboneSpec::Mlp {
            input_dim: 6,
            widths: vec![8, 5],
        };
        let mut plain = GtnModel::new(ModelSpec::plain(bb, 0, 3), &Rng::new(0)).unwrap();
        assert!(matches!(
            collect_gates(&mut plain, &data(5, 0), 10, &mut Rng::new(0)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn histogram_boundaries() {
        assert_eq!(histogram_gates(&[0.05; 500]).unwrap()[0], 500);
        let tenths: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(histogram_gates(&tenths).unwrap(), [1; 10]);
        let decimal = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        assert_eq!(histogram_gates(&decimal).unwrap(), [1; 10]);
        assert_eq!(gate_bin(1.0).unwrap(), 9);
        assert_eq!(gate_bin(0.3 - 1e-17).unwrap(), 3);
        assert_eq!(gate_bin(f64::from_bits(0.3f64.to_bits() - 1)).unwrap(), 2);
        assert!(matches!(histogram_gates(&[1.2]), Err(Error::Range(_))));
        assert!(histogram_gates(&[-0.0001]).is_err());
        assert!(histogram_gates(&[f64::NAN]).is_err());
    }

    #[test]
    fn feature_stat_examples() {
        let c = Tensor::full(&[6, 3], 0.7);
        let (m, s) = feature_stats(&c).unwrap();
        assert!(m.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(s.iter().all(|&v| v < 1e-15));
        let alt = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(feature_stats(&alt).unwrap(), (vec![0.5, 0.5], vec![0.5, 0.5]));
        assert!(feature_stats(&Tensor::zeros(&[1, 3])).is_err());
        assert_eq!(sparsity(&[0.1, 0.5, 0.9, 0.2], 0.5), 0.5);
    }

    fn naive_bins(g: &[f64]) -> [usize; 10] {
        let mut bins = [0; 10];
        for &v in g {
            for i in 0..10 {
                let lo = i as f64 / 10.0;
                let hi = (i + 1) as f64 / 10.0;
                if v >= lo && (v < hi || (i == 9 && v <= 1.0)) {
                    bins[i] += 1;
                    break;
                }
            }
        }
        bins
    }

    proptest! {
        #[test]
        fn histogram_conserves_entries_and_matches_naive_loop(
            (n, c, seed) in (1usize..40, 1usize..12, any::<u64>())
        ) {
            let mut rng = Rng::new(seed);
            let mut g = Tensor::rand_uniform(&mut rng, &[n, c], 0.0, 1.0).unwrap();
            // Exercise the edges.
            g.data_mut()[0] = (rng.below(11)) as f64 / 10.0;
            let h = histogram_gates(g.data()).unwrap();
            prop_assert_eq!(h.iter().sum::<usize>(), n * c);
            prop_assert_eq!(h, naive_bins(g.data()));
        }

        #[test]
        fn stats_match_naive_oracle((n, c, seed) in (2usize..30, 1usize..10, any::<u64>())) {
            let mut rng = Rng::new(seed);
            let g = Tensor::rand_uniform(&mut rng, &[n, c], 0.0, 1.0).unwrap();
            let (m, s) = feature_stats(&g).unwrap();
            for j in 0..c {
                let mut sum = 0.0;
                for i in 0..n { sum += g.get(&[i, j]).unwrap(); }
                let mean = sum / n as f64;
                let mut sq = 0.0;
                for i in 0..n { sq += (g.get(&[i, j]).unwrap() - mean).powi(2); }
                prop_assert!((m[j] - mean).abs() < 1e-12);
                prop_assert!((s[j] - (sq / n as f64).sqrt()).abs() < 1e-12);
                prop_assert!(s[j] >= 0.0);
            }
            for t in SPARSITY_THRESHOLDS {
                let mut below = 0;
                for &v in g.data() { if v < t { below += 1; } }
                let f = sparsity(g.data(), t);
                prop_assert!((f - below as f64 / (n * c) as f64).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&f));
            }
        }
    }

    #[test]
    fn report_outputs_are_consistent() {
        let mut m = model(Variant::Gtn, 1);
        let r = gate_report(&mut m, &data(60, 2), 50, &mut Rng::new(3), "toy").unwrap();
        assert_eq!(r.histogram.iter().sum::<usize>(), 250);
        assert_eq!(r.per_feature_mean.len(), 5);
        assert_eq!(r.classifier_weight_std.len(), 5);
        assert_eq!(r.histogram_csv().lines().count(), 11);
        assert_eq!(r.features_csv().lines().count(), 6);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let back: GateReport = crate::files::read_json(&dir.path().join("gate_report.json")).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn exported_rows_equal_model_features() {
        let mut m = model(Variant::Gtn, 5);
        let ds = data(300, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        export_features(&mut m, &ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 301);
        let row: Vec<f64> = text.lines().nth(123).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        let (x, y) = ds.batch(&[122]).unwrap();
        let out = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(&row[..5], out.head_input.data());
        assert_eq!(row[5] as usize, y[0]);
        export_features(&mut m, &ds, &dir.path().join("g.csv")).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("g.csv")).unwrap());
    }

    #[test]
    fn relevance_finds_the_class_dependent_column() {
        let mut rng = Rng::new(0);
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let data: Vec<f64> = labels
            .iter()
            .flat_map(|&l| [l as f64 * 3.0 + rng.normal(), rng.normal(), 1.0, rng.normal()])
            .collect();
        let f = Tensor::new(vec![200, 4], data).unwrap();
        let r = channel_relevance(&f, &labels, 2).unwrap();
        assert!(r[0] > 1.0 && r[1] < 0.1 && r[2] == 0.0);
        let (hi, lo) = split_by_relevance(&r);
        assert!(hi.contains(&0) && lo.contains(&2));
        assert_eq!(hi.len() + lo.len(), 4);
    }
}
