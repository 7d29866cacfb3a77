//! The acceptance suite. Every criterion yields a [`CriterionResult`] with
//! its tolerance taken from the `[acceptance]` config section. Criteria that
//! train share pretrained backbones and transfer runs through [`Suite`], so
//! each (seed, overlap, variant, λ) run happens at most once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    channel_relevance, collect_gates, feature_stats, histogram_gates, mean_std, sparsity, split_by_relevance,
    HISTOGRAM_BINS, SPARSITY_THRESHOLDS,
};
use crate::data::{Split, SplitDataset};
use crate::error::{Error, Result, ResultExt};
use crate::files::{read_bytes, write_bytes, write_json};
use crate::layers::gradcheck::{check_gradients, Differentiable, DEFAULT_STEP};
use crate::layers::{
    cross_entropy_terms, grad_check, BatchNorm1d, Conv2d, Dropout, GlobalAvgPool, Layer, Linear, MaxPool2d, Mode, Relu,
    Sigmoid, SoftmaxCrossEntropy,
};
use crate::model::{model_grad_check, Backbone, BackboneSpec, GtnModel, ModelSpec, Variant};
use crate::optim::fit;
use crate::tensor::{Rng, Tensor};
use crate::transfer::{transfer_param_count, GateVariant, TransferConfig, TransferModule};

use super::commands::{cmd_analyze, cmd_eval, cmd_lwf, cmd_pretrain, cmd_transfer, seed_dir, LwfRecord, LwfReport, Task};
use super::config::{DataKind, ExperimentConfig};
use super::pipeline::{load_task, pretrain, rebuild, refinetune_source, transfer, TaskData};

pub const CRITERIA: [u32; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

/// One row of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub criterion_id: u32,
    pub description: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    pub runtime_s: f64,
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:>2}: {} (value {}, threshold {}, {:.1} s)",
            if self.pass { "PASS" } else { "FAIL" },
            self.criterion_id,
            self.description,
            fmt_num(self.value),
            fmt_num(self.threshold),
            self.runtime_s
        )
    }
}

/// A criterion's result with its detail record and any CSV tables.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub result: CriterionResult,
    pub details: Value,
    pub tables: Vec<(String, String)>,
}

pub fn description(id: u32) -> &'static str {
    match id {
        1 => "finite-difference gradients of every layer and the full models",
        2 => "identity gate is bit-identical to the gate-free model",
        3 => "eval gates lie in [0,1]^C and parameter counts match the closed form",
        4 => "lambda=0 reproduces no-aux gradients; lambda sweep report",
        5 => "gtn >= classic fine-tuning - margin and >= fixed feature",
        6 => "gates rise with domain similarity and favour informative channels",
        7 => "gated vs summation variants on every preset; summation gradients",
        8 => "source accuracy after re-fine-tuning stays near the oracle",
        9 => "histogram, statistics and sparsity match naive oracles",
        10 => "command reruns are bit-identical",
        _ => "unknown criterion",
    }
}

struct Pretrained {
    backbone: Backbone,
    source_test_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct RunKey {
    seed: u64,
    overlap: u64,
    variant: Variant,
    lambda: u64,
}

/// Outcome of one transfer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub overlap: f64,
    pub variant: Variant,
    pub lambda: f64,
    pub test_acc: f64,
    pub final_val_acc: f64,
    pub gate_mean: Option<f64>,
    /// Mean gate over the channels above the median relevance.
    pub informative_gate: Option<f64>,
    pub other_gate: Option<f64>,
}

/// Lazily computed, shared training state of one suite run.
pub struct Suite {
    cfg: ExperimentConfig,
    version: String,
    results_dir: PathBuf,
    pool: Option<rayon::ThreadPool>,
    pretrained: Mutex<BTreeMap<u64, Pretrained>>,
    runs: Mutex<BTreeMap<RunKey, (RunSummary, GtnModel)>>,
}

impl Suite {
    pub fn new(cfg: ExperimentConfig, version: &str, results_dir: &Path) -> Result<Self> {
        let pool = if cfg.run.threads > 0 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.run.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("run.threads: {e}")))?,
            )
        } else {
            None
        };
        Ok(Suite {
            cfg,
            version: version.into(),
            results_dir: results_dir.to_path_buf(),
            pool,
            pretrained: Mutex::new(BTreeMap::new()),
            runs: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    fn seeds(&self) -> Vec<u64> {
        self.cfg.seeds()
    }

    fn synthetic(&self) -> bool {
        self.cfg.data.kind == DataKind::Synthetic
    }

    /// The configured overlap if the data is not synthetic.
    fn effective_overlap(&self, overlap: f64) -> f64 {
        if self.synthetic() {
            overlap
        } else {
            self.cfg.data.overlap
        }
    }

    fn run_config(&self, overlap: f64, lambda: f64) -> ExperimentConfig {
        let mut c = self.cfg.clone();
        c.data.overlap = overlap;
        c.model.lambda = lambda;
        c
    }

    fn task(&self, seed: u64, overlap: f64) -> Result<TaskData> {
        load_task(&self.run_config(overlap, self.cfg.model.lambda), seed)
    }

    fn ensure_pretrained(&self) -> Result<()> {
        let missing: Vec<u64> = {
            let map = self.pretrained.lock().expect("lock");
            self.seeds().into_iter().filter(|s| !map.contains_key(s)).collect()
        };
        let done = self.install(|| {
            missing
                .par_iter()
                .map(|&seed| {
                    let data = self.task(seed, self.cfg.data.overlap)?;
                    let t = pretrain(&self.cfg, &data.source, seed, None).with_context(|| format!("seed {seed}"))?;
                    let source_test_acc = t.test.accuracy;
                    Ok((
                        seed,
                        Pretrained {
                            backbone: t.model.into_backbone(),
                            source_test_acc,
                        },
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        self.pretrained.lock().expect("lock").extend(done);
        Ok(())
    }

    fn key(&self, seed: u64, overlap: f64, variant: Variant, lambda: f64) -> RunKey {
        RunKey {
            seed,
            overlap: self.effective_overlap(overlap).to_bits(),
            variant,
            lambda: if variant.uses_aux() { lambda.to_bits() } else { 0 },
        }
    }

    /// Trains every missing (seed, overlap, variant, λ) run and returns the
    /// summaries for all seeds, sorted by seed.
    fn runs(&self, overlap: f64, variant: Variant, lambda: f64) -> Result<Vec<RunSummary>> {
        self.ensure_runs(&[(overlap, variant, lambda)])?;
        let map = self.runs.lock().expect("lock");
        Ok(self
            .seeds()
            .into_iter()
            .map(|s| map[&self.key(s, overlap, variant, lambda)].0.clone())
            .collect())
    }

    fn ensure_runs(&self, specs: &[(f64, Variant, f64)]) -> Result<()> {
        self.ensure_pretrained()?;
        let missing: Vec<(u64, f64, Variant, f64)> = {
            let map = self.runs.lock().expect("lock");
            self.seeds()
                .into_iter()
                .flat_map(|s| specs.iter().map(move |&(o, v, l)| (s, o, v, l)))
                .filter(|&(s, o, v, l)| !map.contains_key(&self.key(s, o, v, l)))
                .collect()
        };
        let done = self.install(|| {
            missing
                .par_iter()
                .map(|&(seed, overlap, variant, lambda)| {
                    self.train_run(seed, overlap, variant, lambda)
                        .with_context(|| format!("{variant} run, seed {seed}, overlap {overlap}, lambda {lambda}"))
                        .map(|r| (self.key(seed, overlap, variant, lambda), r))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        self.runs.lock().expect("lock").extend(done);
        Ok(())
    }

    fn train_run(&self, seed: u64, overlap: f64, variant: Variant, lambda: f64) -> Result<(RunSummary, GtnModel)> {
        let overlap = self.effective_overlap(overlap);
        let cfg = self.run_config(overlap, lambda);
        let backbone = self.pretrained.lock().expect("lock")[&seed].backbone.try_clone()?;
        let data = load_task(&cfg, seed)?;
        let mut t = transfer(&cfg, backbone, &data.target, variant, seed, None)?;
        let (informative_gate, other_gate) = if t.model.transfer().is_some() {
            let (a, b) = gate_selectivity(&mut t.model, &data.target)?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        let summary = RunSummary {
            seed,
            overlap,
            variant,
            lambda: if variant.uses_aux() { lambda } else { 0.0 },
            test_acc: t.test.accuracy,
            final_val_acc: t.log.last().map_or(f64::NAN, |e| e.val_acc),
            gate_mean: t.test.gate_mean,
            informative_gate,
            other_gate,
        };
        Ok((summary, t.model))
    }

    fn source_oracle(&self, seed: u64) -> f64 {
        self.pretrained.lock().expect("lock")[&seed].source_test_acc
    }

    /// Runs one criterion; an error becomes a failing result.
    pub fn run(&self, id: u32) -> Outcome {
        let start = Instant::now();
        let outcome = match id {
            1 => self.gradients(),
            2 => self.bypass(),
            3 => self.gate_range(),
            4 => self.aux_contract(),
            5 => self.transfer_benefit(),
            6 => self.similarity_gating(),
            7 => self.summation(),
            8 => self.forgetting(),
            9 => self.analysis_oracles(),
            10 => self.determinism(),
            _ => Err(Error::Config(format!("unknown criterion {id} (expected 1-10)"))),
        };
        let runtime_s = start.elapsed().as_secs_f64();
        match outcome {
            Ok(mut o) => {
                o.result.runtime_s = runtime_s;
                o
            }
            Err(e) => Outcome {
                result: CriterionResult {
                    criterion_id: id,
                    description: description(id).into(),
                    value: f64::NAN,
                    threshold: f64::NAN,
                    pass: false,
                    runtime_s,
                },
                details: json!({ "error": e.to_string() }),
                tables: Vec::new(),
            },
        }
    }

    pub fn run_all(&self, ids: &[u32]) -> Vec<Outcome> {
        ids.iter().map(|&id| self.run(id)).collect()
    }
}

fn outcome(id: u32, value: f64, threshold: f64, pass: bool, details: Value, tables: Vec<(String, String)>) -> Outcome {
    Outcome {
        result: CriterionResult {
            criterion_id: id,
            description: description(id).into(),
            value,
            threshold,
            pass,
            runtime_s: 0.0,
        },
        details,
        tables,
    }
}

/// Mean eval gate over the channels whose backbone features are most class
/// dependent on the target training set, and over the rest.
pub fn gate_selectivity(model: &mut GtnModel, target: &SplitDataset) -> Result<(f64, f64)> {
    let gates = collect_gates(model, &target.test, target.test.len(), &mut Rng::new(0))?;
    let (per_channel, _) = feature_stats(&gates)?;
    let idx: Vec<usize> = (0..target.train.len()).collect();
    let parts = idx
        .chunks(256)
        .map(|chunk| {
            let (x, _) = target.train.batch(chunk)?;
            Ok(model.forward(&x, Mode::Eval)?.features)
        })
        .collect::<Result<Vec<_>>>()?;
    let features = Tensor::concat_rows(&parts)?;
    let relevance = channel_relevance(&features, target.train.labels(), target.num_classes())?;
    let (informative, other) = split_by_relevance(&relevance);
    let avg = |set: &[usize]| set.iter().map(|&j| per_channel[j]).sum::<f64>() / set.len() as f64;
    Ok((avg(&informative), avg(&other)))
}

#[derive(Debug, Clone, Serialize)]
struct GradEntry {
    check: String,
    tolerance: f64,
    max_relative_error: f64,
    worst: String,
    seeds: usize,
    pass: bool,
}

fn grad_entry(check: &str, tolerance: f64, seeds: usize, mut one: impl FnMut(u64) -> Result<(f64, String)>) -> Result<GradEntry> {
    let (mut max, mut worst) = (0.0f64, String::new());
    for seed in 0..seeds as u64 {
        let (err, w) = one(seed).with_context(|| format!("{check}, seed {seed}"))?;
        if err >= max {
            max = err;
            worst = format!("seed {seed}: {w}");
        }
    }
    Ok(GradEntry {
        check: check.into(),
        tolerance,
        max_relative_error: max,
        worst,
        seeds,
        pass: max < tolerance,
    })
}

fn layer_entry(
    check: &str,
    tolerance: f64,
    seeds: usize,
    shape: &[usize],
    mode: Mode,
    make: impl Fn(&mut Rng) -> Result<Box<dyn Layer>>,
) -> Result<GradEntry> {
    grad_entry(check, tolerance, seeds, |seed| {
        let mut rng = Rng::new(seed).child("grad.layer");
        let mut layer = make(&mut rng)?;
        let r = grad_check(layer.as_mut(), shape, &mut rng, mode)?;
        Ok((r.max_relative_error, r.worst))
    })
}

/// Mean softmax cross-entropy as a function of the logits.
struct CrossEntropyProbe {
    logits: Tensor,
    labels: Vec<usize>,
}

impl Differentiable for CrossEntropyProbe {
    fn objective_terms(&mut self) -> Result<Vec<f64>> {
        let b = self.labels.len() as f64;
        Ok(cross_entropy_terms(&self.logits, &self.labels)?
            .into_iter()
            .map(|l| l / b)
            .collect())
    }

    fn analytic_gradients(&mut self) -> Result<Vec<(String, Tensor)>> {
        let mut ce = SoftmaxCrossEntropy::new();
        ce.forward(&self.logits, &self.labels)?;
        Ok(vec![("logits".into(), ce.backward()?)])
    }

    fn values_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("logits".into(), &mut self.logits)]
    }
}

/// Small MLP model for gradient checks.
fn probe_model(variant: Variant, lambda: f64, seed: u64) -> Result<GtnModel> {
    let backbone = BackboneSpec::Mlp {
        input_dim: 6,
        widths: vec![8, 5],
    };
    let t = TransferConfig {
        reduction: 2,
        ..TransferConfig::new(5)
    };
    GtnModel::new(variant.model_spec(backbone, 0, 3, &t, lambda), &Rng::new(seed).child("grad.model"))
}

fn model_entry(check: &str, tolerance: f64, seeds: usize, variant: Variant, lambda: f64, mode: Mode) -> Result<GradEntry> {
    grad_entry(check, tolerance, seeds, |seed| {
        let mut m = probe_model(variant, lambda, seed)?;
        let r = model_grad_check(&mut m, 4, &mut Rng::new(seed).child("grad.batch"), mode)?;
        Ok((r.max_relative_error, r.worst))
    })
}

fn transfer_entry(check: &str, tolerance: f64, seeds: usize, variant: GateVariant, mode: Mode) -> Result<GradEntry> {
    layer_entry(check, tolerance, seeds, &[4, 12], mode, |r| {
        let cfg = TransferConfig {
            reduction: 4,
            variant,
            ..TransferConfig::new(12)
        };
        Ok(Box::new(TransferModule::new(cfg, r)?))
    })
}

fn grad_table(entries: &[GradEntry]) -> String {
    let mut out = String::from("check,tolerance,max_relative_error,seeds,pass,worst\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{},{},\"{}\"\n",
            e.check, e.tolerance, e.max_relative_error, e.seeds, e.pass, e.worst
        ));
    }
    out
}

/// `mean ± std` rows of test accuracy per group, with per-seed columns.
fn accuracy_rows(label: &str, groups: &[(String, Vec<RunSummary>)]) -> String {
    let seeds: Vec<String> = groups
        .first()
        .map(|(_, runs)| runs.iter().map(|r| format!("seed_{}", r.seed)).collect())
        .unwrap_or_default();
    let mut out = format!("{label},mean_test_acc,std_test_acc,mean_gate,{}\n", seeds.join(","));
    for (name, runs) in groups {
        let accs: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
        let (m, s) = mean_std(&accs);
        let gates: Vec<f64> = runs.iter().filter_map(|r| r.gate_mean).collect();
        let g = if gates.is_empty() {
            String::new()
        } else {
            mean_std(&gates).0.to_string()
        };
        let per: Vec<String> = accs.iter().map(|a| a.to_string()).collect();
        out.push_str(&format!("{name},{m},{s},{g},{}\n", per.join(",")));
    }
    out
}

fn mean_of(runs: &[RunSummary], f: impl Fn(&RunSummary) -> f64) -> f64 {
    mean_std(&runs.iter().map(f).collect::<Vec<_>>()).0
}

fn snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("walked below dir").to_path_buf();
                out.insert(rel, read_bytes(&path)?);
            }
        }
    }
    Ok(out)
}

fn remove_dir(dir: &Path) -> Result<()> {
    match std::fs::remove_dir_all(dir) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(dir, e)),
    }
}

impl Suite {
    fn gradients(&self) -> Result<Outcome> {
        let a = &self.cfg.acceptance;
        let (det, tol, n) = (a.grad_tol_deterministic, a.grad_tol, a.grad_seeds);
        let mut entries = vec![
            layer_entry("linear", det, n, &[3, 6], Mode::Eval, |r| Ok(Box::new(Linear::new(6, 4, true, r))))?,
            layer_entry("linear-no-bias", det, n, &[3, 6], Mode::Eval, |r| {
                Ok(Box::new(Linear::new(6, 4, false, r)))
            })?,
            layer_entry("relu", det, n, &[4, 7], Mode::Eval, |_| Ok(Box::new(Relu::new())))?,
            layer_entry("sigmoid", det, n, &[4, 7], Mode::Eval, |_| Ok(Box::new(Sigmoid::new())))?,
            layer_entry("conv2d", det, n, &[2, 2, 5, 5], Mode::Eval, |r| {
                Ok(Box::new(Conv2d::new(2, 3, 3, 1, 1, r)))
            })?,
            layer_entry("conv2d-stride2", det, n, &[1, 2, 7, 6], Mode::Eval, |r| {
                Ok(Box::new(Conv2d::new(2, 2, 3, 2, 0, r)))
            })?,
            layer_entry("maxpool2d", det, n, &[2, 2, 4, 6], Mode::Eval, |_| Ok(Box::new(MaxPool2d::new(2))))?,
            layer_entry("global-avg-pool", det, n, &[2, 3, 4, 4], Mode::Eval, |_| {
                Ok(Box::new(GlobalAvgPool::new()))
            })?,
            layer_entry("batchnorm1d-train", det, n, &[6, 5], Mode::Train, |_| {
                Ok(Box::new(BatchNorm1d::new(5)))
            })?,
            layer_entry("batchnorm1d-eval", det, n, &[6, 5], Mode::Eval, |_| Ok(Box::new(BatchNorm1d::new(5))))?,
            grad_entry("softmax-cross-entropy", det, n, |seed| {
                let mut rng = Rng::new(seed).child("grad.ce");
                let logits = Tensor::rand_normal(&mut rng, &[5, 4], 0.0, 2.0)?;
                let labels = (0..5).map(|_| rng.below(4)).collect();
                let r = check_gradients(&mut CrossEntropyProbe { logits, labels }, DEFAULT_STEP)?;
                Ok((r.max_relative_error, r.worst))
            })?,
            layer_entry("dropout-eval", tol, n, &[4, 6], Mode::Eval, |r| {
                Ok(Box::new(Dropout::new(0.5, r.child("d"))?))
            })?,
            layer_entry("dropout-train", tol, n, &[4, 6], Mode::Train, |r| {
                Ok(Box::new(Dropout::new(0.7, r.child("d"))?))
            })?,
            transfer_entry("transfer-gated-eval", tol, n, GateVariant::Gated, Mode::Eval)?,
            transfer_entry("transfer-gated-train", tol, n, GateVariant::Gated, Mode::Train)?,
        ];
        let lambda = self.cfg.model.lambda;
        entries.push(model_entry("model-gtn", tol, n, Variant::Gtn, lambda, Mode::TrainNoDropout)?);
        entries.push(model_entry("model-gtn-dropout", tol, n, Variant::Gtn, lambda, Mode::Train)?);
        entries.push(model_entry("model-classic-ft", tol, n, Variant::ClassicFt, 0.0, Mode::TrainNoDropout)?);
        let worst = entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max);
        let pass = entries.iter().all(|e| e.pass);
        let details = json!({ "checks": entries, "seeds": n });
        Ok(outcome(1, worst, tol, pass, details, vec![("gradient_checks.csv".into(), grad_table(&entries))]))
    }

    fn bypass(&self) -> Result<Outcome> {
        let seed = self.seeds()[0];
        let data = self.task(seed, self.cfg.data.overlap)?.target;
        let spec = self.cfg.backbone_spec(data.train.sample_shape())?;
        let k = data.num_classes();
        let rng = Rng::new(seed).child("bypass.init");
        let mut plain = GtnModel::new(ModelSpec::plain(spec.clone(), self.cfg.aux_tap(), k), &rng)?;
        let mut ident = GtnModel::new(self.cfg.target_spec(spec, Variant::ClassicFt, k), &rng)?;
        let mut mismatches = Vec::new();
        if plain.state() != ident.state() {
            mismatches.push("initial parameters".to_string());
        }
        let rows: Vec<usize> = (0..data.train.len().min(64)).collect();
        let (x, y) = data.train.batch(&rows)?;
        for mode in [Mode::Train, Mode::TrainNoDropout] {
            let step = |m: &mut GtnModel| -> Result<_> {
                m.zero_grad();
                let out = m.forward(&x, mode)?;
                let loss = m.backward(&y)?;
                let grads: Vec<(String, Tensor)> = m.params().into_iter().map(|(_, n, p)| (n, p.grad.clone())).collect();
                Ok((out.main_logits, loss, grads))
            };
            let (pl, pf, pg) = step(&mut plain)?;
            let (il, iff, ig) = step(&mut ident)?;
            if pl != il {
                mismatches.push(format!("{mode:?} logits"));
            }
            if pf.total.to_bits() != iff.total.to_bits() {
                mismatches.push(format!("{mode:?} loss"));
            }
            if pg != ig {
                mismatches.push(format!("{mode:?} gradients"));
            }
        }
        let epochs = self.cfg.acceptance.bypass_epochs;
        let train = self.cfg.optim.train_config(epochs, self.cfg.optim.freeze_epochs);
        let trng = Rng::new(seed).child("bypass.train");
        let plog = fit(&mut plain, &data, &train, &trng, |_, _| Ok(()))?;
        let ilog = fit(&mut ident, &data, &train, &trng, |_, _| Ok(()))?;
        let key = |e: &crate::optim::EpochStats| {
            [e.lr, e.train_loss, e.train_acc, e.val_loss, e.val_acc, e.main_loss, e.aux_loss].map(f64::to_bits)
        };
        for (p, i) in plog.epochs.iter().zip(&ilog.epochs) {
            if key(p) != key(i) {
                mismatches.push(format!("epoch {} trajectory", p.epoch));
            }
        }
        if plain.state() != ident.state() {
            mismatches.push("final parameters".to_string());
        }
        let trajectory: Vec<Value> = plog
            .epochs
            .iter()
            .map(|e| json!({ "epoch": e.epoch, "train_loss": e.train_loss, "val_acc": e.val_acc }))
            .collect();
        let details = json!({ "seed": seed, "epochs": epochs, "mismatches": mismatches, "trajectory": trajectory });
        let n = mismatches.len() as f64;
        Ok(outcome(2, n, 0.0, n == 0.0, details, Vec::new()))
    }

    fn gate_range(&self) -> Result<Outcome> {
        let a = &self.cfg.acceptance;
        let mut rng = Rng::new(self.seeds()[0]).child("gate-range");
        let (mut violations, mut lo, mut hi) = (0usize, f64::INFINITY, f64::NEG_INFINITY);
        for draw in 0..a.gate_draws {
            let c = 1 + rng.below(64);
            let cfg = TransferConfig {
                reduction: 1 + rng.below(32),
                bias: rng.bernoulli(0.5),
                ..TransferConfig::new(c)
            };
            let mut module = TransferModule::new(cfg, &mut rng.child_indexed("module", draw as u64))?;
            let scale = 10f64.powf(rng.uniform_range(-2.0, 2.0));
            for (_, p) in module.params_mut() {
                for v in p.value.data_mut() {
                    *v = scale * rng.normal();
                }
            }
            let b = 1 + rng.below(8);
            let x_scale = 10f64.powf(rng.uniform_range(-2.0, 3.0));
            let x = Tensor::rand_normal(&mut rng, &[b, c], 0.0, x_scale)?;
            let gate = module.gate_forward(&x, Mode::Eval)?.gate;
            let inside = gate.data().iter().all(|v| (0.0..=1.0).contains(v));
            if gate.shape() != [b, c] || !inside {
                violations += 1;
            }
            for &v in gate.data() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let mut table = String::from("channels,reduction,bias,hidden,expected,module,formula\n");
        let mut count_mismatches = 0usize;
        for c in [1usize, 2, 3, 15, 16, 17, 100, 255, 2048] {
            for r in [1usize, 3, 7, 16, 32, 4096] {
                for bias in [true, false] {
                    let h = ((c + r - 1) / r).max(1);
                    let expected = 2 * c * h + if bias { h + c } else { 0 };
                    let cfg = TransferConfig {
                        reduction: r,
                        bias,
                        ..TransferConfig::new(c)
                    };
                    let module = TransferModule::new(cfg, &mut Rng::new(0))?;
                    let counted = Layer::param_count(&module);
                    let formula = transfer_param_count(c, r, bias);
                    if counted != expected || formula != expected {
                        count_mismatches += 1;
                    }
                    table.push_str(&format!("{c},{r},{bias},{h},{expected},{counted},{formula}\n"));
                }
            }
        }
        let details = json!({
            "draws": a.gate_draws,
            "range_violations": violations,
            "observed_min": lo,
            "observed_max": hi,
            "param_count_mismatches": count_mismatches,
        });
        let n = (violations + count_mismatches) as f64;
        Ok(outcome(3, n, 0.0, n == 0.0, details, vec![("gate_param_counts.csv".into(), table)]))
    }

    fn aux_contract(&self) -> Result<Outcome> {
        let a = &self.cfg.acceptance;
        let mut mismatches = Vec::new();
        for seed in 0..a.grad_seeds as u64 {
            let with_aux = probe_model(Variant::Gtn, 0.0, seed)?;
            let mut spec = with_aux.spec().clone();
            spec.aux_head = false;
            let mut without = GtnModel::new(spec, &Rng::new(seed).child("grad.model"))?;
            let mut with_aux = with_aux;
            let mut rng = Rng::new(seed).child("aux.batch");
            let x = Tensor::rand_normal(&mut rng, &[8, 6], 0.0, 1.0)?;
            let y: Vec<usize> = (0..8).map(|_| rng.below(3)).collect();
            for mode in [Mode::TrainNoDropout, Mode::Train] {
                let step = |m: &mut GtnModel| -> Result<_> {
                    m.zero_grad();
                    m.forward(&x, mode)?;
                    let loss = m.backward(&y)?;
                    let grads: BTreeMap<String, Tensor> =
                        m.params().into_iter().map(|(_, n, p)| (n, p.grad.clone())).collect();
                    Ok((loss.total, grads))
                };
                let (la, mut ga) = step(&mut with_aux)?;
                let (lb, gb) = step(&mut without)?;
                let aux: Vec<String> = ga.keys().filter(|k| k.starts_with("aux_head")).cloned().collect();
                for k in aux {
                    if ga.remove(&k).is_some_and(|g| g.data().iter().any(|&v| v != 0.0)) {
                        mismatches.push(format!("seed {seed} {mode:?}: {k} gradient is not zero"));
                    }
                }
                if la.to_bits() != lb.to_bits() {
                    mismatches.push(format!("seed {seed} {mode:?}: loss"));
                }
                if ga != gb {
                    mismatches.push(format!("seed {seed} {mode:?}: gradients"));
                }
            }
        }
        let overlap = self.cfg.data.overlap;
        let specs: Vec<_> = a.lambda_sweep.iter().map(|&l| (overlap, Variant::Gtn, l)).collect();
        self.ensure_runs(&specs)?;
        let groups = a
            .lambda_sweep
            .iter()
            .map(|&l| Ok((l.to_string(), self.runs(overlap, Variant::Gtn, l)?)))
            .collect::<Result<Vec<_>>>()?;
        let sweep: Vec<Value> = groups
            .iter()
            .map(|(l, runs)| json!({ "lambda": l, "mean_test_acc": mean_of(runs, |r| r.test_acc) }))
            .collect();
        let details = json!({ "mismatches": mismatches, "sweep": sweep, "overlap": overlap });
        let n = mismatches.len() as f64;
        Ok(outcome(
            4,
            n,
            0.0,
            n == 0.0,
            details,
            vec![("lambda_sweep.csv".into(), accuracy_rows("lambda", &groups))],
        ))
    }

    fn transfer_benefit(&self) -> Result<Outcome> {
        let a = &self.cfg.acceptance;
        let (o, l) = (self.cfg.data.overlap, self.cfg.model.lambda);
        let variants = [Variant::Gtn, Variant::ClassicFt, Variant::FixedFeature];
        self.ensure_runs(&variants.map(|v| (o, v, l)))?;
        let groups = variants
            .iter()
            .map(|&v| Ok((v.to_string(), self.runs(o, v, l)?)))
            .collect::<Result<Vec<_>>>()?;
        let means: Vec<f64> = groups.iter().map(|(_, r)| mean_of(r, |x| x.test_acc)).collect();
        let (gtn, cft, ff) = (means[0], means[1], means[2]);
        let value = gtn - cft;
        let pass = value >= -a.transfer_margin && gtn >= ff;
        let details = json!({
            "overlap": o,
            "mean_test_acc": { "gtn": gtn, "classic-ft": cft, "fixed-feature": ff },
            "gtn_minus_classic_ft": value,
            "gtn_minus_fixed_feature": gtn - ff,
            "margin": a.transfer_margin,
        });
        Ok(outcome(
            5,
            value,
            -a.transfer_margin,
            pass,
            details,
            vec![("transfer_comparison.csv".into(), accuracy_rows("variant", &groups))],
        ))
    }

    fn similarity_gating(&self) -> Result<Outcome> {
        if !self.synthetic() {
            return Err(Error::Config("the similarity criterion needs synthetic data".into()));
        }
        let a = &self.cfg.acceptance;
        let l = self.cfg.model.lambda;
        let (hi_o, lo_o) = (a.similar_overlap, a.dissimilar_overlap);
        self.ensure_runs(&[(hi_o, Variant::Gtn, l), (lo_o, Variant::Gtn, l)])?;
        let hi = self.runs(hi_o, Variant::Gtn, l)?;
        let lo = self.runs(lo_o, Variant::Gtn, l)?;
        let gate = |r: &RunSummary| r.gate_mean.unwrap_or(f64::NAN);
        let selectivity = |r: &RunSummary| r.informative_gate.unwrap_or(f64::NAN) - r.other_gate.unwrap_or(f64::NAN);
        let value = mean_of(&hi, gate) - mean_of(&lo, gate);
        let (sel_hi, sel_lo) = (mean_of(&hi, selectivity), mean_of(&lo, selectivity));
        let pass = value > 0.0 && sel_hi > 0.0 && sel_lo > 0.0;
        let mut table = String::from("seed,overlap,test_acc,gate_mean,informative_gate,other_gate\n");
        for r in hi.iter().chain(&lo) {
            table.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.seed,
                r.overlap,
                r.test_acc,
                gate(r),
                r.informative_gate.unwrap_or(f64::NAN),
                r.other_gate.unwrap_or(f64::NAN)
            ));
        }
        let details = json!({
            "similar_overlap": hi_o,
            "dissimilar_overlap": lo_o,
            "mean_gate_similar": mean_of(&hi, gate),
            "mean_gate_dissimilar": mean_of(&lo, gate),
            "selectivity_similar": sel_hi,
            "selectivity_dissimilar": sel_lo,
        });
        Ok(outcome(6, value, 0.0, pass, details, vec![("similarity_gates.csv".into(), table)]))
    }

    fn summation(&self) -> Result<Outcome> {
        let a = &self.cfg.acceptance;
        let l = self.cfg.model.lambda;
        let presets: Vec<f64> = if self.synthetic() {
            a.presets.clone()
        } else {
            vec![self.cfg.data.overlap]
        };
        let specs: Vec<_> = presets
            .iter()
            .flat_map(|&o| [(o, Variant::Gtn, l), (o, Variant::Residual, l)])
            .collect();
        self.ensure_runs(&specs)?;
        let groups = specs
            .iter()
            .map(|&(o, v, l)| Ok((format!("{o}/{v}"), self.runs(o, v, l)?)))
            .collect::<Result<Vec<_>>>()?;
        let (tol, n) = (a.grad_tol, a.grad_seeds);
        let entries = vec![
            transfer_entry("transfer-residual-eval", tol, n, GateVariant::Residual, Mode::Eval)?,
            transfer_entry("transfer-residual-train", tol, n, GateVariant::Residual, Mode::Train)?,
            model_entry("model-residual", tol, n, Variant::Residual, l, Mode::TrainNoDropout)?,
            model_entry("model-residual-dropout", tol, n, Variant::Residual, l, Mode::Train)?,
        ];
        let worst = entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max);
        let pass = entries.iter().all(|e| e.pass);
        let comparison: Vec<Value> = groups
            .iter()
            .map(|(name, runs)| json!({ "run": name, "mean_test_acc": mean_of(runs, |r| r.test_acc) }))
            .collect();
        let details = json!({ "comparison": comparison, "gradient_checks": entries });
        Ok(outcome(
            7,
            worst,
            tol,
            pass,
            details,
            vec![
                ("residual_comparison.csv".into(), accuracy_rows("overlap/variant", &groups)),
                ("residual_gradient_checks.csv".into(), grad_table(&entries)),
            ],
        ))
    }

    fn forgetting(&self) -> Result<Outcome> {
        let a = &self.cfg.acceptance;
        let (o, l) = (self.cfg.data.overlap, self.cfg.model.lambda);
        let variants = [Variant::Gtn, Variant::ClassicFt];
        self.ensure_runs(&variants.map(|v| (o, v, l)))?;
        let records = self.install(|| {
            self.seeds()
                .par_iter()
                .map(|&seed| {
                    let source = self.task(seed, o)?.source;
                    let mut refinetuned = BTreeMap::new();
                    for v in variants {
                        let model = {
                            let map = self.runs.lock().expect("lock");
                            rebuild(&map[&self.key(seed, o, v, l)].1, &Rng::new(0))?
                        };
                        let t = refinetune_source(&self.cfg, &model, &source, seed, None)?;
                        refinetuned.insert(v.to_string(), t.test.accuracy);
                    }
                    Ok(LwfRecord {
                        seed,
                        oracle: self.source_oracle(seed),
                        refinetuned,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let report = LwfReport::new(records);
        let gap = report.gap[Variant::Gtn.name()];
        let value = gap.abs();
        let details = serde_json::to_value(&report).map_err(|e| Error::Format(e.to_string()))?;
        Ok(outcome(
            8,
            value,
            a.lwf_gap,
            value <= a.lwf_gap,
            details,
            vec![("lwf_report.csv".into(), report.to_csv())],
        ))
    }

    fn analysis_oracles(&self) -> Result<Outcome> {
        let a = &self.cfg.acceptance;
        let mut rng = Rng::new(self.seeds()[0]).child("analysis-oracles");
        let (mut deviation, mut count_failures) = (0.0f64, 0usize);
        for _ in 0..a.analysis_draws {
            let (n, c) = (2 + rng.below(40), 1 + rng.below(30));
            let values: Vec<f64> = (0..n * c)
                .map(|_| match rng.below(10) {
                    0 => rng.below(HISTOGRAM_BINS + 1) as f64 / HISTOGRAM_BINS as f64,
                    1 => {
                        let edge = (1 + rng.below(HISTOGRAM_BINS)) as f64 / HISTOGRAM_BINS as f64;
                        f64::from_bits(edge.to_bits() - 1)
                    }
                    _ => rng.uniform(),
                })
                .collect();
            let gates = Tensor::new(vec![n, c], values.clone())?;
            let hist = histogram_gates(&values)?;
            let mut naive = [0usize; HISTOGRAM_BINS];
            for &v in &values {
                let b = (0..HISTOGRAM_BINS)
                    .rev()
                    .find(|&b| v >= b as f64 / HISTOGRAM_BINS as f64)
                    .expect("v >= 0");
                naive[b] += 1;
            }
            if hist != naive || hist.iter().sum::<usize>() != n * c {
                count_failures += 1;
            }
            let naive_stats = |xs: &[f64]| {
                let mut sum = 0.0;
                for x in xs {
                    sum += x;
                }
                let m = sum / xs.len() as f64;
                let mut sq = 0.0;
                for x in xs {
                    sq += (x - m) * (x - m);
                }
                (m, (sq / xs.len() as f64).sqrt())
            };
            let (m, s) = mean_std(&values);
            let (nm, ns) = naive_stats(&values);
            deviation = deviation.max((m - nm).abs()).max((s - ns).abs());
            let (fm, fs) = feature_stats(&gates)?;
            for j in 0..c {
                let col: Vec<f64> = (0..n).map(|i| values[i * c + j]).collect();
                let (nm, ns) = naive_stats(&col);
                deviation = deviation.max((fm[j] - nm).abs()).max((fs[j] - ns).abs());
            }
            for t in SPARSITY_THRESHOLDS {
                let mut below = 0usize;
                for &v in &values {
                    if v < t {
                        below += 1;
                    }
                }
                deviation = deviation.max((sparsity(&values, t) - below as f64 / values.len() as f64).abs());
            }
        }
        let seed = self.seeds()[0];
        let data = self.task(seed, self.cfg.data.overlap)?.target;
        let spec = self.cfg.backbone_spec(data.train.sample_shape())?;
        let mut ident = GtnModel::new(
            self.cfg.target_spec(spec, Variant::ClassicFt, data.num_classes()),
            &Rng::new(seed).child("analysis.identity"),
        )?;
        let gates = collect_gates(&mut ident, &data.test, self.cfg.run.gate_samples, &mut Rng::new(seed))?;
        let hist = histogram_gates(gates.data())?;
        let identity_ok = hist[HISTOGRAM_BINS - 1] == gates.len();
        let pass = deviation <= a.analysis_tol && count_failures == 0 && identity_ok;
        let details = json!({
            "draws": a.analysis_draws,
            "max_deviation": deviation,
            "histogram_failures": count_failures,
            "identity_bin9_fraction": hist[HISTOGRAM_BINS - 1] as f64 / gates.len() as f64,
        });
        Ok(outcome(9, deviation, a.analysis_tol, pass, details, Vec::new()))
    }

    /// Runs the commands on a shortened config twice into the same directory
    /// and compares every file byte for byte.
    fn determinism(&self) -> Result<Outcome> {
        let mut cfg = self.cfg.clone();
        let seed = self.seeds()[0];
        cfg.run.seeds = vec![seed];
        cfg.run.output = self.results_dir.join("determinism");
        cfg.optim.pretrain_epochs = cfg.optim.pretrain_epochs.min(3);
        cfg.optim.epochs = cfg.optim.epochs.min(3);
        cfg.optim.freeze_epochs = cfg.optim.freeze_epochs.min(1);
        cfg.optim.lwf_epochs = cfg.optim.lwf_epochs.min(2);
        cfg.optim.checkpoint_every = 2;
        let run = |cfg: &ExperimentConfig| -> Result<(BTreeMap<PathBuf, Vec<u8>>, Value)> {
            remove_dir(&cfg.run.output)?;
            cmd_pretrain(cfg, &self.version)?;
            cmd_transfer(cfg, &self.version, Variant::Gtn, None)?;
            cmd_transfer(cfg, &self.version, Variant::ClassicFt, None)?;
            cmd_lwf(cfg, &self.version, None, None)?;
            let ckpt = seed_dir(cfg, seed).join("transfer-gtn/checkpoint");
            cmd_analyze(cfg, &ckpt, None, Task::Target, Split::Test, seed)?;
            let eval = cmd_eval(cfg, &ckpt, Task::Target, Split::Test, seed)?;
            let eval = serde_json::to_value(eval).map_err(|e| Error::Format(e.to_string()))?;
            Ok((snapshot(&cfg.run.output)?, eval))
        };
        let (first, eval_a) = run(&cfg)?;
        let (second, eval_b) = run(&cfg)?;
        let mut differing: Vec<String> = first
            .iter()
            .filter(|(p, bytes)| second.get(*p) != Some(bytes))
            .map(|(p, _)| p.display().to_string())
            .collect();
        differing.extend(
            second
                .keys()
                .filter(|p| !first.contains_key(*p))
                .map(|p| p.display().to_string()),
        );
        if eval_a != eval_b {
            differing.push("eval output".into());
        }
        let details = json!({
            "files_compared": first.len(),
            "differing": differing,
            "directory": cfg.run.output,
        });
        let n = differing.len() as f64;
        Ok(outcome(10, n, 0.0, n == 0.0 && !first.is_empty(), details, Vec::new()))
    }
}

/// Writes `summary.json`, `summary.txt`, one `criterion-<id>.json` per
/// outcome and the criteria's tables into `dir`.
pub fn write_report(dir: &Path, outcomes: &[Outcome]) -> Result<()> {
    let results: Vec<&CriterionResult> = outcomes.iter().map(|o| &o.result).collect();
    write_json(&dir.join("summary.json"), &results)?;
    let passed = results.iter().filter(|r| r.pass).count();
    let mut text: String = results.iter().map(|r| r.line() + "\n").collect();
    text.push_str(&format!("{passed}/{} criteria passed\n", results.len()));
    write_bytes(&dir.join("summary.txt"), text.as_bytes())?;
    for o in outcomes {
        let record = json!({ "result": o.result, "details": o.details });
        write_json(&dir.join(format!("criterion-{}.json", o.result.criterion_id)), &record)?;
        for (name, content) in &o.tables {
            write_bytes(&dir.join(name), content.as_bytes())?;
        }
    }
    Ok(())
}
