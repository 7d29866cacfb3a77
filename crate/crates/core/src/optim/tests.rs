use super::*;
use crate::data::{generate_synthetic, SyntheticTransferSpec};
use crate::model::{BackboneSpec, ModelSpec, Variant};
use crate::tensor::Rng;
use crate::transfer::TransferConfig;

fn task() -> SplitDataset {
    let spec = SyntheticTransferSpec {
        train_per_class: 20,
        prototype_scale: 1.0,
        ..Default::default()
    };
    generate_synthetic(&spec).unwrap().target
}

fn mlp() -> BackboneSpec {
    BackboneSpec::Mlp {
        input_dim: 64,
        widths: vec![16, 8],
    }
}

fn plain(seed: u64) -> GtnModel {
    GtnModel::new(ModelSpec::plain(mlp(), 0, 4), &Rng::new(seed)).unwrap()
}

fn gtn(seed: u64) -> GtnModel {
    let spec = Variant::Gtn.model_spec(mlp(), 0, 4, &TransferConfig::new(8), 0.2);
    GtnModel::new(spec, &Rng::new(seed)).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        freeze: FreezeProtocol { freeze_epochs: 0 },
        ..Default::default()
    }
}

#[test]
fn freeze_protocol_boundaries() {
    let p = FreezeProtocol { freeze_epochs: 2 };
    assert!(p.backbone_frozen(0) && p.backbone_frozen(1) && !p.backbone_frozen(2));
    assert!(!FreezeProtocol { freeze_epochs: 0 }.backbone_frozen(0));
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let ds = task();
    let mut m = plain(0);
    let before = m.state();
    let mut cfg = config(2);
    cfg.sgd.lr = 0.0;
    let eval = evaluate(&mut m, &ds.train, 7).unwrap();
    let log = fit(&mut m, &ds, &cfg, &Rng::new(1), |_, _| Ok(())).unwrap();
    assert_eq!(m.state(), before);
    // Plain model: no dropout and no auxiliary loss, so the training pass
    // sees the eval loss.
    assert!((log.epochs[0].train_loss - eval.loss).abs() < 1e-12);
    assert_eq!(log.epochs[1].lr, 0.0);
}

#[test]
fn single_sample_is_memorised() {
    let ds = task();
    let one = ds.train.subset(&[5]).unwrap();
    let mut m = plain(2);
    let mut sgd = Sgd::new(SgdConfig {
        lr: 0.1,
        ..Default::default()
    })
    .unwrap();
    let mut rng = Rng::new(0);
    for _ in 0..300 {
        train_epoch(&mut m, &one, &mut sgd, 1, &mut rng).unwrap();
    }
    assert!(evaluate(&mut m, &one, 1).unwrap().loss < 1e-3);
}

#[test]
fn training_improves_accuracy_and_logs_gates() {
    let ds = task();
    let mut m = gtn(3);
    let before = accuracy(&mut m, &ds.val).unwrap();
    let log = fit(&mut m, &ds, &config(15), &Rng::new(4), |_, _| Ok(())).unwrap();
    let last = log.last().unwrap();
    assert!(last.val_acc > before.max(0.5), "{before} -> {}", last.val_acc);
    assert!(last.gate_mean.is_some() && last.gate_std.unwrap() >= 0.0);
    assert!(last.aux_loss > 0.0);
    let csv = log.to_csv();
    assert_eq!(csv.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(csv.lines().count(), 16);
}

#[test]
fn fit_is_deterministic() {
    let ds = task();
    let run = || {
        let mut m = gtn(5);
        let log = fit(&mut m, &ds, &config(3), &Rng::new(6), |_, _| Ok(())).unwrap();
        (log, m.state())
    };
    assert_eq!(run(), run());
}

#[test]
fn backbone_is_fixed_only_while_frozen() {
    let ds = task();
    let mut m = gtn(7);
    let mut cfg = config(4);
    cfg.freeze.freeze_epochs = 2;
    let mut sums = vec![m.backbone().checksum()];
    fit(&mut m, &ds, &cfg, &Rng::new(8), |_, m| {
        sums.push(m.backbone().checksum());
        Ok(())
    })
    .unwrap();
    assert_eq!(sums[0], sums[1]);
    assert_eq!(sums[1], sums[2]);
    assert_ne!(sums[2], sums[3]);
    assert!(!m.is_frozen(crate::model::ParamGroup::Backbone));
}

#[test]
fn plain_log_has_empty_gate_fields() {
    let ds = task();
    let mut m = plain(0);
    let log = fit(&mut m, &ds, &config(1), &Rng::new(0), |_, _| Ok(())).unwrap();
    assert!(log.to_csv().lines().nth(1).unwrap().ends_with(",,"));
}

#[test]
fn bad_inputs_are_rejected() {
    let ds = task();
    let mut m = plain(0);
    let mut sgd = Sgd::new(SgdConfig::default()).unwrap();
    assert!(train_epoch(&mut m, &ds.train, &mut sgd, 0, &mut Rng::new(0)).is_err());
    let mut bad = SgdConfig::default();
    bad.momentum = 1.0;
    assert!(matches!(Sgd::new(bad), Err(Error::Config(_))));
}
