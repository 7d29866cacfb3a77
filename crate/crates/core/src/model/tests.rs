use proptest::prelude::*;

use super::checkpoint::{load_backbone, load_checkpoint, save_checkpoint};
use super::*;
use crate::tensor::Rng;

fn small_mlp() -> BackboneSpec {
    BackboneSpec::Mlp {
        input_dim: 6,
        widths: vec![12, 8],
    }
}

fn small_transfer() -> TransferConfig {
    TransferConfig {
        reduction: 2,
        ..TransferConfig::new(8)
    }
}

fn spec(variant: Variant, lambda: f64) -> ModelSpec {
    variant.model_spec(small_mlp(), 0, 3, &small_transfer(), lambda)
}

fn batch(seed: u64, b: usize, shape: &[usize], k: usize) -> (Tensor, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let mut full = vec![b];
    full.extend_from_slice(shape);
    let x = Tensor::rand_normal(&mut rng, &full, 0.0, 1.0).unwrap();
    let y = (0..b).map(|_| rng.below(k)).collect();
    (x, y)
}

fn grads(model: &GtnModel, group_filter: impl Fn(ParamGroup) -> bool) -> Vec<(String, Tensor)> {
    model
        .params()
        .into_iter()
        .filter(|(g, _, _)| group_filter(*g))
        .map(|(_, n, p)| (n, p.grad.clone()))
        .collect()
}

#[test]
fn identity_gate_matches_plain_model_bit_exactly() {
    let rng = Rng::new(5);
    let mut gated = GtnModel::new(spec(Variant::ClassicFt, 0.2), &rng).unwrap();
    let mut plain = GtnModel::new(ModelSpec::plain(small_mlp(), 0, 3), &rng).unwrap();
    let (x, y) = batch(1, 7, &[6], 3);
    let a = gated.forward(&x, Mode::Train).unwrap();
    let b = plain.forward(&x, Mode::Train).unwrap();
    assert_eq!(a.main_logits, b.main_logits);
    assert_eq!(gated.backward(&y).unwrap(), plain.backward(&y).unwrap());
    assert_eq!(grads(&gated, |_| true), grads(&plain, |_| true));
}

#[test]
fn single_class_head_has_zero_loss() {
    let mut m = GtnModel::new(ModelSpec::plain(small_mlp(), 0, 1), &Rng::new(0)).unwrap();
    let (x, _) = batch(2, 4, &[6], 1);
    m.forward(&x, Mode::Train).unwrap();
    assert_eq!(m.backward(&[0; 4]).unwrap().total, 0.0);
}

fn linear_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, _) = x.dims2().unwrap();
    let (out, inp) = w.dims2().unwrap();
    let mut y = vec![0.0; n * out];
    for i in 0..n {
        for o in 0..out {
            let mut s = b.data()[o];
            for k in 0..inp {
                s += x.row(i)[k] * w.data()[o * inp + k];
            }
            y[i * out + o] = s;
        }
    }
    Tensor::new(vec![n, out], y).unwrap()
}

#[test]
fn forward_matches_composed_scalar_oracle() {
    let mut m = GtnModel::new(spec(Variant::Gtn, 0.2), &Rng::new(21)).unwrap();
    let (x, _) = batch(3, 5, &[6], 3);
    let out = m.forward(&x, Mode::Eval).unwrap();
    let p: BTreeMap<String, Tensor> = m.state();
    let relu = |t: Tensor| t.map("relu", |v| v.max(0.0)).unwrap();
    let lin = |x: &Tensor, name: &str| linear_oracle(x, &p[&format!("{name}.weight")], &p[&format!("{name}.bias")]);
    let h1 = relu(lin(&x, "backbone.stage0.fc"));
    let h2 = relu(lin(&h1, "backbone.stage1.fc"));
    let z = relu(lin(&h2, "neck.fc1"));
    let gate = lin(&z, "neck.fc2").map("sigmoid", crate::tensor::sigmoid).unwrap();
    let logits = lin(&gate.mul(&h2).unwrap(), "main_head");
    let close = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).all(|(u, v)| (u - v).abs() < 1e-12);
    assert!(close(&out.gate.unwrap(), &gate));
    assert!(close(&out.main_logits, &logits));
    assert!(out.aux_logits.is_none());
}

#[test]
fn combined_loss_arithmetic() {
    assert_eq!(combine(1.0, 0.5, 0.2).total, 1.1);
    assert_eq!(combine(0.8, 123.0, 0.0).total, 0.8);
    let (logits, labels) = batch(4, 6, &[3], 3);
    let aux = logits.scale(2.0).unwrap();
    let l = combined_loss(&logits, Some(&aux), &labels, 0.0).unwrap();
    assert_eq!(l.total, l.main);
    assert!(combined_loss(&logits, None, &[0, 0, 0, 0, 0, 3], 0.2).is_err());
    assert!(matches!(
        combined_loss(&logits, None, &labels, -0.1),
        Err(Error::InvalidArgument(_))
    ));
    assert_eq!(DEFAULT_LAMBDA, 0.2);
}

proptest! {
    #[test]
    fn combined_loss_is_linear_in_lambda(seed in 0u64..1000, l1 in 0.0f64..2.0, l2 in 0.0f64..2.0) {
        let (logits, labels) = batch(seed, 4, &[3], 3);
        let aux = logits.map("flip", |v| -v).unwrap();
        let t = |l| combined_loss(&logits, Some(&aux), &labels, l).unwrap().total;
        let lhs = t(l1) + t(l2);
        let rhs = 2.0 * t((l1 + l2) / 2.0);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }
}

#[test]
fn zero_lambda_gradients_equal_model_without_aux() {
    let rng = Rng::new(8);
    let mut with_aux = GtnModel::new(spec(Variant::Gtn, 0.0), &rng).unwrap();
    let mut no_aux_spec = spec(Variant::Gtn, 0.0);
    no_aux_spec.aux_head = false;
    let mut no_aux = GtnModel::new(no_aux_spec, &rng).unwrap();
    assert!(with_aux.has_aux_head());
    let (x, y) = batch(9, 6, &[6], 3);
    with_aux.freeze_randomness(false);
    let a = with_aux.forward(&x, Mode::Train).unwrap();
    let b = no_aux.forward(&x, Mode::Train).unwrap();
    assert!(a.aux_logits.is_some() && b.aux_logits.is_none());
    assert_eq!(a.main_logits, b.main_logits);
    let la = with_aux.backward(&y).unwrap();
    let lb = no_aux.backward(&y).unwrap();
    assert_eq!(la.total, lb.total);
    let not_aux = |g| g != ParamGroup::AuxHead;
    assert_eq!(grads(&with_aux, not_aux), grads(&no_aux, not_aux));
    assert!(grads(&with_aux, |g| g == ParamGroup::AuxHead)
        .iter()
        .all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn positive_lambda_reaches_only_stages_up_to_the_tap() {
    let rng = Rng::new(8);
    let mut a = GtnModel::new(spec(Variant::Gtn, 0.5), &rng).unwrap();
    let mut b = GtnModel::new(spec(Variant::Gtn, 0.0), &rng).unwrap();
    let (x, y) = batch(10, 6, &[6], 3);
    a.forward(&x, Mode::TrainNoDropout).unwrap();
    b.forward(&x, Mode::TrainNoDropout).unwrap();
    a.backward(&y).unwrap();
    b.backward(&y).unwrap();
    let ga = grads(&a, |g| g == ParamGroup::Backbone);
    let gb = grads(&b, |g| g == ParamGroup::Backbone);
    assert_ne!(ga[0], gb[0], "stage 0 receives aux feedback");
    assert_eq!(ga[2], gb[2], "stage 1 lies after the tap");
}

#[test]
fn frozen_backbone_receives_no_gradient() {
    let mut m = GtnModel::new(spec(Variant::Gtn, 0.2), &Rng::new(3)).unwrap();
    m.set_backbone_frozen(true);
    let (x, y) = batch(11, 5, &[6], 3);
    m.forward(&x, Mode::Train).unwrap();
    m.backward(&y).unwrap();
    assert!(grads(&m, |g| g == ParamGroup::Backbone)
        .iter()
        .all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    assert!(grads(&m, |g| g == ParamGroup::Neck)
        .iter()
        .any(|(_, t)| t.data().iter().any(|&v| v != 0.0)));
    m.set_backbone_frozen(false);
    assert!(!m.is_frozen(ParamGroup::Backbone));
}

#[test]
fn fixed_feature_backbone_cannot_be_unfrozen() {
    let mut m = GtnModel::new(spec(Variant::FixedFeature, 0.2), &Rng::new(3)).unwrap();
    assert!(m.is_frozen(ParamGroup::Backbone));
    m.set_backbone_frozen(false);
    assert!(m.is_frozen(ParamGroup::Backbone));
    assert!(!m.has_aux_head());
    assert_eq!(m.lambda(), 0.0);
}

#[test]
fn eval_forward_skips_aux_and_cannot_backpropagate() {
    let mut m = GtnModel::new(spec(Variant::Gtn, 0.2), &Rng::new(3)).unwrap();
    let (x, y) = batch(12, 3, &[6], 3);
    assert!(m.forward(&x, Mode::Eval).unwrap().aux_logits.is_none());
    assert!(matches!(m.backward(&y), Err(Error::State(_))));
}

#[test]
fn removing_the_aux_head_changes_no_prediction() {
    let mut m = GtnModel::new(spec(Variant::Gtn, 0.2), &Rng::new(13)).unwrap();
    let (x, _) = batch(14, 20, &[6], 3);
    let before = m.predict(&x).unwrap();
    let logits = m.forward(&x, Mode::Eval).unwrap().main_logits;
    m.remove_aux_head();
    assert_eq!(m.predict(&x).unwrap(), before);
    assert_eq!(m.forward(&x, Mode::Eval).unwrap().main_logits, logits);
}

#[test]
fn wrong_input_shape_is_reported() {
    let mut m = GtnModel::new(spec(Variant::Gtn, 0.2), &Rng::new(0)).unwrap();
    let err = m.forward(&Tensor::zeros(&[2, 5]), Mode::Eval).unwrap_err();
    assert!(err.to_string().contains("backbone input"), "{err}");
}

#[test]
fn aux_tap_must_precede_last_stage() {
    let mut s = spec(Variant::Gtn, 0.2);
    s.aux_tap = 1;
    assert!(matches!(GtnModel::new(s, &Rng::new(0)), Err(Error::Config(_))));
}

const GRAD_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn check_model(make: impl Fn(u64) -> GtnModel, batch: usize, mode: Mode) {
    for seed in GRAD_SEEDS {
        let mut m = make(seed);
        let r = model_grad_check(&mut m, batch, &mut Rng::new(100 + seed), mode).unwrap();
        assert!(r.max_relative_error < 1e-5, "{} seed {seed}: {r:?}", m.variant_name());
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for v in [Variant::Gtn, Variant::Residual, Variant::ClassicFt] {
        check_model(|s| GtnModel::new(spec(v, 0.2), &Rng::new(s)).unwrap(), 4, Mode::TrainNoDropout);
    }
    check_model(|s| GtnModel::new(spec(Variant::Gtn, 0.2), &Rng::new(s)).unwrap(), 4, Mode::Train);
}

/// Batch normalisation removes any per-channel shift of its input, so the
/// bias of the FC layer feeding it, and the bias of any backbone unit that is
/// active on the whole batch, have exactly zero gradient. A relative error is
/// meaningless there; those entries are checked to vanish instead.
#[test]
fn da_baseline_gradients_match_finite_differences() {
    for seed in GRAD_SEEDS {
        let mut m = GtnModel::new(spec(Variant::DaCnn, 0.0), &Rng::new(seed)).unwrap();
        let (input, labels) = batch(200 + seed, 16, &[6], 3);
        let features = m.forward(&input, Mode::TrainNoDropout).unwrap().features;
        let (b, c) = features.dims2().unwrap();
        let always_on: Vec<usize> = (0..c).filter(|&j| (0..b).all(|i| features.row(i)[j] > 0.0)).collect();
        let mut exclude = vec![("neck.fc.bias".to_string(), None)];
        exclude.extend(always_on.iter().map(|&j| ("backbone.stage1.fc.bias".to_string(), Some(j))));
        let mut probe = ModelProbe {
            model: &mut m,
            input,
            labels,
            mode: Mode::TrainNoDropout,
            exclude,
        };
        let r = check_gradients(&mut probe, DEFAULT_STEP).unwrap();
        assert!(r.max_relative_error < 1e-5, "seed {seed}: {r:?}");
        let g: BTreeMap<String, Tensor> = grads(&m, |_| true).into_iter().collect();
        assert!(g["neck.fc.bias"].max_abs() < 1e-15);
        for j in always_on {
            assert!(g["backbone.stage1.fc.bias"].data()[j].abs() < 1e-15);
        }
    }
}

#[test]
fn cnn_model_gradients_match_finite_differences() {
    let backbone = BackboneSpec::TinyCnn {
        in_channels: 2,
        image_size: 8,
        channels: vec![3, 4],
    };
    let t = TransferConfig {
        reduction: 2,
        ..TransferConfig::new(4)
    };
    check_model(
        |s| GtnModel::new(Variant::Gtn.model_spec(backbone.clone(), 0, 3, &t, 0.3), &Rng::new(s)).unwrap(),
        4,
        Mode::TrainNoDropout,
    );
}

#[test]
fn da_baseline_shape_and_determinism() {
    let backbone = Backbone::new(small_mlp(), 0, &Rng::new(1)).unwrap();
    let mut m = build_da_baseline(backbone, 5, &Rng::new(2)).unwrap();
    let (c, k) = (8, 5);
    assert_eq!(m.head_param_count(), c * c + c + 2 * c + c * k + k);
    assert!(!m.has_aux_head() && m.transfer().is_none());
    let (x, _) = batch(3, 6, &[6], 5);
    m.forward(&x, Mode::Train).unwrap();
    let a = m.forward(&x, Mode::Eval).unwrap().main_logits;
    let b = m.forward(&x, Mode::Eval).unwrap().main_logits;
    assert_eq!(a, b);
}

#[test]
fn backbone_and_head_init_are_independent_of_the_neck() {
    let rng = Rng::new(77);
    let a = GtnModel::new(spec(Variant::Gtn, 0.2), &rng).unwrap();
    let b = GtnModel::new(spec(Variant::DaCnn, 0.2), &rng).unwrap();
    assert_eq!(a.backbone().checksum(), b.backbone().checksum());
    assert_eq!(a.main_head().weight, b.main_head().weight);
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        assert_eq!(spec(v, 0.2).variant(), Some(v));
    }
    assert!("gated".parse::<Variant>().is_err());
    assert_eq!(ModelSpec::plain(small_mlp(), 0, 2).variant_name(), "plain");
}

#[test]
fn spec_serialises_and_rejects_unknown_fields() {
    let s = spec(Variant::Residual, 0.4);
    let json = serde_json::to_string(&s).unwrap();
    assert_eq!(serde_json::from_str::<ModelSpec>(&json).unwrap(), s);
    let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
    v["bogus"] = serde_json::json!(1);
    assert!(serde_json::from_value::<ModelSpec>(v).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for v in Variant::ALL {
        let mut m = GtnModel::new(spec(v, 0.2), &Rng::new(31)).unwrap();
        let (x, _) = batch(5, 6, &[6], 3);
        m.forward(&x, Mode::Train).unwrap();
        m.set_backbone_frozen(true);
        let path = dir.path().join(v.name());
        save_checkpoint(&m, &path, BTreeMap::new()).unwrap();
        let (mut loaded, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest.variant, v.name());
        assert_eq!(loaded.state(), m.state());
        assert_eq!(loaded.freeze_mask(), m.freeze_mask());
        let a = m.forward(&x, Mode::Eval).unwrap().main_logits;
        let b = loaded.forward(&x, Mode::Eval).unwrap().main_logits;
        assert_eq!(a, b);
    }
}

#[test]
fn checkpoint_errors_are_specific() {
    let dir = tempfile::tempdir().unwrap();
    let m = GtnModel::new(spec(Variant::Gtn, 0.2), &Rng::new(1)).unwrap();
    save_checkpoint(&m, dir.path(), BTreeMap::new()).unwrap();

    let other = BackboneSpec::Mlp {
        input_dim: 6,
        widths: vec![12, 9],
    };
    assert!(matches!(load_backbone(dir.path(), &other, 0), Err(Error::Incompatible(_))));
    let b = load_backbone(dir.path(), &small_mlp(), 0).unwrap();
    assert_eq!(b.checksum(), m.backbone().checksum());

    let file = dir.path().join("tensors/main_head.weight.bin");
    let mut bytes = std::fs::read(&file).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&file, bytes).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checksum { .. })));
}

#[test]
fn load_state_rejects_mismatched_shapes() {
    let mut m = GtnModel::new(spec(Variant::Gtn, 0.2), &Rng::new(1)).unwrap();
    let mut state = m.state();
    state.insert("main_head.bias".into(), Tensor::zeros(&[4]));
    assert!(matches!(m.load_state(&state), Err(Error::Incompatible(_))));
    let mut state = m.state();
    state.insert("extra".into(), Tensor::zeros(&[1]));
    assert!(matches!(m.load_state(&state), Err(Error::Incompatible(_))));
}
