use lrdnet::audit::count_params;
use lrdnet::backbone::{apply_gates, Backbone, GateOverride, Gating};
use lrdnet::gradcheck::{grad_check_reference, Coverage, Objective};
use lrdnet::mswgm::GuidanceSignals;
use lrdnet::nn::{Component, Session};
use lrdnet::{LrdNet, ModelConfig, Result, Scalar, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

fn gate(f: &Tensor<f64>, logit: f64, spatial: f64) -> Vec<f64> {
    let s = f.shape().to_vec();
    let mut t = Tape::new();
    let fv = t.leaf(f);
    let l = t.constant([s[0], s[1]], vec![logit; s[0] * s[1]]).unwrap();
    let g = t.constant([s[0], 1, 3, 3], vec![spatial; s[0] * 9]).unwrap();
    let out = apply_gates(&mut t, fv, l, g).unwrap();
    t.value(out).to_vec()
}

#[test]
fn gate_reference_cases() {
    let f = uniform(1, &[2, 4, 6, 6], -2.0, 2.0);
    assert_eq!(gate(&f, f64::INFINITY, 1.0), f.data());
    assert!(gate(&f, 0.3, 0.0).iter().all(|&v| v == 0.0));
    for (g, x) in gate(&f, 0.0, 1.0).iter().zip(f.data()) {
        assert_eq!(*g, 0.5 * x);
    }
}

#[test]
fn mismatched_guidance_width_is_rejected() {
    let cfg = ModelConfig::micro();
    let model = LrdNet::<f64>::new(&cfg).unwrap();
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &model.store, false, false);
    let f = s.tape.leaf(&uniform(2, &[1, 12, 4, 4], 0.0, 1.0));
    let channel = s.tape.leaf(&uniform(3, &[1, cfg.d_g + 1], -1.0, 1.0));
    let spatial = s.tape.leaf(&Tensor::full([1, 1, 4, 4], 0.5));
    let signals = GuidanceSignals { channel, spatial };
    let err = model.backbone.condition(&mut s, 0, f, &signals, GateOverride::default());
    assert!(err.is_err());
}

fn pooled(model: &LrdNet<f64>, x: &Tensor<f64>, identity: bool) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &model.store, false, false);
    let xv = s.tape.leaf(x);
    let gating_signals;
    let gating = if identity {
        let (g, _) = model.mswgm.guidance(&mut s, xv).unwrap();
        gating_signals = g;
        Gating::Guided {
            signals: &gating_signals,
            overrides: GateOverride::IDENTITY,
        }
    } else {
        Gating::Off
    };
    let f = model.backbone.forward(&mut s, xv, gating).unwrap();
    s.tape.value(f).to_vec()
}

fn identity_equivalence(cfg: &ModelConfig, expect_dim: usize) {
    let model = LrdNet::<f64>::new(cfg).unwrap();
    let n = cfg.input_size;
    let x = uniform(7, &[2, 3, n, n], -1.0, 1.0);
    let off = pooled(&model, &x, false);
    let ident = pooled(&model, &x, true);
    assert_eq!(off.len(), 2 * expect_dim);
    for (a, b) in off.iter().zip(&ident) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn identity_gates_match_unconditioned_micro() {
    identity_equivalence(&ModelConfig::micro(), 64);
}

#[test]
fn full_backbone_shapes_and_identity_gates() {
    let cfg = ModelConfig::full();
    let model = LrdNet::<f64>::new(&cfg).unwrap();
    let points: Vec<(usize, usize)> = model
        .backbone
        .conditioners()
        .iter()
        .map(|c| (c.point.channels, cfg.input_size / c.point.divisor))
        .collect();
    assert_eq!(points, [(24, 28), (48, 14)]);
    assert_eq!(model.backbone.feature_dim(), 576);
    // The forward pass checks both conditioning shapes at runtime.
    identity_equivalence(&cfg, 576);
}

#[test]
fn wrong_input_size_is_rejected() {
    let model = LrdNet::<f64>::new(&ModelConfig::micro()).unwrap();
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &model.store, false, false);
    let x = s.tape.leaf(&uniform(1, &[1, 3, 48, 48], 0.0, 1.0));
    assert!(model.backbone.forward(&mut s, x, Gating::Off).is_err());
}

#[test]
fn full_backbone_parameter_budget() {
    let model = LrdNet::<f32>::new(&ModelConfig::full()).unwrap();
    let n = count_params(&model).count(Component::SpatialBackbone);
    assert!((2_400_000..=2_700_000).contains(&n), "{n}");
}

/// `sum(f_s)` in eval mode with every parameter bound to an input leaf.
struct PooledSum<'a> {
    model: &'a LrdNet<f64>,
    x: &'a Tensor<f64>,
}

impl Objective for PooledSum<'_> {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let model: LrdNet<T> = self.model.cast();
        let mut s = Session::with_bound(tape, &model.store, inputs, false)?;
        let x = s.tape.leaf(&self.x.cast::<T>());
        let (g, _) = model.mswgm.guidance(&mut s, x)?;
        let gating = Gating::Guided {
            signals: &g,
            overrides: GateOverride::default(),
        };
        let f = model.backbone.forward(&mut s, x, gating)?;
        s.tape.sum(f)
    }
}

#[test]
fn conditioning_weights_pass_gradient_check() {
    let cfg = ModelConfig::micro();
    let model = LrdNet::<f64>::new(&cfg).unwrap();
    let x = uniform(3, &[2, 3, 32, 32], -1.0, 1.0);
    let inputs: Vec<Tensor<f64>> = model
        .store
        .params()
        .iter()
        .map(|p| {
            let mut t = p.tensor.clone();
            t.requires_grad = p.name.starts_with("condition");
            t
        })
        .collect();
    assert_eq!(inputs.iter().filter(|t| t.requires_grad).count(), 4);
    let objective = PooledSum { model: &model, x: &x };
    let coverage = Coverage::Sampled { per_input: 48, seed: 1 };
    let report = grad_check_reference(&inputs, 1e-8, coverage, &objective).unwrap();
    assert_eq!(report.checked, 48 + 12 + 48 + 16);
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn raising_a_channel_logit_never_shrinks_it(
        seed in any::<u64>(),
        channel in 0usize..4,
        base in -6.0f64..6.0,
        bump in 0.0f64..6.0,
    ) {
        let f = uniform(seed, &[1, 4, 5, 5], 0.0, 3.0);
        let map = uniform(seed ^ 9, &[1, 1, 3, 3], 0.0, 1.0);
        let logits = uniform(seed ^ 3, &[1, 4], -3.0, 3.0);
        let run = |l: &Tensor<f64>| -> Vec<f64> {
            let mut t = Tape::new();
            let (fv, lv, gv) = (t.leaf(&f), t.leaf(l), t.leaf(&map));
            let out = apply_gates(&mut t, fv, lv, gv).unwrap();
            t.value(out).to_vec()
        };
        let mut lo = logits.clone();
        lo.data_mut()[channel] = base;
        let mut hi = logits.clone();
        hi.data_mut()[channel] = base + bump;
        let (a, b) = (run(&lo), run(&hi));
        for k in channel * 25..(channel + 1) * 25 {
            prop_assert!(b[k].abs() >= a[k].abs());
        }
    }
}

#[test]
fn backbone_is_deterministic_in_the_seed() {
    let cfg = ModelConfig::micro();
    let mut a = lrdnet::nn::ParamStore::<f64>::new();
    let mut b = lrdnet::nn::ParamStore::<f64>::new();
    Backbone::new(&cfg, &mut a, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    Backbone::new(&cfg, &mut b, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    for (p, q) in a.params().iter().zip(b.params()) {
        assert_eq!(p.tensor.data(), q.tensor.data());
    }
}
