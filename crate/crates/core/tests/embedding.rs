use lrdnet::embedding::{Classifier, ProjectionHead, RealCenter};
use lrdnet::gradcheck::{grad_check_reference, Coverage, Objective};
use lrdnet::losses::total_loss;
use lrdnet::nn::{ParamStore, Session};
use lrdnet::{Label, LrdNet, ModelConfig, Result, Scalar, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(seed: u64, shape: &[usize], scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

fn head(seed: u64) -> (ProjectionHead, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let h = ProjectionHead::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), 576, 128, 64);
    (h, store)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn projection_head_has_the_published_size() {
    let (_, store) = head(0);
    assert_eq!(store.num_trainable(), 576 * 128 + 128 + 128 * 64 + 64);
    assert_eq!(store.num_trainable(), 82_112);
}

fn project(h: &ProjectionHead, store: &ParamStore<f64>, f: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, store, false, false);
    let x = s.tape.leaf(f);
    let z = h.project(&mut s, x).unwrap();
    s.tape.value(z).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn embeddings_are_unit_norm(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let (h, store) = head(seed);
        let f = gaussian(seed ^ 5, &[3, 576], scale);
        for z in project(&h, &store, &f).chunks(64) {
            prop_assert!((norm(z) - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn ema_keeps_the_center_on_the_sphere(seed in any::<u64>(), steps in 1usize..20, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = RealCenter::new(8, 0.99).unwrap();
        for _ in 0..steps {
            let batch: Vec<Vec<f64>> = (0..k).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let before = c.step;
            c.ema_update(&batch).unwrap();
            prop_assert_eq!(c.step, before + 1);
            prop_assert!((norm(&c.c) - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn empty_update_leaves_center_bitwise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = RealCenter::new(8, 0.99).unwrap();
        for _ in 0..3 {
            let z: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            c.ema_update(&[z]).unwrap();
        }
        let snapshot = c.clone();
        c.ema_update(&[]).unwrap();
        prop_assert_eq!(c.c.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), snapshot.c.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(c, snapshot);
    }
}

struct DotWithV<'a> {
    head: &'a ProjectionHead,
    store: &'a ParamStore<f64>,
    f: &'a Tensor<f64>,
    v: &'a Tensor<f64>,
}

impl Objective for DotWithV<'_> {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let store = self.store.cast::<T>();
        let mut s = Session::with_bound(tape, &store, inputs, false)?;
        let x = s.tape.leaf(&self.f.cast::<T>());
        let z = self.head.project(&mut s, x)?;
        let v = s.tape.leaf(&self.v.cast::<T>());
        let zv = s.tape.mul(z, v)?;
        s.tape.sum(zv)
    }
}

#[test]
fn embedding_projection_passes_gradient_check() {
    let (h, store) = head(3);
    let f = gaussian(4, &[2, 576], 1.0);
    let v = gaussian(5, &[2, 64], 1.0);
    let inputs: Vec<Tensor<f64>> = store.params().iter().map(|p| p.tensor.clone().with_grad()).collect();
    let objective = DotWithV {
        head: &h,
        store: &store,
        f: &f,
        v: &v,
    };
    let coverage = Coverage::Sampled { per_input: 64, seed: 2 };
    let report = grad_check_reference(&inputs, 1e-8, coverage, &objective).unwrap();
    assert_eq!(report.checked, 4 * 64);
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

fn classify(store: &ParamStore<f64>, c: &Classifier, z: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, store, false, false);
    let zv = s.tape.leaf(z);
    let out = c.classify(&mut s, zv).unwrap();
    s.tape.value(out.p_fake).to_vec()
}

#[test]
fn classifier_size_symmetry_and_shift() {
    let mut store = ParamStore::new();
    let c = Classifier::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), 64);
    assert_eq!(store.num_trainable(), 130);
    let z = gaussian(2, &[4, 64], 0.2);
    let base = classify(&store, &c, &z);

    let bias = store.id("classifier.bias").unwrap();
    for k in [-30.0, -1.0, 2.5, 40.0] {
        let mut shifted = store.clone();
        shifted.param_mut(bias).data_mut().iter_mut().for_each(|b| *b += k);
        for (a, b) in base.iter().zip(classify(&shifted, &c, &z)) {
            assert!((a - b).abs() <= 1e-7, "shift {k}: {a} vs {b}");
        }
    }

    for p in store.params_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    assert!(classify(&store, &c, &z).iter().all(|&p| p == 0.5));
}

#[test]
fn hand_evaluated_orthogonal_step() {
    let mut c = RealCenter::new(64, 0.99).unwrap();
    let mut e1 = vec![0.0; 64];
    e1[0] = 1.0;
    let mut e2 = vec![0.0; 64];
    e2[1] = 1.0;
    c.ema_update(std::slice::from_ref(&e1)).unwrap();
    c.ema_update(&[e1.clone()]).unwrap();
    assert_eq!(c.c, e1);
    c.ema_update(&[e2]).unwrap();
    assert!((c.c[0] - 0.999949).abs() < 1e-6);
    assert!((c.c[1] - 0.010101).abs() < 1e-6);
    assert_eq!(c.c_prev, e1);
    assert_eq!(c.step, 3);
}

#[test]
fn losses_never_touch_the_stored_center() {
    let mut cfg = ModelConfig::micro();
    cfg.delta = 0.0;
    let mut model = LrdNet::<f64>::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut anchor: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = norm(&anchor);
    anchor.iter_mut().for_each(|v| *v /= n);
    model.center.ema_update(&[anchor]).unwrap();
    let before = model.center.clone();

    let images: Vec<Tensor<f32>> = (0..4)
        .map(|i| gaussian(20 + i, &[3, 32, 32], 0.2).cast::<f32>())
        .map(|mut t| {
            t.data_mut().iter_mut().for_each(|v| *v = (*v + 0.5).clamp(0.0, 1.0));
            t
        })
        .collect();
    let refs: Vec<&Tensor<f32>> = images.iter().collect();
    let labels = [Label::Real, Label::Fake, Label::Real, Label::Fake];
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &model.store, true, true);
    let x = model.batch_leaf(s.tape, &refs).unwrap();
    let out = model.forward(&mut s, x).unwrap();
    let (loss, b) = total_loss(s.tape, out.z, out.p_fake, &labels, &model.center, &model.loss_weights()).unwrap();
    assert!(b.l_center > 0.0 && b.l_drift > 0.0);
    let grads = s.tape.backward(loss).unwrap();
    let done = s.finish();
    model.store.accumulate_grads(&done.bound, &grads).unwrap();
    assert_eq!(model.center, before);
    // Every gradient lands on a trainable parameter; the center has no slot.
    assert_eq!(done.bound.len(), model.store.params().len());
}
