use lrdnet::embedding::RealCenter;
use lrdnet::losses::{bce, center_loss, drift_loss, total_loss, LossWeights, P_CLAMP};
use lrdnet::{Label, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn leaf(t: &mut Tape<f64>, shape: &[usize], v: &[f64]) -> Var {
    t.leaf(&Tensor::from_f64(shape.to_vec(), v).unwrap().with_grad())
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn labels_from(bits: &[bool]) -> Vec<Label> {
    bits.iter().map(|&f| if f { Label::Fake } else { Label::Real }).collect()
}

fn center_at(c: Vec<f64>) -> RealCenter {
    let mut r = RealCenter::new(c.len(), 0.99).unwrap();
    r.ema_update(&[c]).unwrap();
    r
}

#[test]
fn bce_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let p: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<Label> = (0..8).map(|_| if rng.random_bool(0.5) { Label::Fake } else { Label::Real }).collect();
        let mut oracle = 0.0;
        for (pi, yi) in p.iter().zip(&y) {
            let q = pi.clamp(P_CLAMP, 1.0 - P_CLAMP);
            let t = yi.target();
            oracle -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        }
        oracle /= 8.0;
        let mut t = Tape::new();
        let pv = leaf(&mut t, &[8], &p);
        let l = bce(&mut t, pv, &y).unwrap();
        assert!((t.scalar(l) - oracle).abs() <= 1e-7);
    }
    let mut t = Tape::new();
    let pv = leaf(&mut t, &[1], &[1.0 - 1e-7]);
    let l = bce(&mut t, pv, &[Label::Fake]).unwrap();
    assert!((t.scalar(l) - 1e-7).abs() < 1e-12);
    assert!(bce(&mut t, pv, &[]).is_err());
}

#[test]
fn center_reference_cases() {
    let c = [0.6, 0.8];
    let mut t = Tape::new();
    let z = leaf(&mut t, &[1, 2], &c);
    let l = center_loss(&mut t, z, &[Label::Fake], &c, 0.8).unwrap();
    assert!((t.scalar(l) - 0.64).abs() < 1e-15);
    let l = center_loss(&mut t, z, &[Label::Real], &c, 0.8).unwrap();
    assert_eq!(t.scalar(l), 0.0);
    let z = leaf(&mut t, &[0, 2], &[]);
    assert!(center_loss(&mut t, z, &[], &c, 0.8).is_err());
}

#[test]
fn drift_reference_cases() {
    let mut e1 = vec![0.0; 64];
    e1[0] = 1.0;
    let mut e2 = vec![0.0; 64];
    e2[1] = 1.0;
    let mut t = Tape::new();
    let zbar = leaf(&mut t, &[1, 64], &e2);
    let l = drift_loss(&mut t, zbar, &e1, 0.99, 0.0).unwrap();
    assert!((t.scalar(l) - 0.010102).abs() < 2e-6, "{}", t.scalar(l));
    // Threshold exactly at the computed drift.
    let d = t.scalar(l);
    let l = drift_loss(&mut t, zbar, &e1, 0.99, d).unwrap();
    assert_eq!(t.scalar(l), 0.0);
    // Mean along the center: no drift.
    let zbar = leaf(&mut t, &[1, 64], &e1.iter().map(|v| 0.7 * v).collect::<Vec<_>>());
    let l = drift_loss(&mut t, zbar, &e1, 0.99, 0.0).unwrap();
    assert!(t.scalar(l) < 1e-15);
}

#[test]
fn total_is_inert_before_the_center_exists() {
    let mut t = Tape::new();
    let z = leaf(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let p = leaf(&mut t, &[2], &[0.3, 0.6]);
    let labels = [Label::Real, Label::Fake];
    let empty = RealCenter::new(2, 0.99).unwrap();
    let (_, b) = total_loss(&mut t, z, p, &labels, &empty, &LossWeights::default()).unwrap();
    assert_eq!((b.l_center, b.l_drift), (0.0, 0.0));
    assert_eq!(b.total, b.l_cls);
}

#[test]
fn all_terms_zero_gives_zero_total() {
    let c = vec![1.0, 0.0];
    let mut t = Tape::new();
    let z = leaf(&mut t, &[2, 2], &[1.0, 0.0, -1.0, 0.0]);
    let p = leaf(&mut t, &[2], &[0.0, 1.0]);
    let labels = [Label::Real, Label::Fake];
    let w = LossWeights {
        delta: 0.0,
        ..LossWeights::default()
    };
    let (_, b) = total_loss(&mut t, z, p, &labels, &center_at(c), &w).unwrap();
    assert_eq!((b.l_center, b.l_drift), (0.0, 0.0));
    // Clamped probabilities leave a residue of about 1e-7 in the BCE.
    assert!(b.total < 2e-7 && (b.total - b.l_cls).abs() == 0.0);
}

/// Random unit embeddings around a random center.
fn batch(seed: u64, n: usize, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = unit(&mut rng, d);
    let z: Vec<f64> = (0..n).flat_map(|_| unit(&mut rng, d)).collect();
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    bits[0] = false;
    bits[n - 1] = true;
    (c, z, p, labels_from(&bits))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn terms_are_non_negative_and_compose(seed in any::<u64>(), n in 2usize..9, lc in 0.0f64..3.0, ld in 0.0f64..3.0) {
        let d = 6;
        let (c, z, p, labels) = batch(seed, n, d);
        let w = LossWeights { lambda_c: lc, lambda_d: ld, margin: 0.8, delta: 0.0 };
        let mut t = Tape::new();
        let zv = leaf(&mut t, &[n, d], &z);
        let pv = leaf(&mut t, &[n], &p);
        let (_, b) = total_loss(&mut t, zv, pv, &labels, &center_at(c), &w).unwrap();
        prop_assert!(b.l_cls >= 0.0 && b.l_center >= 0.0 && b.l_drift >= 0.0);
        prop_assert!((b.total - (b.l_cls + lc * b.l_center + ld * b.l_drift)).abs() <= 1e-6);
    }

    #[test]
    fn doubling_lambda_c_doubles_its_share(seed in any::<u64>(), lc in 0.01f64..2.0) {
        let d = 6;
        let (c, z, p, labels) = batch(seed, 6, d);
        let center = center_at(c);
        let run = |w: LossWeights| {
            let mut t = Tape::new();
            let zv = leaf(&mut t, &[6, d], &z);
            let pv = leaf(&mut t, &[6], &p);
            total_loss(&mut t, zv, pv, &labels, &center, &w).unwrap().1
        };
        let base = LossWeights { lambda_c: lc, lambda_d: 0.0, margin: 0.8, delta: 0.0 };
        let one = run(base);
        let two = run(LossWeights { lambda_c: 2.0 * lc, ..base });
        let zero = run(LossWeights { lambda_c: 0.0, ..base });
        prop_assert_eq!(zero.total, zero.l_cls);
        prop_assert_eq!(two.l_center, one.l_center);
        prop_assert_eq!(two.lambda_c * two.l_center, 2.0 * (one.lambda_c * one.l_center));
        prop_assert!(((two.total - two.l_cls) - 2.0 * (one.total - one.l_cls)).abs() <= 1e-12);
    }

    #[test]
    fn reals_on_the_center_cost_nothing(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = unit(&mut rng, 8);
        let z: Vec<f64> = (0..n).flat_map(|_| c.clone()).collect();
        let mut t = Tape::new();
        let zv = leaf(&mut t, &[n, 8], &z);
        let l = center_loss(&mut t, zv, &vec![Label::Real; n], &c, 0.8).unwrap();
        prop_assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn distant_fakes_get_no_gradient(seed in any::<u64>(), extra in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = unit(&mut rng, 8);
        let dir = unit(&mut rng, 8);
        let r = 0.8 + extra;
        let z: Vec<f64> = c.iter().zip(&dir).map(|(a, b)| a + r * b).collect();
        let mut t = Tape::new();
        let zv = leaf(&mut t, &[1, 8], &z);
        let l = center_loss(&mut t, zv, &[Label::Fake], &c, 0.8).unwrap();
        let g = t.backward(l).unwrap().get_or_zeros(zv, 8);
        prop_assert!(g.iter().all(|v| *v == 0.0), "{:?}", g);
    }

    #[test]
    fn drift_below_threshold_has_no_gradient(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = unit(&mut rng, 8);
        let zbar = unit(&mut rng, 8);
        let mut t = Tape::new();
        let zv = leaf(&mut t, &[1, 8], &zbar);
        let probe = drift_loss(&mut t, zv, &c, 0.99, 0.0).unwrap();
        let drift = t.scalar(probe);
        let l = drift_loss(&mut t, zv, &c, 0.99, drift * 1.001).unwrap();
        prop_assert_eq!(t.scalar(l), 0.0);
        let g = t.backward(l).unwrap().get_or_zeros(zv, 8);
        prop_assert!(g.iter().all(|v| *v == 0.0));
    }
}
