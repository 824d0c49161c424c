//! Central finite differences against tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::dataset::Family;
use crate::error::{arg_err, Error, Result};
use crate::losses::{total_loss, Label};
use crate::model::LrdNet;
use crate::nn::Session;
use crate::synth;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use twofloat::TwoFloat;

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub checked: usize,
}

/// Which coordinates of each differentiable input get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most `per_input` coordinates per input, drawn without replacement.
    Sampled { per_input: usize, seed: u64 },
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar `f` with central differences.
///
/// `f` receives one leaf per input (in order) and must return a scalar node.
/// Only inputs with `requires_grad` are perturbed.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, coverage: Coverage, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(arg_err("grad_check", format!("eps {eps:e} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out).iter().product::<usize>() != 1 {
        return Err(Error::NonScalarOutput {
            shape: tape.shape(out).to_vec(),
        });
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| grads.get_or_zeros(v, t.len()))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = false;
                tape.leaf(&t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad || input.is_empty() {
            continue;
        }
        let indices = match coverage {
            Coverage::All => (0..input.len()).collect(),
            Coverage::Sampled { per_input, seed } => coordinates(input.len(), i, per_input, seed),
        };
        for j in indices {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            report.record(i, j, analytic[i][j], numeric);
        }
    }
    Ok(report)
}

/// A scalar function that can be evaluated at any precision, so analytic
/// 64-bit gradients can be compared against double-double differences.
pub trait Objective {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

/// Like [`grad_check`], but the central differences are evaluated in
/// double-double so cancellation in `f(x + eps) - f(x - eps)` stays far below
/// any practical tolerance. Analytic gradients still come from the 64-bit
/// tape.
pub fn grad_check_reference<O: Objective>(
    inputs: &[Tensor<f64>],
    eps: f64,
    coverage: Coverage,
    objective: &O,
) -> Result<GradCheckReport> {
    if !(1e-12..=1e-3).contains(&eps) {
        return Err(arg_err("grad_check", format!("eps {eps:e} outside [1e-12, 1e-3]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = objective.eval(&mut tape, &vars)?;
    if tape.shape(out).iter().product::<usize>() != 1 {
        return Err(Error::NonScalarOutput {
            shape: tape.shape(out).to_vec(),
        });
    }
    let grads = tape.backward(out)?;

    let eval = |params: &[Tensor<TwoFloat>]| -> Result<TwoFloat> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t)).collect();
        let out = objective.eval(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let base: Vec<Tensor<TwoFloat>> = inputs
        .iter()
        .map(|t| {
            let mut c = t.cast::<TwoFloat>();
            c.requires_grad = false;
            c
        })
        .collect();
    let mut work = base.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let step = TwoFloat::from(eps);
    for (i, (input, &v)) in inputs.iter().zip(&vars).enumerate() {
        if !input.requires_grad || input.is_empty() {
            continue;
        }
        let analytic = grads.get_or_zeros(v, input.len());
        let indices = match coverage {
            Coverage::All => (0..input.len()).collect(),
            Coverage::Sampled { per_input, seed } => coordinates(input.len(), i, per_input, seed),
        };
        for j in indices {
            let orig = base[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric: f64 = (plus - minus).div_s(step * 2.0).into();
            report.record(i, j, analytic[j], numeric);
        }
    }
    Ok(report)
}

struct TrainingObjective<'a> {
    model: &'a LrdNet<f64>,
    images: &'a [&'a Tensor<f32>],
    labels: &'a [Label],
}

impl Objective for TrainingObjective<'_> {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let model: LrdNet<T> = self.model.cast();
        let mut s = Session::with_bound(tape, &model.store, inputs, true)?;
        let x = model.batch_leaf(s.tape, self.images)?;
        let out = model.forward(&mut s, x)?;
        let (loss, _) = total_loss(s.tape, out.z, out.p_fake, self.labels, &model.center, &model.loss_weights())?;
        Ok(loss)
    }
}

/// Checks the complete training objective with respect to every model
/// parameter on a small mixed batch in training mode.
///
/// The real center is placed near the batch's real embeddings so the fake
/// hinge is active, and the drift deadzone is set to zero so the drift term
/// contributes gradient.
pub fn model_grad_check(cfg: &ModelConfig, batch: usize, per_param: usize, eps: f64) -> Result<GradCheckReport> {
    if batch < 2 {
        return Err(arg_err("model_grad_check", "batch needs at least one real and one fake"));
    }
    let mut cfg = cfg.clone();
    cfg.delta = 0.0;
    let mut model = LrdNet::<f64>::new(&cfg)?;
    let size = cfg.input_size.max(synth::MIN_SIZE);
    let mut images = Vec::with_capacity(batch);
    let mut labels = Vec::with_capacity(batch);
    for i in 0..batch as u64 {
        let real = synth::gen_real(synth::derive_seed(cfg.seed, 0x6763, i), size)?;
        if i % 2 == 0 {
            images.push(real.pixels);
            labels.push(Label::Real);
        } else {
            let family = Family::ALL[(i as usize / 2) % Family::ALL.len()];
            let (fake, _) = synth::gen_fake(&real, family, synth::derive_seed(cfg.seed, 0x6764, i))?;
            images.push(fake.pixels);
            labels.push(Label::Fake);
        }
    }
    if size != cfg.input_size {
        images = images
            .into_iter()
            .map(|img| {
                let mut t = Tape::<f32>::new();
                let x = t.constant([1, 3, size, size], img.into_data())?;
                let y = t.bilinear_resize(x, cfg.input_size, cfg.input_size)?;
                Tensor::new([3, cfg.input_size, cfg.input_size], t.value(y).to_vec())
            })
            .collect::<Result<_>>()?;
    }
    let refs: Vec<&Tensor<f32>> = images.iter().collect();

    // Center: normalized mean real embedding, nudged off it.
    let preds = model.predict(&refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc3);
    let reals: Vec<Vec<f64>> = preds
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l == Label::Real)
        .map(|(p, _)| p.z.iter().map(|v| v + 0.05 * rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
        .collect();
    model.center.ema_update(&reals)?;

    let inputs: Vec<Tensor<f64>> = model
        .store
        .params()
        .iter()
        .map(|p| {
            let mut t = p.tensor.clone();
            t.requires_grad = true;
            t.grad = None;
            t
        })
        .collect();
    let objective = TrainingObjective {
        model: &model,
        images: &refs,
        labels: &labels,
    };
    let coverage = Coverage::Sampled {
        per_input: per_param,
        seed: cfg.seed,
    };
    grad_check_reference(&inputs, eps, coverage, &objective)
}

fn coordinates(len: usize, input: usize, per_input: usize, seed: u64) -> Vec<usize> {
    if per_input >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((input as u64) << 32));
    let mut idx = sample(&mut rng, len, per_input).into_vec();
    idx.sort_unstable();
    idx
}

impl GradCheckReport {
    fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = Some(Mismatch {
                input,
                index,
                analytic,
                numeric,
                rel_error: e,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::from_f64([1], &[3.0]).unwrap().with_grad();
        let report = grad_check(&[x], 1e-5, Coverage::All, |t, v| {
            let y = t.square(v[0])?;
            t.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
        let w = report.worst.unwrap();
        assert_eq!(w.analytic, 6.0);
    }

    #[test]
    fn rejects_non_scalar_and_bad_eps() {
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap().with_grad();
        let err = grad_check(&[x.clone()], 1e-5, Coverage::All, |t, v| t.square(v[0])).unwrap_err();
        assert!(matches!(err, Error::NonScalarOutput { .. }));
        assert!(grad_check(&[x], 1e-2, Coverage::All, |t, v| t.sum(v[0])).is_err());
    }
}
