//! Optimizer, training loop, and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Family, LabeledImage};
use crate::error::{Error, Result};
use crate::losses::{total_loss, Label, LossBreakdown};
use crate::model::LrdNet;
use crate::nn::{ParamStore, Session, BN_MOMENTUM};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates every parameter that has a gradient; moments are kept in f64.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let Some(grad) = p.tensor.grad.take() else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let wf = w.to_f64().unwrap();
                let g = grad[j].to_f64().unwrap() + self.weight_decay * wf;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w = T::lit(wf - self.lr * mh / (vh.sqrt() + self.eps));
            }
            p.tensor.grad = Some(grad);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step {
        step: u64,
        l_cls: f64,
        l_center: f64,
        l_drift: f64,
        total: f64,
        drift: f64,
        lr: f64,
    },
    Epoch {
        epoch: usize,
        acc: f64,
        mean_dist_real: f64,
        mean_dist_fake: f64,
        mean_loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        val_acc: Option<f64>,
    },
}

/// Model, optimizer, and data-order RNG: everything needed to resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: LrdNet<f32>,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: LrdNet<f32>) -> Self {
        let c = &model.cfg;
        let optimizer = Adam::new(&model.store, c.lr, c.beta1, c.beta2, c.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(crate::synth::derive_seed(c.seed, 0x7472_6169_6e, 0));
        Self {
            model,
            optimizer,
            rng,
            step: 0,
        }
    }
}

/// Result of a single optimization step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    pub p_fake: Vec<f64>,
    pub z: Vec<Vec<f64>>,
}

/// forward, loss, backward, optimizer step, then the EMA update with the
/// detached embeddings of this forward.
pub fn train_step<T: Scalar>(
    model: &mut LrdNet<T>,
    optimizer: &mut Adam,
    images: &[&Tensor<f32>],
    labels: &[Label],
) -> Result<StepReport> {
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &model.store, true, true);
    let x = model.batch_leaf(s.tape, images)?;
    let out = model.forward(&mut s, x)?;
    let (loss, breakdown) = total_loss(s.tape, out.z, out.p_fake, labels, &model.center, &model.loss_weights())?;
    let grads = s.tape.backward(loss)?;
    let d = model.cfg.d_e;
    let z: Vec<Vec<f64>> = s
        .tape
        .value(out.z)
        .chunks(d)
        .map(|r| r.iter().map(|v| v.to_f64().unwrap()).collect())
        .collect();
    let p_fake = s.tape.value(out.p_fake).iter().map(|v| v.to_f64().unwrap()).collect();
    let done = s.finish();
    model.store.zero_grad();
    model.store.accumulate_grads(&done.bound, &grads)?;
    optimizer.step(&mut model.store);
    model.store.apply_bn_updates(&done.bn_updates, BN_MOMENTUM);
    let reals: Vec<Vec<f64>> = z
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == Label::Real)
        .map(|(r, _)| r.clone())
        .collect();
    model.center.ema_update(&reals)?;
    Ok(StepReport { breakdown, p_fake, z })
}

/// Runs `epochs` passes over `train_set`, reporting each log record to
/// `sink`. A non-finite loss aborts with [`Error::Diverged`].
pub fn train(
    state: &mut TrainState,
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    epochs: usize,
    mut sink: impl FnMut(&LogRecord),
) -> Result<()> {
    if train_set.is_empty() {
        return Err(Error::Empty("train"));
    }
    let bs = state.model.cfg.batch_size;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut state.rng);
        let (mut correct, mut seen, mut loss_sum, mut batches) = (0usize, 0usize, 0.0, 0usize);
        let mut dist = DistanceAccumulator::default();
        for chunk in order.chunks(bs) {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &train_set[i].pixels).collect();
            let labels: Vec<Label> = chunk.iter().map(|&i| train_set[i].label).collect();
            let step = state.step + 1;
            let report = train_step(&mut state.model, &mut state.optimizer, &images, &labels).map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    step,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            let b = report.breakdown;
            if !b.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {b:?}"),
                });
            }
            state.step = step;
            for ((p, l), z) in report.p_fake.iter().zip(&labels).zip(&report.z) {
                correct += usize::from(decide(*p, DEFAULT_THRESHOLD) == *l);
                if state.model.center.is_initialized() {
                    dist.add(*l, state.model.center.distance(z));
                }
            }
            seen += labels.len();
            loss_sum += b.total;
            batches += 1;
            sink(&LogRecord::Step {
                step,
                l_cls: b.l_cls,
                l_center: b.l_center,
                l_drift: b.l_drift,
                total: b.total,
                drift: state.model.center.last_drift,
                lr: state.optimizer.lr,
            });
        }
        let val_acc = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&state.model, val_set, DEFAULT_THRESHOLD)?.accuracy)
        };
        let (mean_dist_real, mean_dist_fake) = dist.means();
        sink(&LogRecord::Epoch {
            epoch,
            acc: correct as f64 / seen as f64,
            mean_dist_real,
            mean_dist_fake,
            mean_loss: loss_sum / batches as f64,
            val_acc,
        });
    }
    Ok(())
}

/// Hard decision; a tie at the threshold counts as fake.
pub fn decide(p_fake: f64, threshold: f64) -> Label {
    if p_fake >= threshold {
        Label::Fake
    } else {
        Label::Real
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct DistanceAccumulator {
    real: (f64, usize),
    fake: (f64, usize),
}

impl DistanceAccumulator {
    fn add(&mut self, label: Label, d: f64) {
        let slot = match label {
            Label::Real => &mut self.real,
            Label::Fake => &mut self.fake,
        };
        slot.0 += d;
        slot.1 += 1;
    }

    fn means(&self) -> (f64, f64) {
        let mean = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
        (mean(self.real), mean(self.fake))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub mean_dist: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub threshold: f64,
    pub accuracy: f64,
    pub real: GroupMetrics,
    pub fake: GroupMetrics,
    /// Fake samples grouped by family tag.
    pub families: BTreeMap<String, GroupMetrics>,
}

const EVAL_BATCH: usize = 64;

/// Eval-mode accuracy and real-center distances.
pub fn evaluate<T: Scalar>(model: &LrdNet<T>, data: &[LabeledImage], threshold: f64) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let mut groups: BTreeMap<String, (usize, usize, f64)> = BTreeMap::new();
    let (mut real, mut fake) = ((0usize, 0usize, 0.0), (0usize, 0usize, 0.0));
    let mut correct = 0;
    for chunk in data.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|d| &d.pixels).collect();
        let preds = model.predict(&images)?;
        for (item, pred) in chunk.iter().zip(preds) {
            let ok = usize::from(decide(pred.p_fake, threshold) == item.label);
            let dist = model.center.distance(&pred.z);
            correct += ok;
            let slot = match item.label {
                Label::Real => &mut real,
                Label::Fake => &mut fake,
            };
            slot.0 += 1;
            slot.1 += ok;
            slot.2 += dist;
            if let (Label::Fake, Some(f)) = (item.label, item.family) {
                let g = groups.entry(f.name().to_string()).or_default();
                g.0 += 1;
                g.1 += ok;
                g.2 += dist;
            }
        }
    }
    let metrics = |(n, ok, d): (usize, usize, f64)| GroupMetrics {
        n,
        accuracy: if n == 0 { f64::NAN } else { ok as f64 / n as f64 },
        mean_dist: if n == 0 { f64::NAN } else { d / n as f64 },
    };
    Ok(EvalReport {
        n: data.len(),
        threshold,
        accuracy: correct as f64 / data.len() as f64,
        real: metrics(real),
        fake: metrics(fake),
        families: groups.into_iter().map(|(k, v)| (k, metrics(v))).collect(),
    })
}

/// The reals plus one family's fakes.
pub fn family_split(data: &[LabeledImage], family: Family) -> Vec<LabeledImage> {
    data.iter()
        .filter(|d| d.label == Label::Real || d.family == Some(family))
        .cloned()
        .collect()
}
