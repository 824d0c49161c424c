//! Projection head, classifier, and the EMA real-center.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::nn::{Builder, Component, Linear, ParamStore, Session, WeightInit};
use crate::tape::Var;
use crate::tensor::Scalar;

/// Column of the classifier output that holds the fake logit.
pub const FAKE_INDEX: usize = 1;

/// Two-layer MLP with a hardswish between, followed by L2 normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

impl ProjectionHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, d_in: usize, hidden: usize, d_e: usize) -> Self {
        let mut b = Builder::new(store, rng, Component::ProjectionHead);
        Self {
            fc1: b.linear("projection.fc1", d_in, hidden, WeightInit::UniformFanIn),
            fc2: b.linear("projection.fc2", hidden, d_e, WeightInit::UniformFanIn),
        }
    }

    /// `[N, d_in] -> [N, d_e]` unit-norm embeddings.
    pub fn project<T: Scalar>(&self, s: &mut Session<T>, f_s: Var) -> Result<Var> {
        let h = self.fc1.forward(s, f_s)?;
        let h = s.tape.hardswish(h)?;
        let z = self.fc2.forward(s, h)?;
        s.tape.l2_normalize(z)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Classified {
    /// `[N, 2]` logits ordered (real, fake).
    pub logits: Var,
    /// `[N]` softmax probability of the fake class.
    pub p_fake: Var,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    fc: Linear,
}

impl Classifier {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, d_e: usize) -> Self {
        let mut b = Builder::new(store, rng, Component::Classifier);
        Self {
            fc: b.linear("classifier", d_e, 2, WeightInit::UniformFanIn),
        }
    }

    pub fn classify<T: Scalar>(&self, s: &mut Session<T>, z: Var) -> Result<Classified> {
        let logits = self.fc.forward(s, z)?;
        let probs = s.tape.softmax(logits)?;
        let p_fake = s.tape.column(probs, FAKE_INDEX)?;
        Ok(Classified { logits, p_fake })
    }
}

/// Unit-norm anchor for real embeddings, moved by an exponential moving
/// average of each batch's mean real embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealCenter {
    pub c: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub mu: f64,
    /// Number of updates applied; zero means not yet initialized.
    pub step: u64,
    /// `||c_t - c_{t-1}||` of the latest update.
    pub last_drift: f64,
}

const NORM_FLOOR: f64 = 1e-12;

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > NORM_FLOOR) {
        return Err(Error::DegenerateNorm { op: "ema_update", norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

impl RealCenter {
    pub fn new(dim: usize, mu: f64) -> Result<Self> {
        if dim == 0 {
            return Err(arg_err("real_center", "dimension must be positive"));
        }
        if !(mu > 0.0 && mu < 1.0) {
            return Err(arg_err("real_center", format!("mu {mu} not in (0, 1)")));
        }
        Ok(Self {
            c: vec![0.0; dim],
            c_prev: vec![0.0; dim],
            mu,
            step: 0,
            last_drift: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.step > 0
    }

    /// Mean of the L2-normalized rows.
    pub fn batch_mean(&self, real_embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for z in real_embeddings {
            if z.len() != d {
                return Err(shape_err("ema_update", format!("embedding of width {} for center of {d}", z.len())));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "ema_update" });
            }
            for (m, v) in mean.iter_mut().zip(normalized(z)?) {
                *m += v;
            }
        }
        let inv = 1.0 / real_embeddings.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        Ok(mean)
    }

    /// One EMA step from detached real embeddings. An empty batch leaves the
    /// center unchanged; the first non-empty batch initializes it.
    pub fn ema_update(&mut self, real_embeddings: &[Vec<f64>]) -> Result<()> {
        if real_embeddings.is_empty() {
            return Ok(());
        }
        let mean = self.batch_mean(real_embeddings)?;
        if self.step == 0 {
            self.c = normalized(&mean)?;
            self.c_prev = self.c.clone();
            self.last_drift = 0.0;
            self.step = 1;
            return Ok(());
        }
        let raw: Vec<f64> = self
            .c
            .iter()
            .zip(&mean)
            .map(|(c, z)| self.mu * c + (1.0 - self.mu) * z)
            .collect();
        let next = normalized(&raw)?;
        self.last_drift = next.iter().zip(&self.c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        self.c_prev = std::mem::replace(&mut self.c, next);
        self.step += 1;
        Ok(())
    }

    /// Euclidean distance from the center.
    pub fn distance(&self, z: &[f64]) -> f64 {
        z.iter().zip(&self.c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn first_batch_initializes() {
        let mut c = RealCenter::new(4, 0.99).unwrap();
        assert!(!c.is_initialized());
        c.ema_update(&[]).unwrap();
        assert_eq!(c.step, 0);
        c.ema_update(&[vec![0.0, 2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(c.c, e(1, 4));
        assert_eq!(c.step, 1);
    }

    #[test]
    fn orthogonal_pull() {
        let mut c = RealCenter::new(2, 0.99).unwrap();
        c.ema_update(&[e(0, 2)]).unwrap();
        c.ema_update(&[e(1, 2)]).unwrap();
        let n = (0.99f64.powi(2) + 0.01f64.powi(2)).sqrt();
        assert!((c.c[0] - 0.99 / n).abs() < 1e-15);
        assert!((c.c[1] - 0.01 / n).abs() < 1e-15);
        assert!((c.c[0] - 0.999949).abs() < 1e-6);
        assert!((c.c[1] - 0.010101).abs() < 1e-6);
        assert!((c.last_drift - 0.0101006).abs() < 1e-6);
    }

    #[test]
    fn fixed_point_is_exact() {
        let mut c = RealCenter::new(3, 0.99).unwrap();
        c.ema_update(&[e(0, 3)]).unwrap();
        for _ in 0..10 {
            c.ema_update(&[e(0, 3)]).unwrap();
            assert_eq!(c.c, e(0, 3));
        }
    }

    #[test]
    fn opposite_mean_is_degenerate_at_half() {
        let mut c = RealCenter::new(2, 0.5).unwrap();
        c.ema_update(&[e(0, 2)]).unwrap();
        let err = c.ema_update(&[vec![-1.0, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::DegenerateNorm { .. }));
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = RealCenter::new(2, 0.99).unwrap();
        assert!(c.ema_update(&[vec![f64::NAN, 1.0]]).is_err());
        assert!(c.ema_update(&[vec![1.0, 0.0, 0.0]]).is_err());
        assert!(RealCenter::new(2, 1.0).is_err());
    }
}
