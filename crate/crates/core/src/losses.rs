//! Classification, center and drift losses.

use serde::{Deserialize, Serialize};

use crate::embedding::RealCenter;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

pub const P_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Binary target: fake is the positive class.
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn from_target(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub margin: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 0.5,
            lambda_d: 0.1,
            margin: 0.8,
            delta: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_center: f64,
    pub l_drift: f64,
    pub total: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub margin_m: f64,
    pub delta: f64,
}

/// Mean binary cross-entropy of clamped `p: [N]` against labels.
pub fn bce<T: Scalar>(tape: &mut Tape<T>, p: Var, labels: &[Label]) -> Result<Var> {
    let n = tape.shape(p).iter().product::<usize>();
    if n == 0 || labels.is_empty() {
        return Err(Error::Empty("bce"));
    }
    if n != labels.len() {
        return Err(shape_err("bce", format!("{n} probabilities for {} labels", labels.len())));
    }
    let p = tape.clamp(p, P_CLAMP, 1.0 - P_CLAMP)?;
    let log_p = tape.log(p)?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let log_q = tape.log(q)?;
    // -(y log p + (1 - y) log(1 - p)) with y held in constant masks.
    let y: Vec<T> = labels.iter().map(|l| T::lit(l.target())).collect();
    let not_y: Vec<T> = labels.iter().map(|l| T::lit(1.0 - l.target())).collect();
    let y = tape.constant([n], y)?;
    let not_y = tape.constant([n], not_y)?;
    let a = tape.mul(log_p, y)?;
    let b = tape.mul(log_q, not_y)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.affine(m, -1.0, 0.0)
}

fn indices(labels: &[Label], which: Label) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l == which).then_some(i))
        .collect()
}

fn zero<T: Scalar>(tape: &mut Tape<T>) -> Result<Var> {
    tape.constant([1], vec![T::zero()])
}

/// Pull for real rows, squared hinge push for fake rows; `c` is a constant.
pub fn center_loss<T: Scalar>(tape: &mut Tape<T>, z: Var, labels: &[Label], c: &[f64], margin: f64) -> Result<Var> {
    if !(margin > 0.0) {
        return Err(arg_err("center_loss", format!("margin {margin} must be positive")));
    }
    let zs = tape.shape(z).to_vec();
    if zs.len() != 2 || zs[0] != labels.len() || zs[1] != c.len() {
        return Err(shape_err(
            "center_loss",
            format!("z {zs:?} with {} labels and center of {}", labels.len(), c.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Empty("center_loss"));
    }
    let center = tape.constant([1, c.len()], c.iter().map(|&v| T::lit(v)).collect())?;
    let real = indices(labels, Label::Real);
    let fake = indices(labels, Label::Fake);

    let pull = if real.is_empty() {
        zero(tape)?
    } else {
        let zr = tape.select_rows(z, &real)?;
        let d = tape.sub_row(zr, center)?;
        let sq = tape.sq_norm_rows(d)?;
        tape.mean(sq)?
    };
    let push = if fake.is_empty() {
        zero(tape)?
    } else {
        let zf = tape.select_rows(z, &fake)?;
        let d = tape.sub_row(zf, center)?;
        let sq = tape.sq_norm_rows(d)?;
        let dist = tape.sqrt(sq)?;
        let gap = tape.affine(dist, -1.0, margin)?;
        let hinge = tape.relu(gap)?;
        let h2 = tape.square(hinge)?;
        tape.mean(h2)?
    };
    tape.add(pull, push)
}

/// `max(0, ||normalize(mu c + (1 - mu) z_mean) - c|| - delta)`, differentiable
/// through `z_mean: [1, D]`.
pub fn drift_loss<T: Scalar>(tape: &mut Tape<T>, z_mean: Var, c: &[f64], mu: f64, delta: f64) -> Result<Var> {
    if !(delta >= 0.0) {
        return Err(arg_err("drift_loss", format!("delta {delta} must be non-negative")));
    }
    if tape.shape(z_mean) != [1, c.len()] {
        return Err(shape_err(
            "drift_loss",
            format!("mean {:?} for center of {}", tape.shape(z_mean), c.len()),
        ));
    }
    let neg_mu_c = tape.constant([1, c.len()], c.iter().map(|&v| T::lit(-mu * v)).collect())?;
    let center = tape.constant([1, c.len()], c.iter().map(|&v| T::lit(v)).collect())?;
    let scaled = tape.affine(z_mean, 1.0 - mu, 0.0)?;
    let raw = tape.sub_row(scaled, neg_mu_c)?;
    let cand = tape.l2_normalize(raw)?;
    let d = tape.sub_row(cand, center)?;
    let sq = tape.sq_norm_rows(d)?;
    let dist = tape.sqrt(sq)?;
    let excess = tape.affine(dist, 1.0, -delta)?;
    let hinge = tape.relu(excess)?;
    tape.sum(hinge)
}

/// Composes the objective. Before the center is initialized only the
/// classification term is active.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    p_fake: Var,
    labels: &[Label],
    center: &RealCenter,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let l_cls = bce(tape, p_fake, labels)?;
    let (l_center, l_drift) = if center.is_initialized() {
        let lc = center_loss(tape, z, labels, &center.c, w.margin)?;
        let real = indices(labels, Label::Real);
        let ld = if real.is_empty() {
            zero(tape)?
        } else {
            let zr = tape.select_rows(z, &real)?;
            let mean = tape.mean_rows(zr)?;
            drift_loss(tape, mean, &center.c, center.mu, w.delta)?
        };
        (lc, ld)
    } else {
        (zero(tape)?, zero(tape)?)
    };
    let wc = tape.affine(l_center, w.lambda_c, 0.0)?;
    let wd = tape.affine(l_drift, w.lambda_d, 0.0)?;
    let t = tape.add(l_cls, wc)?;
    let total = tape.add(t, wd)?;
    let breakdown = LossBreakdown {
        l_cls: tape.scalar(l_cls).to_f64().unwrap(),
        l_center: tape.scalar(l_center).to_f64().unwrap(),
        l_drift: tape.scalar(l_drift).to_f64().unwrap(),
        total: tape.scalar(total).to_f64().unwrap(),
        lambda_c: w.lambda_c,
        lambda_d: w.lambda_d,
        margin_m: w.margin,
        delta: w.delta,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf(t: &mut Tape<f64>, shape: &[usize], v: &[f64]) -> Var {
        t.leaf(&Tensor::from_f64(shape.to_vec(), v).unwrap().with_grad())
    }

    #[test]
    fn bce_reference_points() {
        let mut t = Tape::new();
        let p = leaf(&mut t, &[1], &[0.5]);
        let l = bce(&mut t, p, &[Label::Fake]).unwrap();
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
        let p = leaf(&mut t, &[1], &[1.0]);
        let l = bce(&mut t, p, &[Label::Fake]).unwrap();
        assert!((t.scalar(l) - 1e-7).abs() < 1e-12);
        let p = leaf(&mut t, &[2], &[0.5, 0.5]);
        assert!(bce(&mut t, p, &[Label::Fake]).is_err());
    }

    #[test]
    fn center_loss_boundaries() {
        let c = [1.0, 0.0];
        let mut t = Tape::new();
        let z = leaf(&mut t, &[1, 2], &c);
        let l = center_loss(&mut t, z, &[Label::Real], &c, 0.8).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let l = center_loss(&mut t, z, &[Label::Fake], &c, 0.8).unwrap();
        assert!((t.scalar(l) - 0.64).abs() < 1e-15);
        let g = t.backward(l).unwrap();
        assert!(g.get_or_zeros(z, 2).iter().all(|v| *v == 0.0));
        // Fake exactly at the margin.
        let z = leaf(&mut t, &[1, 2], &[0.2, 0.0]);
        let l = center_loss(&mut t, z, &[Label::Fake], &c, 0.8).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        assert!(t.backward(l).unwrap().get_or_zeros(z, 2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn drift_reference_value() {
        let mut t = Tape::new();
        let zbar = leaf(&mut t, &[1, 2], &[0.0, 1.0]);
        let l = drift_loss(&mut t, zbar, &[1.0, 0.0], 0.99, 0.0).unwrap();
        let n = (0.99f64 * 0.99 + 0.01 * 0.01).sqrt();
        let expect = ((0.99 / n - 1.0f64).powi(2) + (0.01 / n).powi(2)).sqrt();
        assert!((t.scalar(l) - expect).abs() < 1e-15);
        assert!((t.scalar(l) - 0.010102).abs() < 2e-6);
        let l = drift_loss(&mut t, zbar, &[1.0, 0.0], 0.99, 0.02).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        assert!(t.backward(l).unwrap().get_or_zeros(zbar, 2).iter().all(|v| *v == 0.0));
    }
}
