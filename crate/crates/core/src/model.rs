//! The assembled detector: guidance, conditioned backbone, projection,
//! classifier, and the real center.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, GateOverride, Gating};
use crate::config::ModelConfig;
use crate::embedding::{Classifier, ProjectionHead, RealCenter};
use crate::error::{shape_err, Result};
use crate::losses::LossWeights;
use crate::mswgm::{GuidanceSignals, Mswgm, ScaleBank};
use crate::nn::{ParamStore, Session};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[N, last]` pooled backbone feature.
    pub f_s: Var,
    /// `[N, d_e]` unit embeddings.
    pub z: Var,
    /// `[N, 2]`.
    pub logits: Var,
    /// `[N]`.
    pub p_fake: Var,
    pub guidance: Option<(GuidanceSignals, ScaleBank)>,
}

/// Detached per-image results of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub p_fake: f64,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LrdNet<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub mswgm: Mswgm,
    pub backbone: Backbone,
    pub projection: ProjectionHead,
    pub classifier: Classifier,
    pub center: RealCenter,
    /// Forced gate values applied in guided mode.
    pub overrides: GateOverride,
}

impl<T: Scalar> LrdNet<T> {
    /// Builds a freshly initialized model; weights depend only on `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let mswgm = Mswgm::new(cfg, &mut store, &mut rng);
        let backbone = Backbone::new(cfg, &mut store, &mut rng)?;
        let projection = ProjectionHead::new(&mut store, &mut rng, backbone.feature_dim(), cfg.proj_hidden, cfg.d_e);
        let classifier = Classifier::new(&mut store, &mut rng, cfg.d_e);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            mswgm,
            backbone,
            projection,
            classifier,
            center: RealCenter::new(cfg.d_e, cfg.mu)?,
            overrides: GateOverride::default(),
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_c: self.cfg.lambda_c,
            lambda_d: self.cfg.lambda_d,
            margin: self.cfg.margin,
            delta: self.cfg.delta,
        }
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> LrdNet<U> {
        LrdNet {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            mswgm: self.mswgm.clone(),
            backbone: self.backbone.clone(),
            projection: self.projection.clone(),
            classifier: self.classifier.clone(),
            center: self.center.clone(),
            overrides: self.overrides,
        }
    }

    /// Full forward on raw pixels in `[0, 1]`, shape `[N, 3, S, S]`.
    pub fn forward(&self, s: &mut Session<T>, pixels: Var) -> Result<ForwardOutput> {
        let x = s.tape.affine(pixels, 2.0, -1.0)?;
        let guidance = if self.cfg.guidance {
            Some(self.mswgm.guidance(s, x)?)
        } else {
            None
        };
        let gating = match &guidance {
            Some((signals, _)) => Gating::Guided {
                signals,
                overrides: self.overrides,
            },
            None => Gating::Off,
        };
        let f_s = self.backbone.forward(s, x, gating)?;
        let z = self.projection.project(s, f_s)?;
        let c = self.classifier.classify(s, z)?;
        Ok(ForwardOutput {
            f_s,
            z,
            logits: c.logits,
            p_fake: c.p_fake,
            guidance,
        })
    }

    /// Stacks `[3, S, S]` images into one `[N, 3, S, S]` leaf.
    pub fn batch_leaf(&self, tape: &mut Tape<T>, images: &[&Tensor<f32>]) -> Result<Var> {
        let s = self.cfg.input_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.shape() != [3, s, s] {
                return Err(shape_err("batch", format!("image {:?}, model expects [3, {s}, {s}]", img.shape())));
            }
            data.extend(img.data().iter().map(|&v| T::lit(v as f64)));
        }
        tape.constant([images.len(), 3, s, s], data)
    }

    /// Eval-mode inference without gradient tracking.
    pub fn predict(&self, images: &[&Tensor<f32>]) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &self.store, false, false);
        let x = self.batch_leaf(s.tape, images)?;
        let out = self.forward(&mut s, x)?;
        let d = self.cfg.d_e;
        let z = s.tape.value(out.z);
        Ok(s
            .tape
            .value(out.p_fake)
            .iter()
            .enumerate()
            .map(|(i, p)| Prediction {
                p_fake: p.to_f64().unwrap(),
                z: z[i * d..(i + 1) * d].iter().map(|v| v.to_f64().unwrap()).collect(),
            })
            .collect())
    }
}
