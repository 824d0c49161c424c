//! MobileNetV3-Small style spatial backbone with two guidance conditioning
//! points.

use rand_chacha::ChaCha8Rng;

use crate::config::{Mode, ModelConfig};
use crate::error::{arg_err, shape_err, Result};
use crate::mswgm::GuidanceSignals;
use crate::nn::{
    Activation, BatchNorm2d, Builder, Component, Conv2d, ConvShape, Linear, ParamStore, Session, WeightInit,
};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// One inverted-residual block of the stage table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDef {
    pub kernel: usize,
    pub expand: usize,
    pub out: usize,
    pub se: bool,
    pub act: Activation,
    pub stride: usize,
}

const fn block(kernel: usize, expand: usize, out: usize, se: bool, act: Activation, stride: usize) -> BlockDef {
    BlockDef {
        kernel,
        expand,
        out,
        se,
        act,
        stride,
    }
}

/// A point after which the feature map is modulated by guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConditioningPoint {
    /// Index of the block whose output is conditioned.
    pub after_block: usize,
    pub channels: usize,
    /// Expected spatial side as a divisor of the input side.
    pub divisor: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stem: usize,
    pub blocks: Vec<BlockDef>,
    pub last: usize,
    pub conditioning: Vec<ConditioningPoint>,
    /// `(hidden, classes)` of the ImageNet classifier kept for weight
    /// compatibility; not used on the detection path.
    pub imagenet_head: Option<(usize, usize)>,
}

use Activation::{Hardswish as HS, Relu as RE};

impl BackboneConfig {
    pub fn mobilenet_v3_small() -> Self {
        Self {
            stem: 16,
            blocks: vec![
                block(3, 16, 16, true, RE, 2),
                block(3, 72, 24, false, RE, 2),
                block(3, 88, 24, false, RE, 1),
                block(5, 96, 40, true, HS, 2),
                block(5, 240, 40, true, HS, 1),
                block(5, 240, 40, true, HS, 1),
                block(5, 120, 48, true, HS, 1),
                block(5, 144, 48, true, HS, 1),
                block(5, 288, 96, true, HS, 2),
                block(5, 576, 96, true, HS, 1),
                block(5, 576, 96, true, HS, 1),
            ],
            last: 576,
            conditioning: vec![
                ConditioningPoint {
                    after_block: 2,
                    channels: 24,
                    divisor: 8,
                },
                ConditioningPoint {
                    after_block: 7,
                    channels: 48,
                    divisor: 16,
                },
            ],
            imagenet_head: Some((1024, 1000)),
        }
    }

    pub fn micro() -> Self {
        Self {
            stem: 8,
            blocks: vec![
                block(3, 8, 8, true, RE, 2),
                block(3, 24, 12, false, RE, 2),
                block(3, 32, 16, true, HS, 2),
                block(3, 48, 16, true, HS, 1),
            ],
            last: 64,
            conditioning: vec![
                ConditioningPoint {
                    after_block: 1,
                    channels: 12,
                    divisor: 8,
                },
                ConditioningPoint {
                    after_block: 3,
                    channels: 16,
                    divisor: 16,
                },
            ],
            imagenet_head: None,
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Full => Self::mobilenet_v3_small(),
            Mode::Micro => Self::micro(),
        }
    }

    /// Checks that the table produces the declared conditioning channels and
    /// resolutions.
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "backbone_config";
        if self.conditioning.len() != 2 {
            return Err(arg_err(
                OP,
                format!("exactly two conditioning points required, got {}", self.conditioning.len()),
            ));
        }
        let mut divisor = 2;
        let mut reached = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if b.stride == 0 || b.kernel % 2 == 0 || b.expand == 0 || b.out == 0 {
                return Err(arg_err(OP, format!("block {i} is malformed: {b:?}")));
            }
            divisor *= b.stride;
            reached.push((b.out, divisor));
        }
        for p in &self.conditioning {
            match reached.get(p.after_block) {
                Some(&(ch, div)) if ch == p.channels && div == p.divisor => {}
                Some(&(ch, div)) => {
                    return Err(shape_err(
                        OP,
                        format!(
                            "conditioning after block {} declares {} ch at 1/{}, table gives {ch} ch at 1/{div}",
                            p.after_block, p.channels, p.divisor
                        ),
                    ))
                }
                None => return Err(arg_err(OP, format!("no block {}", p.after_block))),
            }
        }
        if self.conditioning[0].after_block >= self.conditioning[1].after_block {
            return Err(arg_err(OP, "conditioning points must be in block order"));
        }
        Ok(())
    }
}

/// torchvision's `_make_divisible`.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = ((v + d / 2.0) / d).floor() as usize * divisor;
    new_v = new_v.max(divisor);
    if (new_v as f64) < 0.9 * v {
        new_v += divisor;
    }
    new_v
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new<T: Scalar>(b: &mut Builder<T>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, groups: usize) -> Self {
        Self {
            conv: b.conv(&format!("{name}.0"), c_in, c_out, k, ConvShape::plain(stride).groups(groups)),
            bn: b.batchnorm(&format!("{name}.1"), c_out),
        }
    }

    fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        self.bn.forward(s, y)
    }
}

#[derive(Clone, Debug)]
struct SqueezeExcite {
    fc1: Linear,
    fc2: Linear,
}

impl SqueezeExcite {
    fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let p = s.tape.global_avg_pool(x)?;
        let h = self.fc1.forward(s, p)?;
        let h = s.tape.relu(h)?;
        let h = self.fc2.forward(s, h)?;
        let g = s.tape.hardsigmoid(h)?;
        s.tape.mul_channel(x, g)
    }
}

#[derive(Clone, Debug)]
struct InvertedResidual {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se: Option<SqueezeExcite>,
    project: ConvBn,
    act: Activation,
    residual: bool,
}

impl InvertedResidual {
    fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(e) = &self.expand {
            h = e.forward(s, h)?;
            h = self.act.apply(s.tape, h)?;
        }
        h = self.depthwise.forward(s, h)?;
        h = self.act.apply(s.tape, h)?;
        if let Some(se) = &self.se {
            h = se.forward(s, h)?;
        }
        h = self.project.forward(s, h)?;
        if self.residual {
            h = s.tape.add(h, x)?;
        }
        Ok(h)
    }
}

/// Per-point projection `W_c` from the channel guidance vector to gate
/// logits.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub proj: Linear,
    pub point: ConditioningPoint,
}

/// Replaces computed gates with fixed values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateOverride {
    /// Channel gate logit used in place of `W_c g_c + b`; `+inf` gives a gate
    /// of exactly one.
    pub channel_logit: Option<f64>,
    /// Constant used in place of the spatial map.
    pub spatial: Option<f64>,
}

impl GateOverride {
    pub const IDENTITY: Self = Self {
        channel_logit: Some(f64::INFINITY),
        spatial: Some(1.0),
    };
}

/// How the backbone is modulated.
#[derive(Clone, Copy, Debug)]
pub enum Gating<'a> {
    /// No conditioning at all.
    Off,
    Guided {
        signals: &'a GuidanceSignals,
        overrides: GateOverride,
    },
}

/// `F * sigmoid(logits)[n, c] * resize(G_s)[n, h, w]`.
pub fn apply_gates<T: Scalar>(tape: &mut Tape<T>, f: Var, channel_logits: Var, spatial: Var) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    if fs.len() != 4 {
        return Err(shape_err("condition", format!("feature map {fs:?} is not [N, C, H, W]")));
    }
    let gate = tape.sigmoid(channel_logits)?;
    let gated = tape.mul_channel(f, gate)?;
    let map = tape.bilinear_resize(spatial, fs[2], fs[3])?;
    tape.mul_spatial(gated, map)
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    input_size: usize,
    stem: ConvBn,
    blocks: Vec<InvertedResidual>,
    last: ConvBn,
    conditioners: Vec<Conditioner>,
    imagenet_head: Option<(Linear, Linear)>,
}

impl Backbone {
    pub fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::with_table(BackboneConfig::for_mode(cfg.mode), cfg, store, rng)
    }

    pub fn with_table<T: Scalar>(
        table: BackboneConfig,
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        table.validate()?;
        let mut b = Builder::new(store, rng, Component::SpatialBackbone);
        let stem = ConvBn::new(&mut b, "backbone.features.0", 3, table.stem, 3, 2, 1);
        let mut c_in = table.stem;
        let mut blocks = Vec::with_capacity(table.blocks.len());
        for (i, blk) in table.blocks.iter().enumerate() {
            let name = format!("backbone.features.{}.block", i + 1);
            let mut idx = 0;
            let mut next = || {
                let n = format!("{name}.{idx}");
                idx += 1;
                n
            };
            let expand = (blk.expand != c_in).then(|| ConvBn::new(&mut b, &next(), c_in, blk.expand, 1, 1, 1));
            let depthwise = ConvBn::new(&mut b, &next(), blk.expand, blk.expand, blk.kernel, blk.stride, blk.expand);
            let se = blk.se.then(|| {
                let n = next();
                let squeeze = make_divisible(blk.expand as f64 / 4.0, 8);
                SqueezeExcite {
                    fc1: b.linear(&format!("{n}.fc1"), blk.expand, squeeze, WeightInit::UniformFanIn),
                    fc2: b.linear(&format!("{n}.fc2"), squeeze, blk.expand, WeightInit::UniformFanIn),
                }
            });
            let project = ConvBn::new(&mut b, &next(), blk.expand, blk.out, 1, 1, 1);
            blocks.push(InvertedResidual {
                expand,
                depthwise,
                se,
                project,
                act: blk.act,
                residual: blk.stride == 1 && c_in == blk.out,
            });
            c_in = blk.out;
        }
        let last = ConvBn::new(
            &mut b,
            &format!("backbone.features.{}", table.blocks.len() + 1),
            c_in,
            table.last,
            1,
            1,
            1,
        );
        let imagenet_head = table.imagenet_head.map(|(hidden, classes)| {
            (
                b.linear("backbone.classifier.0", table.last, hidden, WeightInit::Normal(0.01)),
                b.linear("backbone.classifier.3", hidden, classes, WeightInit::Normal(0.01)),
            )
        });
        // W_c exists only to carry frequency guidance, so it is billed there.
        b.component = Component::FrequencyBranch;
        let conditioners = table
            .conditioning
            .iter()
            .enumerate()
            .map(|(i, &point)| Conditioner {
                proj: b.linear(&format!("condition{}.proj", i + 1), cfg.d_g, point.channels, WeightInit::UniformFanIn),
                point,
            })
            .collect();
        Ok(Self {
            cfg: table,
            input_size: cfg.input_size,
            stem,
            blocks,
            last,
            conditioners,
            imagenet_head,
        })
    }

    pub fn table(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Width of the pooled spatial feature `f_s`.
    pub fn feature_dim(&self) -> usize {
        self.cfg.last
    }

    pub fn conditioners(&self) -> &[Conditioner] {
        &self.conditioners
    }

    /// Modulates a conditioning-point feature map.
    pub fn condition<T: Scalar>(
        &self,
        s: &mut Session<T>,
        point: usize,
        f: Var,
        signals: &GuidanceSignals,
        overrides: GateOverride,
    ) -> Result<Var> {
        let cond = self
            .conditioners
            .get(point)
            .ok_or_else(|| arg_err("condition", format!("no conditioning point {point}")))?;
        let fs = s.tape.shape(f).to_vec();
        let n = fs[0];
        let c = cond.point.channels;
        let logits = match overrides.channel_logit {
            Some(v) => s.tape.constant([n, c], vec![T::lit(v); n * c])?,
            None => {
                let gs = s.tape.shape(signals.channel).to_vec();
                let wv = s.param(cond.proj.weight);
                let w = s.tape.shape(wv).to_vec();
                if gs.len() != 2 || gs[1] != w[1] {
                    return Err(shape_err(
                        "condition",
                        format!("g_c {gs:?} does not match W_c{} input width {}", point + 1, w[1]),
                    ));
                }
                cond.proj.forward(s, signals.channel)?
            }
        };
        let spatial = match overrides.spatial {
            Some(v) => {
                let ss = s.tape.shape(signals.spatial).to_vec();
                s.tape.constant(ss.clone(), vec![T::lit(v); ss.iter().product()])?
            }
            None => signals.spatial,
        };
        apply_gates(s.tape, f, logits, spatial)
    }

    /// Returns the pooled `[N, last]` spatial feature `f_s`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var, gating: Gating) -> Result<Var> {
        let xs = s.tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != 3 || xs[2] != self.input_size || xs[3] != self.input_size {
            return Err(shape_err(
                "backbone",
                format!("expected [N, 3, {0}, {0}], got {xs:?}", self.input_size),
            ));
        }
        let mut h = self.stem.forward(s, x)?;
        h = s.tape.hardswish(h)?;
        for (i, blk) in self.blocks.iter().enumerate() {
            h = blk.forward(s, h)?;
            if let Some(p) = self.conditioners.iter().position(|c| c.point.after_block == i) {
                let point = self.conditioners[p].point;
                let hs = s.tape.shape(h);
                let side = self.input_size / point.divisor;
                if hs[1] != point.channels || hs[2] != side || hs[3] != side {
                    return Err(shape_err(
                        "backbone",
                        format!(
                            "conditioning point {} expects [N, {}, {side}, {side}], got {hs:?}",
                            p + 1,
                            point.channels
                        ),
                    ));
                }
                if let Gating::Guided { signals, overrides } = gating {
                    h = self.condition(s, p, h, signals, overrides)?;
                }
            }
        }
        h = self.last.forward(s, h)?;
        h = s.tape.hardswish(h)?;
        s.tape.global_avg_pool(h)
    }

    /// ImageNet logits from `f_s`, for checkpoints that carry the head.
    pub fn imagenet_logits<T: Scalar>(&self, s: &mut Session<T>, f_s: Var) -> Result<Var> {
        let (fc1, fc2) = self
            .imagenet_head
            .as_ref()
            .ok_or_else(|| arg_err("imagenet_logits", "this backbone has no ImageNet head"))?;
        let h = fc1.forward(s, f_s)?;
        let h = s.tape.hardswish(h)?;
        fc2.forward(s, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_divisible_matches_torchvision() {
        let squeezes: Vec<usize> = [16, 96, 240, 240, 120, 144, 288, 576, 576]
            .iter()
            .map(|&e| make_divisible(e as f64 / 4.0, 8))
            .collect();
        assert_eq!(squeezes, [8, 24, 64, 64, 32, 40, 72, 144, 144]);
    }

    #[test]
    fn tables_validate() {
        BackboneConfig::mobilenet_v3_small().validate().unwrap();
        BackboneConfig::micro().validate().unwrap();
        let mut t = BackboneConfig::micro();
        t.conditioning.pop();
        assert!(t.validate().is_err());
        let mut t = BackboneConfig::mobilenet_v3_small();
        t.conditioning[0].channels = 40;
        assert!(t.validate().is_err());
    }
}
