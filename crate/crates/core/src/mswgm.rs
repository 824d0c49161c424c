//! Multi-scale wavelet-style guidance: Gaussian low/high band splits,
//! per-scale encoders, softmax scale attention, and the channel and spatial
//! guidance heads.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{arg_err, shape_err, Result};
use crate::nn::{Builder, Component, Conv2d, ConvShape, Linear, ParamStore, Session, WeightInit};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// `(low, high)` band pair for one scale.
#[derive(Clone, Copy, Debug)]
pub struct Bands {
    pub low: Var,
    pub high: Var,
}

/// Per-scale intermediates kept for inspection.
#[derive(Clone, Debug)]
pub struct ScaleBank {
    pub bands: Vec<Bands>,
    /// One `[N, d_f]` descriptor per scale.
    pub features: Vec<Var>,
    /// `[N, L]`, rows sum to one.
    pub alphas: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GuidanceSignals {
    /// Channel guidance vector `[N, d_g]`.
    pub channel: Var,
    /// Spatial guidance map `[N, 1, H', W']` with values in `(0, 1)`.
    pub spatial: Var,
}

/// Splits `x` into `L` band pairs: `low = blur(x, sigma_l)`, `high = x - low`.
pub fn decompose<T: Scalar>(tape: &mut Tape<T>, x: Var, sigmas: &[f64]) -> Result<Vec<Bands>> {
    if sigmas.is_empty() {
        return Err(arg_err("decompose", "at least one scale is required"));
    }
    sigmas
        .iter()
        .map(|&s| {
            let low = tape.gaussian_blur(x, s)?;
            let high = tape.sub(x, low)?;
            Ok(Bands { low, high })
        })
        .collect()
}

#[derive(Clone, Debug)]
struct ScaleEncoder {
    conv: Conv2d,
    depthwise: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Mswgm {
    sigmas: Vec<f64>,
    encoders: Vec<ScaleEncoder>,
    attention: Linear,
    channel_head: Linear,
    spatial_conv: Conv2d,
    spatial_out: Conv2d,
    input_size: usize,
    guidance_size: usize,
    d_f: usize,
}

impl Mswgm {
    pub fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let mut b = Builder::new(store, rng, Component::FrequencyBranch);
        let d_f = cfg.d_f;
        let shape = ConvShape::plain(2).with_bias(WeightInit::UniformFanIn);
        let encoders = (0..cfg.scales)
            .map(|l| ScaleEncoder {
                conv: b.conv(&format!("mswgm.encoder{l}.conv"), 6, d_f, 3, shape),
                depthwise: b.conv(&format!("mswgm.encoder{l}.depthwise"), d_f, d_f, 3, shape.groups(d_f)),
            })
            .collect();
        let attention = b.linear("mswgm.attention", cfg.scales * d_f, cfg.scales, WeightInit::UniformFanIn);
        let channel_head = b.linear("mswgm.channel_head", d_f, cfg.d_g, WeightInit::UniformFanIn);
        let spatial = ConvShape::plain(1).with_bias(WeightInit::UniformFanIn);
        let spatial_conv = b.conv("mswgm.spatial.conv", 3, 4, 3, spatial);
        let spatial_out = b.conv("mswgm.spatial.out", 4, 1, 3, spatial);
        Self {
            sigmas: cfg.sigmas.clone(),
            encoders,
            attention,
            channel_head,
            spatial_conv,
            spatial_out,
            input_size: cfg.input_size,
            guidance_size: cfg.guidance_size(),
            d_f,
        }
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn feature_dim(&self) -> usize {
        self.d_f
    }

    /// `phi_l([low; high])`: strided conv, hardswish, strided depthwise conv,
    /// global average pool. Returns `[N, d_f]`.
    pub fn encode_scale<T: Scalar>(&self, s: &mut Session<T>, scale: usize, bands: Bands) -> Result<Var> {
        let enc = self
            .encoders
            .get(scale)
            .ok_or_else(|| arg_err("encode_scale", format!("scale {scale} of {}", self.encoders.len())))?;
        let x = s.tape.concat(&[bands.low, bands.high])?;
        let h = enc.conv.forward(s, x)?;
        let h = s.tape.hardswish(h)?;
        let h = enc.depthwise.forward(s, h)?;
        s.tape.global_avg_pool(h)
    }

    /// Softmax attention over the concatenated scale descriptors.
    pub fn scale_attention<T: Scalar>(&self, s: &mut Session<T>, features: &[Var]) -> Result<Var> {
        if features.len() != self.sigmas.len() {
            return Err(shape_err(
                "scale_attention",
                format!("{} descriptors for {} scales", features.len(), self.sigmas.len()),
            ));
        }
        let cat = s.tape.concat(features)?;
        let logits = self.attention.forward(s, cat)?;
        s.tape.softmax(logits)
    }

    /// Full guidance pass on a normalized `[N, 3, S, S]` batch.
    pub fn guidance<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<(GuidanceSignals, ScaleBank)> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.input_size || shape[3] != self.input_size {
            return Err(shape_err(
                "mswgm",
                format!("expected [N, 3, {0}, {0}], got {shape:?}", self.input_size),
            ));
        }
        let bands = decompose(s.tape, x, &self.sigmas)?;
        let features = bands
            .iter()
            .enumerate()
            .map(|(l, &b)| self.encode_scale(s, l, b))
            .collect::<Result<Vec<_>>>()?;
        let alphas = self.scale_attention(s, &features)?;

        let mut fused: Option<Var> = None;
        let mut high: Option<Var> = None;
        for (l, (&f, b)) in features.iter().zip(&bands).enumerate() {
            let a = s.tape.column(alphas, l)?;
            let fw = s.tape.scale_sample(f, a)?;
            let hw = s.tape.scale_sample(b.high, a)?;
            fused = Some(match fused {
                Some(acc) => s.tape.add(acc, fw)?,
                None => fw,
            });
            high = Some(match high {
                Some(acc) => s.tape.add(acc, hw)?,
                None => hw,
            });
        }
        let (fused, high) = (fused.expect("L >= 1"), high.expect("L >= 1"));
        let channel = self.channel_head.forward(s, fused)?;

        let h = self.spatial_conv.forward(s, high)?;
        let h = s.tape.hardswish(h)?;
        let h = self.spatial_out.forward(s, h)?;
        let h = s.tape.avg_pool(h, self.input_size / self.guidance_size)?;
        let spatial = s.tape.sigmoid(h)?;
        Ok((
            GuidanceSignals { channel, spatial },
            ScaleBank {
                bands,
                features,
                alphas,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn image(seed: u64, n: usize, size: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * 3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_f64([n, 3, size, size], &data).unwrap()
    }

    #[test]
    fn bands_reconstruct_input_exactly() {
        let x = image(1, 2, 16);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        for b in decompose(&mut tape, xv, &[1.0, 2.0, 4.0]).unwrap() {
            let sum = tape.add(b.low, b.high).unwrap();
            for (a, e) in tape.value(sum).iter().zip(x.data()) {
                assert!((a - e).abs() <= 1e-12);
            }
        }
        assert!(decompose(&mut tape, xv, &[]).is_err());
        assert!(decompose(&mut tape, xv, &[1.0, -2.0]).is_err());
    }

    #[test]
    fn constant_image_has_no_high_band() {
        let mut tape = Tape::new();
        let xv = tape.leaf(&Tensor::<f64>::full([1, 3, 12, 12], 0.4));
        for b in decompose(&mut tape, xv, &[1.0, 4.0]).unwrap() {
            assert!(tape.value(b.high).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn guidance_shapes_and_ranges() {
        let cfg = ModelConfig::micro();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mswgm::new(&cfg, &mut store, &mut rng);
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, false, false);
        let xv = s.tape.leaf(&image(2, 3, 32));
        let (g, bank) = m.guidance(&mut s, xv).unwrap();
        assert_eq!(s.tape.shape(g.channel), [3, cfg.d_g]);
        assert_eq!(s.tape.shape(g.spatial), [3, 1, 4, 4]);
        assert!(s.tape.value(g.spatial).iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(s.tape.shape(bank.alphas), [3, 3]);
        for row in s.tape.value(bank.alphas).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&a| a >= 0.0));
        }
        for f in &bank.features {
            assert_eq!(s.tape.shape(*f), [3, cfg.d_f]);
        }
        let bad = s.tape.leaf(&image(3, 1, 16));
        assert!(m.guidance(&mut s, bad).is_err());
    }
}
