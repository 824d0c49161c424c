//! Procedural stand-ins for authentic images and three forgery families.
//!
//! Reals are smooth: a few anisotropic Gaussian blobs over a shaded
//! background plus faint 1/f noise. Each fake family adds high-frequency
//! structure in a different way, so a detector trained on one family has a
//! shared cue to transfer to the others.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::config::parse_pairs;
use crate::dataset::{Family, LabeledImage};
use crate::error::{arg_err, Error, Result};
use crate::kernels;
use crate::losses::Label;
use crate::tensor::Tensor;

pub const MIN_SIZE: usize = 32;

/// Std of the 1/f noise added to reals.
const NOISE_STD: f64 = 0.02;

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// In-place 2-D FFT of a row-major `h x w` grid.
pub fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}

/// Zero-mean, unit-std noise with amplitude spectrum proportional to 1/f.
fn pink_noise(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let mut spectrum: Vec<Complex<f64>> = (0..size * size)
        .map(|_| Complex::new(StandardNormal.sample(rng), StandardNormal.sample(rng)))
        .collect();
    for ky in 0..size {
        for kx in 0..size {
            let fy = ky.min(size - ky) as f64;
            let fx = kx.min(size - kx) as f64;
            let f = (fx * fx + fy * fy).sqrt();
            spectrum[ky * size + kx] *= if f == 0.0 { 0.0 } else { 1.0 / f };
        }
    }
    fft2(&mut spectrum, size, size, true);
    let re: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    let mean = re.iter().sum::<f64>() / re.len() as f64;
    let std = (re.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / re.len() as f64).sqrt();
    re.iter().map(|v| (v - mean) / std.max(1e-12)).collect()
}

fn to_image(planes: Vec<f64>, size: usize, label: Label, family: Option<Family>) -> LabeledImage {
    let data = planes.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    LabeledImage {
        pixels: Tensor::new([3, size, size], data).expect("3 planes"),
        label,
        family,
    }
}

/// A smooth structured image.
pub fn gen_real(seed: u64, size: usize) -> Result<LabeledImage> {
    if size < MIN_SIZE {
        return Err(arg_err("gen_real", format!("size {size} is below {MIN_SIZE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut planes = vec![0.0; 3 * size * size];
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
    let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    for (ch, b) in base.iter().enumerate() {
        let tint = rng.random_range(0.7..1.0);
        for y in 0..size {
            for x in 0..size {
                let u = x as f64 / s - 0.5;
                let v = y as f64 / s - 0.5;
                planes[(ch * size + y) * size + x] = b + tint * (gx * u + gy * v);
            }
        }
    }
    let blobs = rng.random_range(3..=6);
    for _ in 0..blobs {
        let cx = rng.random_range(0.15..0.85) * s;
        let cy = rng.random_range(0.15..0.85) * s;
        let sx = rng.random_range(0.08..0.3) * s;
        let sy = rng.random_range(0.08..0.3) * s;
        let theta = rng.random_range(0.0..PI);
        let common = rng.random_range(-0.2..0.2);
        let amp: [f64; 3] = std::array::from_fn(|_| common + rng.random_range(-0.15..0.15));
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = (ct * dx + st * dy) / sx;
                let v = (-st * dx + ct * dy) / sy;
                let g = (-0.5 * (u * u + v * v)).exp();
                for (ch, a) in amp.iter().enumerate() {
                    planes[(ch * size + y) * size + x] += a * g;
                }
            }
        }
    }
    for ch in 0..3 {
        let noise = pink_noise(&mut rng, size);
        for (p, n) in planes[ch * size * size..(ch + 1) * size * size].iter_mut().zip(noise) {
            *p += NOISE_STD * n;
        }
    }
    Ok(to_image(planes, size, Label::Real, None))
}

/// Where a fake generator put its artifact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactInfo {
    /// `(x0, y0, width, height)` of an edited patch.
    pub patch: Option<(usize, usize, usize, usize)>,
    /// Injected `(kx, ky)` frequency bins.
    pub frequencies: Vec<(usize, usize)>,
}

fn blur_planes(planes: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let k = kernels::gaussian_kernel(sigma);
    kernels::blur_forward(planes, 3, size, size, &k)
}

/// Applies one forgery family to a real image.
pub fn gen_fake(base: &LabeledImage, family: Family, seed: u64) -> Result<(LabeledImage, ArtifactInfo)> {
    if base.label != Label::Real {
        return Err(arg_err("gen_fake", "base image must be real"));
    }
    let size = base.size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planes: Vec<f64> = base.pixels.data().iter().map(|&v| v as f64).collect();
    let mut info = ArtifactInfo::default();
    match family {
        Family::FeProxy => {
            let p = rng.random_range(size / 5..=size / 3);
            let x0 = rng.random_range(0..=size - p);
            let y0 = rng.random_range(0..=size - p);
            let mut texture: Vec<f64> = (0..3 * size * size).map(|_| StandardNormal.sample(&mut rng)).collect();
            texture = blur_planes(&texture, size, 0.6);
            let amp = rng.random_range(0.12..0.2);
            let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
            for ch in 0..3 {
                let plane = &mut planes[ch * size * size..(ch + 1) * size * size];
                let mean = (y0..y0 + p)
                    .flat_map(|y| (x0..x0 + p).map(move |x| (y, x)))
                    .map(|(y, x)| plane[y * size + x])
                    .sum::<f64>()
                    / (p * p) as f64;
                for y in y0..y0 + p {
                    for x in x0..x0 + p {
                        let t = texture[(ch * size + y) * size + x];
                        plane[y * size + x] = mean + shift[ch] + amp * 2.0 * t;
                    }
                }
            }
            info.patch = Some((x0, y0, p, p));
        }
        Family::I2iProxy => {
            let sigma = rng.random_range(0.6..1.0);
            let amount = rng.random_range(1.5..2.5);
            let (ox, oy) = (rng.random_range(0..2usize), rng.random_range(0..2usize));
            let low = blur_planes(&planes, size, sigma);
            let mut resampled = vec![0.0; planes.len()];
            for ch in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let sy = ((y / 2) * 2 + oy).min(size - 1);
                        let sx = ((x / 2) * 2 + ox).min(size - 1);
                        resampled[(ch * size + y) * size + x] = low[(ch * size + sy) * size + sx];
                    }
                }
            }
            let grain = rng.random_range(0.01..0.02);
            for r in resampled.iter_mut() {
                *r += grain * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            }
            let soft = blur_planes(&resampled, size, 1.0);
            for ((p, r), s) in planes.iter_mut().zip(&resampled).zip(&soft) {
                *p = r + amount * (r - s);
            }
        }
        Family::T2iProxy => {
            let lo = size / 4;
            let hi = size / 2 - 1;
            let first = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            let second = loop {
                let f = (rng.random_range(lo..=hi), rng.random_range(0..=hi));
                if f != first {
                    break f;
                }
            };
            for &(kx, ky) in &[first, second] {
                let amp = rng.random_range(0.03..0.05);
                let phase = rng.random_range(0.0..2.0 * PI);
                let weights: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));
                for y in 0..size {
                    for x in 0..size {
                        let arg = 2.0 * PI * (kx as f64 * x as f64 + ky as f64 * y as f64) / size as f64 + phase;
                        let v = amp * arg.cos();
                        for (ch, w) in weights.iter().enumerate() {
                            planes[(ch * size + y) * size + x] += w * v;
                        }
                    }
                }
            }
            info.frequencies = vec![first, second];
        }
    }
    Ok((to_image(planes, size, Label::Fake, Some(family)), info))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub seed: u64,
    pub n_real: usize,
    pub n_fake_per_family: usize,
    pub families: Vec<Family>,
    pub image_size: usize,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_real: 400,
            n_fake_per_family: 400,
            families: Family::ALL.to_vec(),
            image_size: 64,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |key: &str, reason: String| Error::Config {
            key: key.into(),
            reason,
        };
        if self.n_real == 0 && (self.n_fake_per_family == 0 || self.families.is_empty()) {
            return Err(cfg_err("n_real", "both classes are empty".into()));
        }
        if self.image_size < MIN_SIZE {
            return Err(cfg_err("image_size", format!("{} is below {MIN_SIZE}", self.image_size)));
        }
        Ok(())
    }

    /// Key=value or JSON text with keys `seed`, `n_real`,
    /// `n_fake_per_family`, `families` (comma list) and `image_size`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut ds = Self::default();
        for (k, v) in parse_pairs(text)? {
            let v = v.trim().trim_matches('"');
            let num = |v: &str| {
                v.parse::<u64>().map_err(|e| Error::Config {
                    key: k.clone(),
                    reason: format!("cannot parse `{v}`: {e}"),
                })
            };
            match k.as_str() {
                "seed" => ds.seed = num(v)?,
                "n_real" => ds.n_real = num(v)? as usize,
                "n_fake_per_family" => ds.n_fake_per_family = num(v)? as usize,
                "image_size" => ds.image_size = num(v)? as usize,
                "families" => {
                    ds.families = v
                        .split(',')
                        .map(|f| f.trim().trim_matches('"'))
                        .filter(|f| !f.is_empty())
                        .map(|f| f.parse::<Family>())
                        .collect::<Result<_>>()
                        .map_err(|e| Error::Config {
                            key: k.clone(),
                            reason: e.to_string(),
                        })?
                }
                _ => {
                    return Err(Error::Config {
                        key: k,
                        reason: "unknown key".into(),
                    })
                }
            }
        }
        ds.validate()?;
        Ok(ds)
    }
}

/// Reals first, then each family's fakes in the listed order.
pub fn generate(ds: &SyntheticDatasetSpec) -> Result<Vec<LabeledImage>> {
    ds.validate()?;
    let mut out = Vec::with_capacity(ds.n_real + ds.n_fake_per_family * ds.families.len());
    for i in 0..ds.n_real {
        out.push(gen_real(derive_seed(ds.seed, 0, i as u64), ds.image_size)?);
    }
    for &family in &ds.families {
        let stream = 1 + family as u64;
        for j in 0..ds.n_fake_per_family {
            let base = gen_real(derive_seed(ds.seed, stream, j as u64), ds.image_size)?;
            let (fake, _) = gen_fake(&base, family, derive_seed(ds.seed, 10 + stream, j as u64))?;
            out.push(fake);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn real_is_deterministic_and_in_range() {
        let a = gen_real(7, 32).unwrap();
        let b = gen_real(7, 32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_real(8, 32).unwrap());
        assert!(a.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(gen_real(1, 16).is_err());
    }

    #[test]
    fn key_value_parsing() {
        let s = SyntheticDatasetSpec::parse("seed = 3\nn_real = 10\nn_fake_per_family = 5\nfamilies = i2i,t2i\nimage_size = 32\n")
            .unwrap();
        assert_eq!(s.families, vec![Family::I2iProxy, Family::T2iProxy]);
        assert_eq!(generate(&s).unwrap().len(), 20);
        assert!(SyntheticDatasetSpec::parse("families = gan\n").is_err());
        assert!(SyntheticDatasetSpec::parse("colour = red\n").is_err());
    }
}
