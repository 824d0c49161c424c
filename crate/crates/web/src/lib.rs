//! Browser bindings: synthetic images, the frequency band view of the
//! guidance module, and EMA prototype drift curves.

use lrdnet::embedding::RealCenter;
use lrdnet::mswgm::decompose;
use lrdnet::nn::Session;
use lrdnet::synth::{derive_seed, gen_fake, gen_real};
use lrdnet::{Family, LabeledImage, LrdNet, ModelConfig, Result, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

/// `kind` is `real` or a fake family name (`fe`, `i2i`, `t2i`).
pub fn make_image(seed: u64, kind: &str, size: usize) -> Result<LabeledImage> {
    let real = gen_real(derive_seed(seed, 0, 0), size)?;
    if kind == "real" {
        return Ok(real);
    }
    let family: Family = kind.parse()?;
    Ok(gen_fake(&real, family, derive_seed(seed, 1, 0))?.0)
}

/// Interleaves a `[3, H, W]` plane set in `[0, 1]` into RGBA bytes.
pub fn to_rgba(chw: &[f64], size: usize) -> Vec<u8> {
    let n = size * size;
    let mut out = Vec::with_capacity(4 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push((chw[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// Gray RGBA from one plane, scaled so the largest value is white.
pub fn gray_rgba(plane: &[f64]) -> Vec<u8> {
    let peak = plane.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    plane
        .iter()
        .flat_map(|v| {
            let g = (v.abs() * scale).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

pub struct Bands {
    pub size: usize,
    /// Per scale, mean absolute high band over channels, `size * size`.
    pub high: Vec<Vec<f64>>,
    /// Scale attention weights for this image.
    pub alphas: Vec<f64>,
    pub spatial: Vec<f64>,
    pub spatial_size: usize,
}

/// Runs the guidance module of a freshly initialized micro model.
pub fn analyze(seed: u64, kind: &str, size: usize) -> Result<Bands> {
    let img = make_image(seed, kind, size)?;
    let mut cfg = ModelConfig::micro();
    cfg.input_size = size;
    let model = LrdNet::<f64>::new(&cfg)?;
    let x = img.pixels.cast::<f64>().reshape([1, 3, size, size])?;
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &model.store, false, false);
    let leaf = s.tape.leaf(&x);
    let x = s.tape.affine(leaf, 2.0, -1.0)?;
    let (signals, bank) = model.mswgm.guidance(&mut s, x)?;
    let n = size * size;
    let mut high = Vec::new();
    for b in decompose(&mut *s.tape, x, model.mswgm.sigmas())? {
        let v = s.tape.value(b.high);
        high.push((0..n).map(|i| (0..3).map(|c| v[c * n + i].abs()).sum::<f64>() / 3.0).collect());
    }
    let spatial = s.tape.value(signals.spatial).to_vec();
    let spatial_size = (spatial.len() as f64).sqrt().round() as usize;
    Ok(Bands {
        size,
        high,
        alphas: s.tape.value(bank.alphas).to_vec(),
        spatial,
        spatial_size,
    })
}

/// Drift of an EMA prototype that starts from a random direction and then
/// sees batches of noisy samples around one fixed direction.
pub fn drift_series(mu: f64, steps: usize, noise: f64, batch: usize, seed: u64) -> Result<Vec<f64>> {
    const DIM: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let target: Vec<f64> = (0..DIM).map(|_| gauss()).collect();
    let stale: Vec<f64> = (0..DIM).map(|_| gauss()).collect();
    let mut center = RealCenter::new(DIM, mu)?;
    center.ema_update(&[stale])?;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let samples: Vec<Vec<f64>> = (0..batch.max(1))
            .map(|_| {
                let norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
                target.iter().map(|t| t / norm + noise * gauss() / (DIM as f64).sqrt()).collect()
            })
            .collect();
        center.ema_update(&samples)?;
        out.push(center.last_drift);
    }
    Ok(out)
}

fn js(e: lrdnet::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA pixels of a synthetic image.
#[wasm_bindgen]
pub fn synthesize(seed: u32, kind: &str, size: usize) -> std::result::Result<Vec<u8>, JsError> {
    let img = make_image(seed.into(), kind, size).map_err(js)?;
    Ok(to_rgba(&img.pixels.to_f64_vec(), size))
}

#[wasm_bindgen]
pub struct BandView {
    inner: Bands,
}

#[wasm_bindgen]
impl BandView {
    pub fn scales(&self) -> usize {
        self.inner.high.len()
    }

    pub fn size(&self) -> usize {
        self.inner.size
    }

    pub fn high_band(&self, scale: usize) -> Vec<u8> {
        self.inner.high.get(scale).map(|p| gray_rgba(p)).unwrap_or_default()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.inner.alphas.clone()
    }

    pub fn spatial_size(&self) -> usize {
        self.inner.spatial_size
    }

    pub fn spatial(&self) -> Vec<u8> {
        self.inner
            .spatial
            .iter()
            .flat_map(|v| {
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                [g, g, g, 255]
            })
            .collect()
    }
}

#[wasm_bindgen]
pub fn band_view(seed: u32, kind: &str, size: usize) -> std::result::Result<BandView, JsError> {
    analyze(seed.into(), kind, size).map(|inner| BandView { inner }).map_err(js)
}

#[wasm_bindgen]
pub fn drift_curve(mu: f64, steps: usize, noise: f64, batch: usize, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    drift_series(mu, steps, noise, batch, seed.into()).map_err(js)
}

/// Drift threshold used by the training loss.
#[wasm_bindgen]
pub fn drift_threshold() -> f64 {
    ModelConfig::micro().delta
}
