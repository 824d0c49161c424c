//! Parameter accounting, memory footprint, and the inference benchmark.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::model::LrdNet;
use crate::nn::Component;
use crate::synth;
use crate::tensor::{Scalar, Tensor};

/// Published per-component counts of the reference model.
pub const REFERENCE_COUNTS: [(Component, usize); 4] = [
    (Component::SpatialBackbone, 2_539_376),
    (Component::FrequencyBranch, 7_780),
    (Component::ProjectionHead, 82_112),
    (Component::Classifier, 130),
];
pub const REFERENCE_TOTAL: usize = 2_629_398;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub component: Component,
    pub params: usize,
    pub reference: usize,
    pub delta: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamAuditReport {
    pub components: Vec<ComponentCount>,
    pub total: usize,
    pub reference_total: usize,
    pub total_delta: i64,
}

impl ParamAuditReport {
    pub fn count(&self, c: Component) -> usize {
        self.components.iter().find(|x| x.component == c).map_or(0, |x| x.params)
    }
}

impl fmt::Display for ParamAuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>10} {:>10} {:>9}", "component", "params", "reference", "delta")?;
        for c in &self.components {
            writeln!(
                f,
                "{:<18} {:>10} {:>10} {:>+9}",
                c.component.name(),
                c.params,
                c.reference,
                c.delta
            )?;
        }
        write!(
            f,
            "{:<18} {:>10} {:>10} {:>+9}",
            "total", self.total, self.reference_total, self.total_delta
        )
    }
}

/// Groups trainable scalars by owning component.
pub fn count_params<T: Scalar>(model: &LrdNet<T>) -> ParamAuditReport {
    let mut by: BTreeMap<Component, usize> = BTreeMap::new();
    for p in model.store.params() {
        *by.entry(p.component).or_default() += p.tensor.len();
    }
    let components: Vec<ComponentCount> = REFERENCE_COUNTS
        .iter()
        .map(|&(component, reference)| {
            let params = by.get(&component).copied().unwrap_or(0);
            ComponentCount {
                component,
                params,
                reference,
                delta: params as i64 - reference as i64,
            }
        })
        .collect();
    let total = components.iter().map(|c| c.params).sum();
    ParamAuditReport {
        components,
        total,
        reference_total: REFERENCE_TOTAL,
        total_delta: total as i64 - REFERENCE_TOTAL as i64,
    }
}

/// Second counting path: the product of every parameter tensor's shape,
/// keyed by name.
pub fn enumerate_params<T: Scalar>(model: &LrdNet<T>) -> Vec<(String, Vec<usize>, usize)> {
    model
        .store
        .params()
        .iter()
        .map(|p| {
            let shape = p.tensor.shape().to_vec();
            let n = shape.iter().product();
            (p.name.clone(), shape, n)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp16,
    Int8,
}

impl Precision {
    pub const ALL: [Precision; 3] = [Precision::Fp32, Precision::Fp16, Precision::Int8];

    pub fn bytes_per_param(self) -> usize {
        match self {
            Precision::Fp32 => 4,
            Precision::Fp16 => 2,
            Precision::Int8 => 1,
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" | "f32" => Ok(Precision::Fp32),
            "fp16" | "f16" => Ok(Precision::Fp16),
            "int8" | "i8" => Ok(Precision::Int8),
            other => Err(arg_err("footprint", format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub params: usize,
    pub bytes_fp32: usize,
    pub bytes_fp16: usize,
    pub bytes_int8: usize,
}

impl FootprintReport {
    pub fn new(params: usize) -> Self {
        Self {
            params,
            bytes_fp32: footprint(params, Precision::Fp32),
            bytes_fp16: footprint(params, Precision::Fp16),
            bytes_int8: footprint(params, Precision::Int8),
        }
    }

    /// Decimal megabytes at the given precision.
    pub fn megabytes(&self, p: Precision) -> f64 {
        footprint(self.params, p) as f64 / 1e6
    }
}

pub fn footprint(params: usize, precision: Precision) -> usize {
    params * precision.bytes_per_param()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: String,
    pub input_size: usize,
    pub n_images: usize,
    pub batch: usize,
    pub warmup: usize,
    pub threads: usize,
    pub mean_ms_per_image: f64,
    pub p50_ms_per_image: f64,
    pub p95_ms_per_image: f64,
    pub throughput_images_per_s: f64,
    pub total_s: f64,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times eval-mode inference (guidance, backbone, heads) over synthetic
/// inputs. `warmup` images are run first and excluded. With `threads > 1`
/// each timed batch is split across threads sharing the read-only model.
pub fn benchmark<T: Scalar>(
    model: &LrdNet<T>,
    n_images: usize,
    batch: usize,
    warmup: usize,
    threads: usize,
) -> Result<BenchReport> {
    if n_images < warmup + 10 {
        return Err(arg_err(
            "benchmark",
            format!("n_images {n_images} must be at least warmup ({warmup}) + 10"),
        ));
    }
    if batch == 0 || threads == 0 {
        return Err(arg_err("benchmark", "batch and threads must be positive"));
    }
    let size = model.cfg.input_size;
    let pool: Vec<Tensor<f32>> = (0..batch.min(8))
        .map(|i| synth::gen_real(synth::derive_seed(0xbe7c, 0, i as u64), size.max(synth::MIN_SIZE)))
        .map(|r| r.map(|img| resize_to(img.pixels, size)))
        .collect::<Result<Result<_>>>()??;
    let make = |k: usize| -> Vec<&Tensor<f32>> { (0..k).map(|i| &pool[i % pool.len()]).collect() };

    let run = |k: usize| -> Result<()> {
        let images = make(k);
        if threads == 1 || k < 2 {
            model.predict(&images)?;
            return Ok(());
        }
        let per = k.div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = images
                .chunks(per)
                .map(|c| scope.spawn(move || model.predict(c).map(|_| ())))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Checkpoint("benchmark worker panicked".into()))))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(())
    };

    let mut left = warmup;
    while left > 0 {
        let k = left.min(batch);
        run(k)?;
        left -= k;
    }
    let mut per_image = Vec::new();
    let mut remaining = n_images - warmup;
    let start = Instant::now();
    while remaining > 0 {
        let k = remaining.min(batch);
        let t = Instant::now();
        run(k)?;
        let ms = t.elapsed().as_secs_f64() * 1e3 / k as f64;
        per_image.extend(std::iter::repeat_n(ms, k));
        remaining -= k;
    }
    let total_s = start.elapsed().as_secs_f64();
    let timed = n_images - warmup;
    per_image.sort_by(f64::total_cmp);
    Ok(BenchReport {
        mode: format!("{:?}", model.cfg.mode).to_lowercase(),
        input_size: size,
        n_images,
        batch,
        warmup,
        threads,
        mean_ms_per_image: total_s * 1e3 / timed as f64,
        p50_ms_per_image: percentile(&per_image, 50.0),
        p95_ms_per_image: percentile(&per_image, 95.0),
        throughput_images_per_s: timed as f64 / total_s,
        total_s,
    })
}

fn resize_to(img: Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = img.shape()[1];
    if s == size {
        return Ok(img);
    }
    let mut tape = crate::tape::Tape::<f32>::new();
    let x = tape.constant([1, 3, s, s], img.into_data())?;
    let y = tape.bilinear_resize(x, size, size)?;
    Tensor::new([3, size, size], tape.value(y).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn footprint_ratios() {
        let r = FootprintReport::new(REFERENCE_TOTAL);
        assert_eq!(r.bytes_fp32, 10_517_592);
        assert_eq!(r.bytes_int8, 2_629_398);
        assert_eq!(r.bytes_fp32, 2 * r.bytes_fp16);
        assert_eq!(r.bytes_fp16, 2 * r.bytes_int8);
        assert_eq!(FootprintReport::new(0).bytes_fp32, 0);
        assert!("bf16".parse::<Precision>().is_err());
    }

    #[test]
    fn percentiles_are_ordered() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 95.0), 95.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }
}
