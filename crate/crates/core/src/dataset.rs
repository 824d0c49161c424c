//! Labeled images and the on-disk folder format (PNG files plus a
//! `filename,label,family` manifest).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Label;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Synthetic forgery families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    /// Local patch re-synthesis.
    #[serde(rename = "fe")]
    FeProxy,
    /// Whole-image resample and re-sharpen.
    #[serde(rename = "i2i")]
    I2iProxy,
    /// Injected periodic spectral peaks.
    #[serde(rename = "t2i")]
    T2iProxy,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::FeProxy, Family::I2iProxy, Family::T2iProxy];

    pub fn name(self) -> &'static str {
        match self {
            Family::FeProxy => "fe",
            Family::I2iProxy => "i2i",
            Family::T2iProxy => "t2i",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fe" | "fe_proxy" => Ok(Family::FeProxy),
            "i2i" | "i2i_proxy" => Ok(Family::I2iProxy),
            "t2i" | "t2i_proxy" => Ok(Family::T2iProxy),
            other => Err(Error::InvalidArgument {
                op: "family",
                detail: format!("unknown family `{other}` (expected fe, i2i or t2i)"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[3, S, S]` in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub label: Label,
    pub family: Option<Family>,
}

impl LabeledImage {
    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }
}

fn image_err(path: &Path, reason: impl fmt::Display) -> Error {
    Error::Image {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Decodes an 8-bit RGB image into `[3, H, W]` floats and resizes it to
/// `size x size` with half-pixel bilinear sampling.
pub fn decode_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(image_err(path, "image has no pixels"));
    }
    let raw = img.into_raw();
    let mut planar = vec![0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            planar[ch * h * w + i] = px[ch] as f32 / 255.0;
        }
    }
    if h == size && w == size {
        return Tensor::new([3, size, size], planar);
    }
    let mut tape = Tape::<f32>::new();
    let x = tape.constant([1, 3, h, w], planar)?;
    let y = tape.bilinear_resize(x, size, size)?;
    Tensor::new([3, size, size], tape.value(y).to_vec())
}

/// Reads `label_file` (CSV `filename,label[,family]`, optional header) and
/// the images it names, relative to `dir`.
pub fn load_folder(dir: &Path, label_file: &Path, size: usize) -> Result<Vec<LabeledImage>> {
    let text = std::fs::read_to_string(label_file)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let parse_err = |line: u64, reason: String| Error::Parse {
        path: label_file.display().to_string(),
        line: line as usize,
        reason,
    };
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(i as u64 + 1, e.to_string()))?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        let name = rec.get(0).unwrap_or_default();
        let label_raw = rec.get(1).unwrap_or_default();
        if i == 0 && name.eq_ignore_ascii_case("filename") {
            continue;
        }
        if rec.len() < 2 {
            return Err(parse_err(line, "expected `filename,label`".into()));
        }
        let label = label_raw
            .parse::<u8>()
            .ok()
            .and_then(Label::from_target)
            .ok_or_else(|| parse_err(line, format!("label `{label_raw}` is not 0 or 1")))?;
        let family = match rec.get(2).filter(|s| !s.is_empty()) {
            Some(f) => Some(f.parse::<Family>().map_err(|e| parse_err(line, e.to_string()))?),
            None => None,
        };
        let pixels = decode_image(&dir.join(name), size)?;
        out.push(LabeledImage { pixels, label, family });
    }
    if out.is_empty() {
        return Err(Error::Empty("load_folder"));
    }
    Ok(out)
}

pub const MANIFEST: &str = "manifest.csv";

/// Writes 8-bit PNGs and `manifest.csv` into `dir`.
pub fn save_folder(dir: &Path, images: &[LabeledImage]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(MANIFEST)).map_err(|e| Error::Io(e.into()))?;
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["filename", "label", "family"]).map_err(io)?;
    for (i, img) in images.iter().enumerate() {
        let name = format!("img_{i:05}.png");
        let path = dir.join(&name);
        let s = img.size();
        let d = img.pixels.data();
        let mut buf = image::RgbImage::new(s as u32, s as u32);
        for (j, px) in buf.pixels_mut().enumerate() {
            for ch in 0..3 {
                px[ch] = (d[ch * s * s + j].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        buf.save(&path).map_err(|e| image_err(&path, e))?;
        let label = (img.label.target() as u8).to_string();
        let family = img.family.map(|f| f.name()).unwrap_or("");
        w.write_record([name.as_str(), label.as_str(), family]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
