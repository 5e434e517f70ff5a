//! Binary PPM (P6) / PGM (P5) images, offset heatmaps and run configs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};
use crate::train::TrainConfig;

/// Planar image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    /// `[C, H, W]` row-major.
    pub data: Vec<f32>,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, message: message.into() }
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if !(channels == 1 || channels == 3) || width == 0 || height == 0 {
            return Err(shape_err!("image {width}x{height}x{channels}: need non-empty extents and 1 or 3 channels"));
        }
        if data.len() != width * height * channels {
            return Err(shape_err!("image {width}x{height}x{channels} given {} values", data.len()));
        }
        Ok(Self { width, height, channels, data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect() })
    }

    /// Parse a P5 or P6 file with maxval 255.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(format_err(0, "bad magic, expected P5 or P6")),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for (i, field) in fields.iter_mut().enumerate() {
            // Whitespace and comments before each header number.
            let start = pos;
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            if pos == start {
                return Err(format_err(pos, "expected whitespace in header"));
            }
            let digits = bytes[pos..].iter().take_while(|b| b.is_ascii_digit()).count();
            if digits == 0 {
                return Err(format_err(pos, format!("expected header field {} ({})", i + 1, ["width", "height", "maxval"][i])));
            }
            let text = std::str::from_utf8(&bytes[pos..pos + digits]).expect("ascii digits");
            *field = text.parse().map_err(|_| format_err(pos, format!("header number {text} out of range")))?;
            pos += digits;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(format_err(pos - maxval.to_string().len(), format!("maxval {maxval} unsupported, expected 255")));
        }
        if width == 0 || height == 0 {
            return Err(format_err(3, format!("empty image {width}x{height}")));
        }
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(format_err(pos, "expected a single whitespace byte before the payload")),
        }
        let need = width * height * channels;
        let have = bytes.len() - pos;
        if have < need {
            return Err(format_err(bytes.len(), format!("truncated payload: {need} bytes expected, {have} present, {} missing", need - have)));
        }
        if have > need {
            return Err(format_err(pos + need, format!("{} trailing bytes after payload", have - need)));
        }
        let payload = &bytes[pos..];
        let mut data = vec![0.0f32; need];
        for c in 0..channels {
            for i in 0..width * height {
                data[c * width * height + i] = payload[i * channels + c] as f32 / 255.0;
            }
        }
        Self::new(width, height, channels, data)
    }

    /// Encode as P5/P6, rounding to the nearest 8-bit level.
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        let plane = self.width * self.height;
        out.reserve(plane * self.channels);
        for i in 0..plane {
            for c in 0..self.channels {
                out.push(quantize(self.data[c * plane + i]));
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.encode())?)
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(vec![1, self.channels, self.height, self.width], self.data.iter().map(|&v| T::from_f64(v as f64)).collect())
    }

    /// From a `[1, C, H, W]` or `[C, H, W]` tensor, clamping to `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [1, c, h, w] | [c, h, w] => (c, h, w),
            ref s => return Err(shape_err!("image tensor must be [1, C, H, W] or [C, H, W], got {s:?}")),
        };
        Self::new(w, h, c, t.data().iter().map(|v| v.to_f64() as f32).collect())
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Deterministic piecewise-smooth RGB scene: a colour gradient with
/// flat discs, rectangles and one striped patch.
pub fn synthetic_scene(seed: u64, width: usize, height: usize) -> Image {
    use rand::Rng;
    let mut rng = crate::rng::stream_rng(seed, crate::rng::stream::TEST, 0x5ce);
    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    let base: [[f32; 3]; 2] = [std::array::from_fn(|_| rng.random_range(0.1..0.9)), std::array::from_fn(|_| rng.random_range(0.1..0.9))];
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..height {
        for x in 0..width {
            let t = 0.5 + 0.5 * ((x as f32 / width as f32 - 0.5) * ca + (y as f32 / height as f32 - 0.5) * sa);
            for c in 0..3 {
                data[c * plane + y * width + x] = base[0][c] * (1.0 - t) + base[1][c] * t;
            }
        }
    }
    let paint = |data: &mut [f32], inside: &dyn Fn(f32, f32) -> Option<f32>, colour: [f32; 3]| {
        for y in 0..height {
            for x in 0..width {
                if let Some(a) = inside(x as f32, y as f32) {
                    for c in 0..3 {
                        let v = &mut data[c * plane + y * width + x];
                        *v = *v * (1.0 - a) + colour[c] * a;
                    }
                }
            }
        }
    };
    let (w, h) = (width as f32, height as f32);
    for _ in 0..rng.random_range(3..6) {
        let colour = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let (cx, cy, r) = (rng.random_range(0.0..w), rng.random_range(0.0..h), rng.random_range(0.08..0.25) * w.min(h));
        paint(&mut data, &|x, y| ((x - cx).hypot(y - cy) < r).then_some(1.0), colour);
    }
    for _ in 0..rng.random_range(2..4) {
        let colour = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let (x0, y0) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let (x1, y1) = (x0 + rng.random_range(0.1..0.4) * w, y0 + rng.random_range(0.1..0.4) * h);
        paint(&mut data, &|x, y| (x >= x0 && x < x1 && y >= y0 && y < y1).then_some(1.0), colour);
    }
    let colour = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let (x0, y0, period) = (rng.random_range(0.0..0.6) * w, rng.random_range(0.0..0.6) * h, rng.random_range(4.0..9.0f32));
    paint(
        &mut data,
        &|x, y| (x >= x0 && x < x0 + 0.35 * w && y >= y0 && y < y0 + 0.35 * h).then(|| 0.5 + 0.5 * (std::f32::consts::TAU * (x + y) / period).sin()),
        colour,
    );
    Image::new(width, height, 3, data).expect("extents and length agree")
}

/// Every `.ppm` / `.pgm` in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<(PathBuf, Image)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    paths.into_iter().map(|p| Image::load(&p).map(|img| (p, img))).collect()
}

/// Raw offset-length statistics written next to a heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSummary {
    pub stage: usize,
    pub group: usize,
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Sidecar path for a heatmap: the same path with a `.json` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write the mean offset length of `stage` / `group` as a min-max
/// normalised PGM plus a JSON sidecar of raw statistics.
pub fn export_offset_heatmap<T: Scalar>(model: &Model<T>, image: &Image, stage: usize, group: usize, path: &Path) -> Result<HeatmapSummary> {
    let mag = model.offset_magnitude(&image.to_tensor::<T>(), stage, group)?;
    let (height, width) = (mag.shape()[0], mag.shape()[1]);
    let v = mag.data();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let span = max - min;
    let levels = v.iter().map(|&x| if span > 0.0 { ((x - min) / span) as f32 } else { 0.0 }).collect();
    Image::new(width, height, 1, levels)?.save(path)?;
    let summary = HeatmapSummary { stage, group, width, height, min, max, mean };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&summary).expect("plain struct serializes"))?;
    Ok(summary)
}

/// Run configuration file: `{"model": {...}, "train": {...}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
