//! Per-pixel anomaly maps and the fixed-threshold decision rule.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ImageGrid};
use crate::model::Mmae;

/// File magic of a serialized anomaly map.
pub const MAP_MAGIC: &[u8; 4] = b"AMAP";

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub source_id: String,
    height: usize,
    width: usize,
    scores: Vec<f64>,
}

impl AnomalyMap {
    pub fn new(
        source_id: impl Into<String>,
        height: usize,
        width: usize,
        scores: Vec<f64>,
    ) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::input(format!(
                "anomaly map {height}x{width} needs {} scores, got {}",
                height * width,
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::input(format!(
                "anomaly scores must be finite and >= 0, found {bad}"
            )));
        }
        Ok(AnomalyMap {
            source_id: source_id.into(),
            height,
            width,
            scores,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.scores[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }
}

/// Channel-summed squared difference at every pixel.
pub fn anomaly_map_from_reconstruction(
    source_id: impl Into<String>,
    x: &ImageGrid,
    x_hat: &ImageGrid,
) -> Result<AnomalyMap> {
    if x.dims() != x_hat.dims() {
        return Err(Error::input(format!(
            "reconstruction {:?} does not match input {:?}",
            x_hat.dims(),
            x.dims()
        )));
    }
    let (h, w) = x.resolution();
    let mut scores = vec![0.0; h * w];
    for c in 0..x.channels() {
        for ((s, a), b) in scores.iter_mut().zip(x.plane(c)).zip(x_hat.plane(c)) {
            *s += (a - b) * (a - b);
        }
    }
    AnomalyMap::new(source_id, h, w, scores)
}

pub fn anomaly_map(
    source_id: impl Into<String>,
    x: &ImageGrid,
    model: &Mmae,
) -> Result<AnomalyMap> {
    let x_hat = model.reconstruct(x)?;
    anomaly_map_from_reconstruction(source_id, x, &x_hat)
}

/// Mean filter over a `(2r+1)²` window clipped at the borders; `r = 0` is
/// the identity.
pub fn box_smooth(map: &AnomalyMap, radius: usize) -> AnomalyMap {
    if radius == 0 {
        return map.clone();
    }
    let (h, w) = map.resolution();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let y0 = y.saturating_sub(radius);
        let y1 = (y + radius).min(h - 1);
        for x in 0..w {
            let x0 = x.saturating_sub(radius);
            let x1 = (x + radius).min(w - 1);
            let mut acc = 0.0;
            for yy in y0..=y1 {
                acc += map.scores[yy * w + x0..=yy * w + x1].iter().sum::<f64>();
            }
            out[y * w + x] = acc / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    AnomalyMap {
        source_id: map.source_id.clone(),
        height: h,
        width: w,
        scores: out,
    }
}

/// Pixel is anomalous iff its score is strictly greater than `e`.
pub fn binarize(map: &AnomalyMap, e: f64) -> BinaryMask {
    BinaryMask::new(
        map.height,
        map.width,
        map.scores.iter().map(|&s| s > e).collect(),
    )
    .expect("map shape is consistent")
}

/// Dense little-endian map file: magic, `u32` height, `u32` width, then
/// `height·width` `f32` scores in row-major order.
pub fn write_map(path: &Path, map: &AnomalyMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 4 * map.scores.len());
    bytes.extend_from_slice(MAP_MAGIC);
    bytes.extend_from_slice(&(map.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.width as u32).to_le_bytes());
    for &s in &map.scores {
        bytes.extend_from_slice(&(s as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_map(path: &Path, source_id: impl Into<String>) -> Result<AnomalyMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::input(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != MAP_MAGIC {
        return Err(bad("not an anomaly map (bad magic)"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 4 * h * w {
        return Err(bad(&format!(
            "expected {} score bytes, found {}",
            4 * h * w,
            body.len()
        )));
    }
    let scores = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    AnomalyMap::new(source_id, h, w, scores)
}

/// Jet-style colour ramp over `[0, 1]`.
fn jet(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let channel =
        |offset: f64| ((1.5 - (4.0 * t - offset).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [channel(3.0), channel(2.0), channel(1.0)]
}

/// 8-bit RGB heatmap with scores mapped linearly from `[0, scale]`.
pub fn write_heatmap(path: &Path, map: &AnomalyMap, scale: f64) -> Result<()> {
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut img = image::RgbImage::new(map.width as u32, map.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        *px = image::Rgb(jet(map.scores[i] / scale));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
