//! Multi-resolution copies of the input image, one per encoder scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Smallest side length any pyramid level may have.
pub const MIN_LEVEL_SIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Number of scales `K`.
    pub levels: usize,
    /// Downsample factor between consecutive scales.
    pub gamma: f64,
    /// `(H, W)` of level 0.
    pub base_resolution: (usize, usize),
}

impl PyramidConfig {
    pub fn new(levels: usize, gamma: f64, base_resolution: (usize, usize)) -> Self {
        PyramidConfig {
            levels,
            gamma,
            base_resolution,
        }
    }

    /// Resolution of level `i` (0-based): `round(H·γ^i) × round(W·γ^i)`.
    pub fn resolution(&self, i: usize) -> (usize, usize) {
        let f = self.gamma.powi(i as i32);
        let (h, w) = self.base_resolution;
        (
            (h as f64 * f).round() as usize,
            (w as f64 * f).round() as usize,
        )
    }

    pub fn resolutions(&self) -> Vec<(usize, usize)> {
        (0..self.levels).map(|i| self.resolution(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.levels == 0 {
            problems.push("pyramid.levels must be >= 1".to_string());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            problems.push(format!(
                "pyramid.gamma must lie in (0, 1), got {}",
                self.gamma
            ));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let res = self.resolutions();
        for (i, &(h, w)) in res.iter().enumerate() {
            if h < MIN_LEVEL_SIDE || w < MIN_LEVEL_SIDE {
                problems.push(format!(
                    "pyramid level {i} has resolution {h}x{w}, below the minimum side {MIN_LEVEL_SIDE}"
                ));
            }
            if i > 0 {
                let (ph, pw) = res[i - 1];
                if h >= ph || w >= pw {
                    problems.push(format!(
                        "pyramid level {i} ({h}x{w}) is not strictly smaller than level {} ({ph}x{pw})",
                        i - 1
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// `K` resized copies of one image, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePyramid {
    levels: Vec<ImageGrid>,
}

impl ImagePyramid {
    pub fn levels(&self) -> &[ImageGrid] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &ImageGrid {
        &self.levels[i]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

pub fn build_pyramid(x: &ImageGrid, cfg: &PyramidConfig) -> Result<ImagePyramid> {
    cfg.validate()?;
    if x.resolution() != cfg.base_resolution {
        return Err(Error::config(format!(
            "input resolution {:?} does not match pyramid base resolution {:?}",
            x.resolution(),
            cfg.base_resolution
        )));
    }
    let mut levels = Vec::with_capacity(cfg.levels);
    levels.push(x.clone());
    for i in 1..cfg.levels {
        let (h, w) = cfg.resolution(i);
        levels.push(x.resize_area(h, w));
    }
    Ok(ImagePyramid { levels })
}
