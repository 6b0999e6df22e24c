use crate::error::{Error, Result};
use crate::nn::Dims;

/// An `H × W × C` raster stored channel-major, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    /// `data` is planar: all of channel 0, then channel 1, ...
    pub fn from_planar(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::input(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::input(format!(
                "expected {} samples for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(ImageGrid {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImageGrid {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Area-averaging (box) resample to `height × width`, channels independent.
    pub fn resize_area(&self, height: usize, width: usize) -> ImageGrid {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let rows = area_weights(self.height, height);
        let cols = area_weights(self.width, width);
        let mut out = Vec::with_capacity(height * width * self.channels);
        let mut tmp = vec![0.0; height * self.width];
        for c in 0..self.channels {
            let src = self.plane(c);
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for (oy, taps) in rows.iter().enumerate() {
                let dst = &mut tmp[oy * self.width..][..self.width];
                for &(iy, w) in taps {
                    for (d, s) in dst.iter_mut().zip(&src[iy * self.width..][..self.width]) {
                        *d += w * s;
                    }
                }
            }
            for oy in 0..height {
                let row = &tmp[oy * self.width..][..self.width];
                for taps in &cols {
                    out.push(taps.iter().map(|&(ix, w)| w * row[ix]).sum());
                }
            }
        }
        ImageGrid {
            height,
            width,
            channels: self.channels,
            data: out,
        }
    }

    /// Nearest-neighbour resample, sampling source pixel centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> ImageGrid {
        let mut out = ImageGrid::constant(height, width, self.channels, 0.0);
        for c in 0..self.channels {
            for y in 0..height {
                let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize)
                    .min(self.height - 1);
                for x in 0..width {
                    let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize)
                        .min(self.width - 1);
                    out.set(y, x, c, self.get(sy, sx, c));
                }
            }
        }
        out
    }
}

/// An `H × W` boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::input(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Positive where the first channel of `grid` exceeds `threshold`.
    pub fn from_grid(grid: &ImageGrid, threshold: f64) -> Self {
        BinaryMask {
            height: grid.height,
            width: grid.width,
            data: grid.plane(0).iter().map(|&v| v > threshold).collect(),
        }
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

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn to_grid(&self) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self
                .data
                .iter()
                .map(|&v| if v { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

/// For each output cell, the source cells it overlaps and normalized weights.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            let mut taps: Vec<(usize, f64)> = (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap))
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}
