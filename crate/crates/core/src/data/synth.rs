//! Seeded synthetic texture datasets with exact defect masks.
//!
//! Every dataset draws one "product style" (colours and texture geometry)
//! from its seed; each image re-renders that style with its own jitter in
//! placement, size and strength. Defective test images are a clean rendering
//! with one defect painted on top. Every masked pixel differs from the clean
//! rendering by at least [`MIN_DEFECT_CONTRAST`] in every channel and every
//! unmasked pixel is untouched.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetLayout, Split, GOOD, MANIFEST_FILE};
use crate::error::{Error, Result};

/// Minimum per-channel 8-bit difference between a defect pixel and the
/// clean rendering underneath it.
pub const MIN_DEFECT_CONTRAST: u8 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Stripes,
    Checker,
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Patch,
    Scratch,
    ColorShift,
}

impl DefectKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            DefectKind::Patch => "patch",
            DefectKind::Scratch => "scratch",
            DefectKind::ColorShift => "color_shift",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub category: String,
    pub side: usize,
    pub count_train: usize,
    pub count_test_good: usize,
    pub count_test_defect: usize,
    pub texture: Texture,
    pub defect: DefectKind,
    /// Inclusive `[min, max]` defect extent in pixels.
    pub defect_size: (usize, usize),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            category: "synthetic".into(),
            side: 64,
            count_train: 200,
            count_test_good: 20,
            count_test_defect: 20,
            texture: Texture::Blobs,
            defect: DefectKind::Patch,
            defect_size: (6, 14),
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.side < 8 {
            problems.push(format!("synth.side must be >= 8, got {}", self.side));
        }
        let (lo, hi) = self.defect_size;
        if lo == 0 || lo > hi || hi >= self.side {
            problems.push(format!(
                "synth.defect_size must satisfy 0 < min <= max < side, got [{lo}, {hi}]"
            ));
        }
        if self.category.is_empty() || self.category.contains(['/', '\\']) {
            problems.push(format!(
                "synth.category {:?} is not a plain directory name",
                self.category
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Identifies one rendered image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageKey {
    Train(usize),
    TestGood(usize),
    TestDefect(usize),
}

impl ImageKey {
    fn stream(self) -> u64 {
        match self {
            ImageKey::Train(i) => 1_000_000 + i as u64,
            ImageKey::TestGood(i) => 2_000_000 + i as u64,
            ImageKey::TestDefect(i) => 3_000_000 + i as u64,
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    amplitude: f64,
}

/// Dataset-wide appearance drawn once from the seed.
#[derive(Debug, Clone)]
struct Style {
    background: [f64; 3],
    foreground: [f64; 3],
    angle: f64,
    period: f64,
    cell: f64,
    blobs: Vec<Blob>,
}

impl Style {
    fn draw(spec: &SynthSpec) -> Self {
        let mut rng = rng_for(spec.seed, 0);
        let side = spec.side as f64;
        let background = [0; 3].map(|_| rng.gen_range(0.15..0.4));
        let foreground = [0; 3].map(|_| rng.gen_range(0.6..0.9));
        let angle = rng.gen_range(0.0..PI);
        let period = rng.gen_range(side / 8.0..side / 4.0);
        let cell = rng.gen_range(side / 8.0..side / 5.0);
        let n = rng.gen_range(6..=10);
        let blobs = (0..n)
            .map(|_| Blob {
                cy: rng.gen_range(0.0..side),
                cx: rng.gen_range(0.0..side),
                radius: rng.gen_range(side / 16.0..side / 6.0),
                amplitude: rng.gen_range(0.6..1.0),
            })
            .collect();
        Style {
            background,
            foreground,
            angle,
            period,
            cell,
            blobs,
        }
    }
}

/// Defect-free rendering of one image.
pub fn render_clean(spec: &SynthSpec, key: ImageKey) -> RgbImage {
    let style = Style::draw(spec);
    let mut rng = rng_for(spec.seed, key.stream());
    let side = spec.side;
    let s = side as f64;

    // Per-image jitter. Strong enough that the mean training image is not a
    // perfect detector on its own.
    let phase = rng.gen_range(-1.5..1.5);
    let angle = style.angle + rng.gen_range(-0.03..0.03);
    let offset = (
        rng.gen_range(-s / 8.0..s / 8.0),
        rng.gen_range(-s / 8.0..s / 8.0),
    );
    let blobs: Vec<Blob> = style
        .blobs
        .iter()
        .map(|b| Blob {
            cy: b.cy + rng.gen_range(-s / 8.0..s / 8.0),
            cx: b.cx + rng.gen_range(-s / 8.0..s / 8.0),
            radius: b.radius * rng.gen_range(0.75..1.25),
            amplitude: b.amplitude * rng.gen_range(0.6..1.4),
        })
        .collect();
    let brightness = rng.gen_range(-0.02..0.02);

    let field = |y: f64, x: f64| -> f64 {
        match spec.texture {
            Texture::Stripes => {
                let u = x * angle.cos() + y * angle.sin();
                0.5 + 0.5 * (2.0 * PI * u / style.period + phase).sin()
            }
            Texture::Checker => {
                let cy = ((y + offset.0) / style.cell).floor() as i64;
                let cx = ((x + offset.1) / style.cell).floor() as i64;
                if (cy + cx).rem_euclid(2) == 0 {
                    0.85
                } else {
                    0.15
                }
            }
            Texture::Blobs => blobs
                .iter()
                .map(|b| {
                    let d2 = (y - b.cy).powi(2) + (x - b.cx).powi(2);
                    b.amplitude * (-d2 / (2.0 * b.radius * b.radius)).exp()
                })
                .sum::<f64>()
                .min(1.0),
        }
    };

    let mut img = RgbImage::new(side as u32, side as u32);
    for y in 0..side {
        for x in 0..side {
            let f = field(y as f64 + 0.5, x as f64 + 0.5);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.01;
                let v = style.background[c]
                    + (style.foreground[c] - style.background[c]) * f
                    + brightness
                    + noise;
                px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// `candidate` moved, if needed, so it differs from `clean` by at least
/// [`MIN_DEFECT_CONTRAST`].
fn push_away(clean: u8, candidate: u8) -> u8 {
    if clean.abs_diff(candidate) >= MIN_DEFECT_CONTRAST {
        candidate
    } else if clean < 128 {
        clean + MIN_DEFECT_CONTRAST + 26
    } else {
        clean - MIN_DEFECT_CONTRAST - 26
    }
}

/// Defective test image `index` and its ground-truth mask.
pub fn render_defect(spec: &SynthSpec, index: usize) -> (RgbImage, GrayImage) {
    let clean = render_clean(spec, ImageKey::TestDefect(index));
    let mut rng = rng_for(spec.seed, 4_000_000 + index as u64);
    let side = spec.side as i64;
    let (lo, hi) = spec.defect_size;
    let mut region = vec![false; (side * side) as usize];
    let mut mark = |y: i64, x: i64| {
        if (0..side).contains(&y) && (0..side).contains(&x) {
            region[(y * side + x) as usize] = true;
        }
    };

    match spec.defect {
        DefectKind::Patch => {
            let h = rng.gen_range(lo..=hi) as i64;
            let w = rng.gen_range(lo..=hi) as i64;
            let y0 = rng.gen_range(0..=side - h);
            let x0 = rng.gen_range(0..=side - w);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    mark(y, x);
                }
            }
        }
        DefectKind::Scratch => {
            let len = rng.gen_range(lo..=hi) as f64;
            let theta = rng.gen_range(0.0..PI);
            let (dy, dx) = (theta.sin() * len, theta.cos() * len);
            let margin = len / 2.0 + 1.0;
            let cy = rng.gen_range(margin..side as f64 - margin);
            let cx = rng.gen_range(margin..side as f64 - margin);
            let steps = (len * 4.0).ceil() as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64 - 0.5;
                let (py, px) = (cy + t * dy, cx + t * dx);
                // two pixels wide
                mark(py.floor() as i64, px.floor() as i64);
                mark(py.floor() as i64 + 1, px.floor() as i64);
                mark(py.floor() as i64, px.floor() as i64 + 1);
            }
        }
        DefectKind::ColorShift => {
            let ry = rng.gen_range(lo..=hi) as f64 / 2.0;
            let rx = rng.gen_range(lo..=hi) as f64 / 2.0;
            let cy = rng.gen_range(ry..side as f64 - ry);
            let cx = rng.gen_range(rx..side as f64 - rx);
            for y in 0..side {
                for x in 0..side {
                    let u = (y as f64 + 0.5 - cy) / ry;
                    let v = (x as f64 + 0.5 - cx) / rx;
                    if u * u + v * v <= 1.0 {
                        mark(y, x);
                    }
                }
            }
        }
    }

    let foreign = [0; 3].map(|_| rng.gen_range(0u8..=255));
    let shift = [0; 3].map(|_| if rng.gen_bool(0.5) { 90i16 } else { -90 });
    let mut img = clean.clone();
    let mut mask = GrayImage::new(side as u32, side as u32);
    for y in 0..side {
        for x in 0..side {
            if !region[(y * side + x) as usize] {
                continue;
            }
            let base = clean.get_pixel(x as u32, y as u32).0;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let candidate = match spec.defect {
                    DefectKind::Patch => {
                        let jitter: i16 = rng.gen_range(-12..=12);
                        (foreign[c] as i16 + jitter).clamp(0, 255) as u8
                    }
                    DefectKind::Scratch => base[c],
                    DefectKind::ColorShift => (base[c] as i16 + shift[c]).clamp(0, 255) as u8,
                };
                px[c] = push_away(base[c], candidate);
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
            mask.put_pixel(x as u32, y as u32, Luma([255]));
        }
    }
    (img, mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SynthSpec,
    pub files: Vec<ManifestEntry>,
}

fn save_png<P: image::PixelWithColorType<Subpixel = u8>>(
    img: &image::ImageBuffer<P, Vec<u8>>,
    root: &Path,
    rel: &str,
    files: &mut Vec<ManifestEntry>,
) -> Result<()>
where
    P: image::Pixel<Subpixel = u8>,
{
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes)
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            P::COLOR_TYPE.into(),
        )
        .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    files.push(ManifestEntry {
        path: rel.to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    });
    Ok(())
}

use image::ImageEncoder;

/// Writes the dataset under `<root>/<spec.category>/` and returns its layout.
/// Refuses to write into an existing, non-empty category directory.
pub fn generate_synthetic(spec: &SynthSpec, root: &Path) -> Result<DatasetLayout> {
    spec.validate()?;
    let layout = DatasetLayout::new(root, spec.category.clone());
    let cat: PathBuf = layout.category_dir();
    if cat.exists()
        && fs::read_dir(&cat)
            .map_err(|e| Error::io(&cat, e))?
            .next()
            .is_some()
    {
        return Err(Error::config(format!(
            "target {} already exists and is not empty",
            cat.display()
        )));
    }
    fs::create_dir_all(&cat).map_err(|e| Error::io(&cat, e))?;

    let mut files = Vec::new();
    let train = Split::Train.as_str();
    let test = Split::Test.as_str();
    for i in 0..spec.count_train {
        let img = render_clean(spec, ImageKey::Train(i));
        save_png(
            &img,
            &cat,
            &format!("{train}/{GOOD}/{i:03}.png"),
            &mut files,
        )?;
    }
    for i in 0..spec.count_test_good {
        let img = render_clean(spec, ImageKey::TestGood(i));
        save_png(&img, &cat, &format!("{test}/{GOOD}/{i:03}.png"), &mut files)?;
    }
    let defect = spec.defect.dir_name();
    for i in 0..spec.count_test_defect {
        let (img, mask) = render_defect(spec, i);
        save_png(
            &img,
            &cat,
            &format!("{test}/{defect}/{i:03}.png"),
            &mut files,
        )?;
        save_png(
            &mask,
            &cat,
            &format!("ground_truth/{defect}/{i:03}_mask.png"),
            &mut files,
        )?;
    }

    let manifest = DatasetManifest {
        spec: spec.clone(),
        files,
    };
    let path = cat.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(layout)
}
