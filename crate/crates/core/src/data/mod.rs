//! Dataset ingestion in the MVTec-AD directory layout.
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/<defect>/*.png          (`good` for defect-free)
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```

pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ImageGrid};

pub const GOOD: &str = "good";
pub const MANIFEST_FILE: &str = "dataset_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!(
                "unknown split {other:?} (expected train or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub category: String,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>, category: impl Into<String>) -> Self {
        DatasetLayout {
            root: root.into(),
            category: category.into(),
        }
    }

    pub fn category_dir(&self) -> PathBuf {
        self.root.join(&self.category)
    }

    pub fn split_dir(&self, split: Split) -> PathBuf {
        self.category_dir().join(split.as_str())
    }

    pub fn ground_truth_dir(&self) -> PathBuf {
        self.category_dir().join("ground_truth")
    }

    pub fn mask_path(&self, defect: &str, stem: &str) -> PathBuf {
        self.ground_truth_dir()
            .join(defect)
            .join(format!("{stem}_mask.png"))
    }
}

/// One decoded image of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `<split>/<defect>/<stem>`, unique within the category.
    pub id: String,
    pub defect_type: String,
    pub path: PathBuf,
    pub image: ImageGrid,
    /// Always `None` on the train split; all-zero for test `good` images.
    pub mask: Option<BinaryMask>,
}

struct Entry {
    id: String,
    defect_type: String,
    path: PathBuf,
    mask_path: Option<PathBuf>,
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if want_dirs && path.is_dir() {
            out.push(path);
        } else if !want_dirs
            && path.is_file()
            && path.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                matches!(
                    e.to_ascii_lowercase().as_str(),
                    "png" | "jpg" | "jpeg" | "bmp"
                )
            })
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

fn list_split(layout: &DatasetLayout, split: Split) -> Result<Vec<Entry>> {
    let split_dir = layout.split_dir(split);
    if !split_dir.is_dir() {
        return Err(Error::Ingestion {
            path: split_dir,
            reason: "split directory does not exist".into(),
        });
    }
    let mut entries = Vec::new();
    for defect_dir in sorted_entries(&split_dir, true)? {
        let defect = dir_name(&defect_dir);
        if split == Split::Train && defect != GOOD {
            return Err(Error::Ingestion {
                path: defect_dir,
                reason: "the train split may only contain defect-free images".into(),
            });
        }
        for path in sorted_entries(&defect_dir, false)? {
            let stem = file_stem(&path);
            let mask_path =
                (split == Split::Test && defect != GOOD).then(|| layout.mask_path(&defect, &stem));
            entries.push(Entry {
                id: format!("{}/{defect}/{stem}", split.as_str()),
                defect_type: defect.clone(),
                path,
                mask_path,
            });
        }
    }
    Ok(entries)
}

/// Decodes to `[0, 1]` with `channels` channels (grey is replicated to RGB,
/// RGB is averaged to grey) and area-resizes to `resolution`.
pub fn read_image(path: &Path, channels: usize, resolution: (usize, usize)) -> Result<ImageGrid> {
    let ingest = |reason: String| Error::Ingestion {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::open(path).map_err(|e| ingest(format!("cannot decode image: {e}")))?;
    let grid = match channels {
        1 => {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let data = g.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            ImageGrid::from_planar(h as usize, w as usize, 1, data)?
        }
        3 => {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let plane = (w * h) as usize;
            let mut data = vec![0.0; 3 * plane];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = px[c] as f64 / 255.0;
                }
            }
            ImageGrid::from_planar(h as usize, w as usize, 3, data)?
        }
        other => return Err(ingest(format!("unsupported channel count {other}"))),
    };
    Ok(grid.resize_area(resolution.0, resolution.1))
}

/// Nearest-neighbour resize, then re-binarized at 0.5.
pub fn read_mask(path: &Path, resolution: (usize, usize)) -> Result<BinaryMask> {
    if !path.is_file() {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            reason: "ground-truth mask is missing".into(),
        });
    }
    let grey = read_image_native_grey(path)?;
    Ok(BinaryMask::from_grid(
        &grey.resize_nearest(resolution.0, resolution.1),
        0.5,
    ))
}

fn read_image_native_grey(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: format!("cannot decode mask: {e}"),
    })?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    ImageGrid::from_planar(
        h as usize,
        w as usize,
        1,
        g.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
    )
}

/// Loads every image of `split`, decoding in parallel; output order is the
/// sorted directory order regardless of worker timing.
pub fn load_dataset(
    layout: &DatasetLayout,
    split: Split,
    base_resolution: (usize, usize),
    channels: usize,
) -> Result<Vec<Sample>> {
    let entries = list_split(layout, split)?;
    // Report a missing mask before spending time decoding.
    if let Some(missing) = entries
        .iter()
        .filter_map(|e| e.mask_path.as_ref())
        .find(|p| !p.is_file())
    {
        return Err(Error::Ingestion {
            path: missing.clone(),
            reason: "ground-truth mask is missing for a defective test image".into(),
        });
    }
    entries
        .into_par_iter()
        .map(|e| {
            let image = read_image(&e.path, channels, base_resolution)?;
            let mask = match (split, &e.mask_path) {
                (Split::Train, _) => None,
                (Split::Test, None) => {
                    Some(BinaryMask::empty(base_resolution.0, base_resolution.1))
                }
                (Split::Test, Some(p)) => Some(read_mask(p, base_resolution)?),
            };
            Ok(Sample {
                id: e.id,
                defect_type: e.defect_type,
                path: e.path,
                image,
                mask,
            })
        })
        .collect()
}
