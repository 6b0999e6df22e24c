//! `mmae synth | train | score | eval`.
//!
//! Commands talk to each other only through paths. Each one writes the
//! resolved config into its output directory. On failure a single JSON line
//! `{"error": <kind>, "message": <text>}` goes to stderr and the exit code is
//! 1 for usage/config problems and 2 for runtime failures.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::synth::generate_synthetic;
use crate::data::{load_dataset, read_mask, DatasetLayout, Split, GOOD};
use crate::error::{Error, Result};
use crate::evaluation::{pixel_roc_auc, pro_curve, GroundTruth, ProCurve};
use crate::grid::BinaryMask;
use crate::scoring::{
    anomaly_map, binarize, box_smooth, read_map, write_heatmap, write_map, AnomalyMap,
};
use crate::training::{train, TrainOutputs, FINAL_CHECKPOINT, LOG_FILE};

pub const MAPS_INDEX: &str = "maps_index.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CURVE_FILE: &str = "pro_curve.csv";
pub const PLOT_FILE: &str = "pro_curve.png";

#[derive(Debug, Parser)]
#[command(
    name = "mmae",
    version,
    about = "Multi-scale memory autoencoder anomaly detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; omitted keys take the full-scale defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for both training and synthetic data.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic defect dataset under `--out`.
    Synth(Common),
    /// Train on `data.root/data.category/train/good`.
    Train(Common),
    /// Write anomaly maps for a dataset split.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// PRO curve, PRO-AUC and pixel ROC-AUC for a directory of maps.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Output directory of a previous `score` run.
        #[arg(long, value_name = "DIR")]
        maps: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(c) | Command::Train(c) => c,
            Command::Score { common, .. } | Command::Eval { common, .. } => common,
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("usage error");
            report("usage", first.trim_start_matches("error: "));
            return 1;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            report(e.kind(), &e.to_string());
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn report(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    let _ = writeln!(std::io::stderr(), "{line}");
}

pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut sets = common.set.clone();
    if let Some(seed) = common.seed {
        sets.push(format!("train.seed={seed}"));
        sets.push(format!("synth.seed={seed}"));
    }
    RunConfig::load(common.config.as_deref(), &sets)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli.command.common())?;
    let out = &cli.command.common().out;
    match &cli.command {
        Command::Synth(_) => cmd_synth(&cfg, out),
        Command::Train(_) => cmd_train(&cfg, out),
        Command::Score {
            checkpoint, split, ..
        } => cmd_score(&cfg, checkpoint, split.parse()?, out),
        Command::Eval { maps, .. } => cmd_eval(&cfg, maps, out),
    }
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let layout = generate_synthetic(&cfg.synth, out)?;
    cfg.write_resolved(out)?;
    println!("dataset written to {}", layout.category_dir().display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let layout = DatasetLayout::new(&cfg.data.root, cfg.data.category.clone());
    let samples = load_dataset(
        &layout,
        Split::Train,
        cfg.base_resolution(),
        cfg.data.channels,
    )?;
    let images: Vec<_> = samples.into_iter().map(|s| s.image).collect();
    log::info!(
        "training on {} images from {}",
        images.len(),
        layout.category_dir().display()
    );
    cfg.write_resolved(out)?;
    let outputs = TrainOutputs {
        dir: out.to_path_buf(),
        config_echo: cfg.to_json(),
    };
    let state = train(&images, &cfg.model_config(), &cfg.train, Some(&outputs))?;
    if let (Some(first), Some(last)) = (state.history.first(), state.history.last()) {
        println!(
            "trained {} epochs: recon loss {:.6} -> {:.6}; wrote {} and {}",
            state.epoch,
            first.recon_loss,
            last.recon_loss,
            out.join(FINAL_CHECKPOINT).display(),
            out.join(LOG_FILE).display()
        );
    }
    Ok(())
}

/// One scored image as recorded in `maps_index.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapEntry {
    pub source_id: String,
    /// Path of the `.amap` file relative to the index.
    pub map: PathBuf,
    /// Ground-truth mask, absent for defect-free images.
    pub mask: Option<PathBuf>,
    pub defect_type: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapsIndex {
    pub category: String,
    pub split: Split,
    pub checkpoint: PathBuf,
    pub resolution: (usize, usize),
    pub maps: Vec<MapEntry>,
}

pub fn cmd_score(cfg: &RunConfig, checkpoint_path: &Path, split: Split, out: &Path) -> Result<()> {
    let (model, _) = checkpoint::load(checkpoint_path)?;
    let resolution = model.config.pyramid.base_resolution;
    let layout = DatasetLayout::new(&cfg.data.root, cfg.data.category.clone());
    let samples = load_dataset(&layout, split, resolution, model.config.channels)?;

    let maps: Vec<AnomalyMap> = samples
        .par_iter()
        .map(|s| {
            anomaly_map(&s.id, &s.image, &model).map(|m| box_smooth(&m, cfg.score.smooth_radius))
        })
        .collect::<Result<_>>()?;

    cfg.write_resolved(out)?;
    let scale = maps.iter().map(AnomalyMap::max).fold(0.0, f64::max);
    let mut entries = Vec::with_capacity(maps.len());
    for (s, m) in samples.iter().zip(&maps) {
        let rel = PathBuf::from("maps").join(format!("{}.amap", s.id));
        write_map(&out.join(&rel), m)?;
        if cfg.score.heatmaps {
            write_heatmap(
                &out.join("heatmaps").join(format!("{}.png", s.id)),
                m,
                scale,
            )?;
        }
        if let Some(e) = cfg.score.threshold {
            let path = out.join("masks").join(format!("{}.png", s.id));
            save_mask(&path, &binarize(m, e))?;
        }
        let mask = (split == Split::Test && s.defect_type != GOOD).then(|| {
            let stem = s.path.file_stem().unwrap_or_default().to_string_lossy();
            layout.mask_path(&s.defect_type, &stem)
        });
        entries.push(MapEntry {
            source_id: s.id.clone(),
            map: rel,
            mask,
            defect_type: s.defect_type.clone(),
        });
    }
    let index = MapsIndex {
        category: cfg.data.category.clone(),
        split,
        checkpoint: checkpoint_path.to_path_buf(),
        resolution,
        maps: entries,
    };
    let path = out.join(MAPS_INDEX);
    fs::write(
        &path,
        serde_json::to_vec_pretty(&index).expect("index serializes"),
    )
    .map_err(|e| Error::io(&path, e))?;
    println!("wrote {} anomaly maps to {}", maps.len(), out.display());
    Ok(())
}

fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.resolution();
    let img = image::GrayImage::from_vec(
        w as u32,
        h as u32,
        mask.data()
            .iter()
            .map(|&b| if b { 255 } else { 0 })
            .collect(),
    )
    .expect("mask buffer size matches");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Reads a `score` output directory back into aligned maps and ground truth.
pub fn load_scored(maps_dir: &Path) -> Result<(MapsIndex, Vec<AnomalyMap>, Vec<GroundTruth>)> {
    let empty = || Error::Evaluation(format!("no anomaly maps found in {}", maps_dir.display()));
    let index_path = maps_dir.join(MAPS_INDEX);
    if !index_path.is_file() {
        return Err(empty());
    }
    let bytes = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: MapsIndex = serde_json::from_slice(&bytes)
        .map_err(|e| Error::input(format!("{}: {e}", index_path.display())))?;
    if index.maps.is_empty() {
        return Err(empty());
    }
    let mut maps = Vec::with_capacity(index.maps.len());
    let mut gts = Vec::with_capacity(index.maps.len());
    for entry in &index.maps {
        let map = read_map(&maps_dir.join(&entry.map), entry.source_id.clone())?;
        let (h, w) = map.resolution();
        let mask = match &entry.mask {
            Some(p) => read_mask(p, (h, w))?,
            None => BinaryMask::empty(h, w),
        };
        maps.push(map);
        gts.push(GroundTruth::new(mask, entry.defect_type.clone()));
    }
    Ok((index, maps, gts))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scores {
    pub pro_auc: Option<f64>,
    pub pixel_auc: Option<f64>,
    pub images: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub pro_auc: f64,
    pub pixel_auc: f64,
    pub fpr_limit: f64,
    pub images: usize,
    pub per_category: BTreeMap<String, Scores>,
    /// Each defect type scored together with the defect-free images.
    pub per_defect: BTreeMap<String, Scores>,
}

fn subset_scores(
    maps: &[AnomalyMap],
    gts: &[GroundTruth],
    keep: impl Fn(&GroundTruth) -> bool,
    limit: f64,
) -> Scores {
    let (m, g): (Vec<_>, Vec<_>) = maps
        .iter()
        .zip(gts)
        .filter(|(_, g)| keep(g))
        .map(|(m, g)| (m.clone(), g.clone()))
        .unzip();
    Scores {
        pro_auc: pro_curve(&m, &g)
            .and_then(|c| c.normalized_area(limit))
            .ok(),
        pixel_auc: pixel_roc_auc(&m, &g).ok(),
        images: m.len(),
    }
}

pub fn cmd_eval(cfg: &RunConfig, maps_dir: &Path, out: &Path) -> Result<()> {
    let (index, maps, gts) = load_scored(maps_dir)?;
    let limit = cfg.eval.fpr_limit;
    let curve = pro_curve(&maps, &gts)?;
    let pro_auc = curve.normalized_area(limit)?;
    let pixel_auc = pixel_roc_auc(&maps, &gts)?;

    let mut per_defect = BTreeMap::new();
    let mut defects: Vec<&str> = gts
        .iter()
        .map(|g| g.defect_type.as_str())
        .filter(|d| *d != GOOD)
        .collect();
    defects.sort_unstable();
    defects.dedup();
    for d in defects {
        let s = subset_scores(
            &maps,
            &gts,
            |g| g.defect_type == d || g.defect_type == GOOD,
            limit,
        );
        per_defect.insert(d.to_string(), s);
    }
    let per_category = BTreeMap::from([(
        index.category.clone(),
        Scores {
            pro_auc: Some(pro_auc),
            pixel_auc: Some(pixel_auc),
            images: maps.len(),
        },
    )]);
    let metrics = Metrics {
        pro_auc,
        pixel_auc,
        fpr_limit: limit,
        images: maps.len(),
        per_category,
        per_defect,
    };

    cfg.write_resolved(out)?;
    write_curve_csv(&out.join(CURVE_FILE), &curve)?;
    let path = out.join(METRICS_FILE);
    fs::write(
        &path,
        serde_json::to_vec_pretty(&metrics).expect("metrics serialize"),
    )
    .map_err(|e| Error::io(&path, e))?;
    if cfg.eval.plot {
        write_curve_plot(&out.join(PLOT_FILE), &curve, limit)?;
    }
    println!("pro_auc({limit}) = {pro_auc:.4}  pixel_auc = {pixel_auc:.4}");
    Ok(())
}

fn write_curve_csv(path: &Path, curve: &ProCurve) -> Result<()> {
    let mut text = String::from("threshold,fpr,pro\n");
    for p in &curve.points {
        text.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.pro));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// PRO over FPR on a white canvas, with a grey marker at the FPR limit.
fn write_curve_plot(path: &Path, curve: &ProCurve, limit: f64) -> Result<()> {
    const W: u32 = 400;
    const H: u32 = 300;
    const M: f64 = 20.0;
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
    let to_px = |fpr: f64, pro: f64| {
        (
            M + fpr * (W as f64 - 2.0 * M),
            H as f64 - M - pro * (H as f64 - 2.0 * M),
        )
    };
    let mut line = |a: (f64, f64), b: (f64, f64), colour: [u8; 3]| {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
                img.put_pixel(x as u32, y as u32, image::Rgb(colour));
            }
        }
    };
    line(to_px(0.0, 0.0), to_px(1.0, 0.0), [0, 0, 0]);
    line(to_px(0.0, 0.0), to_px(0.0, 1.0), [0, 0, 0]);
    line(to_px(limit, 0.0), to_px(limit, 1.0), [170, 170, 170]);
    for pair in curve.points.windows(2) {
        line(
            to_px(pair[0].fpr, pair[0].pro),
            to_px(pair[1].fpr, pair[1].pro),
            [200, 30, 30],
        );
    }
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
