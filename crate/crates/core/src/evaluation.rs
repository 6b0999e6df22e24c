//! Per-region-overlap (PRO) curves, their normalized area, and pixel ROC-AUC.
//!
//! Ground-truth regions are the 8-connected components of each mask. At a
//! threshold `t` a pixel is predicted anomalous iff its score is `> t`. PRO
//! is the mean, over every region in the dataset, of the fraction of the
//! region that is predicted; FPR is pooled over all negative pixels of the
//! dataset.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BinaryMask;
use crate::scoring::AnomalyMap;

/// Above this many distinct scores the sweep uses quantile-spaced thresholds.
pub const MAX_EXACT_THRESHOLDS: usize = 5000;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub mask: BinaryMask,
    pub defect_type: String,
}

impl GroundTruth {
    pub fn new(mask: BinaryMask, defect_type: impl Into<String>) -> Self {
        GroundTruth {
            mask,
            defect_type: defect_type.into(),
        }
    }
}

/// Maximal 8-connected sets of positive pixels, as row-major indices.
/// Components are ordered by their first pixel in raster order.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let (h, w) = mask.resolution();
    let mut seen = vec![false; h * w];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || !mask.data()[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut component = Vec::new();
        while let Some(p) = queue.pop_front() {
            component.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && mask.data()[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        component.sort_unstable();
        components.push(component);
    }
    components
}

fn check_aligned(maps: &[AnomalyMap], gts: &[GroundTruth]) -> Result<()> {
    if maps.len() != gts.len() {
        return Err(Error::Evaluation(format!(
            "{} anomaly maps but {} ground-truth masks",
            maps.len(),
            gts.len()
        )));
    }
    for (m, g) in maps.iter().zip(gts) {
        if m.resolution() != g.mask.resolution() {
            return Err(Error::Evaluation(format!(
                "map {} is {:?} but its mask is {:?}",
                m.source_id,
                m.resolution(),
                g.mask.resolution()
            )));
        }
    }
    Ok(())
}

/// `(pro, fpr)` at a single threshold.
pub fn pro_at_threshold(maps: &[AnomalyMap], gts: &[GroundTruth], t: f64) -> Result<(f64, f64)> {
    check_aligned(maps, gts)?;
    let mut overlap_sum = 0.0;
    let mut regions = 0usize;
    let mut false_pos = 0usize;
    let mut negatives = 0usize;
    for (m, g) in maps.iter().zip(gts) {
        for region in connected_components(&g.mask) {
            let hit = region.iter().filter(|&&p| m.scores()[p] > t).count();
            overlap_sum += hit as f64 / region.len() as f64;
            regions += 1;
        }
        for (s, &pos) in m.scores().iter().zip(g.mask.data()) {
            if !pos {
                negatives += 1;
                if *s > t {
                    false_pos += 1;
                }
            }
        }
    }
    if regions == 0 {
        return Err(Error::Evaluation(
            "no ground-truth regions in the dataset".into(),
        ));
    }
    if negatives == 0 {
        return Err(Error::Evaluation(
            "no negative pixels in the dataset".into(),
        ));
    }
    Ok((
        overlap_sum / regions as f64,
        false_pos as f64 / negatives as f64,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub pro: f64,
}

/// Points ordered by decreasing threshold, hence non-decreasing FPR. The
/// first point (threshold = max score) predicts nothing; the last
/// (threshold = −∞) predicts everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProCurve {
    pub points: Vec<ProPoint>,
}

/// Thresholds to sweep, descending: the distinct scores, or quantile-spaced
/// picks among them when there are too many, then −∞.
fn sweep_thresholds(maps: &[AnomalyMap]) -> Vec<f64> {
    let mut distinct: Vec<f64> = maps
        .iter()
        .flat_map(|m| m.scores().iter().copied())
        .collect();
    distinct.sort_unstable_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let mut out = if distinct.len() <= MAX_EXACT_THRESHOLDS {
        distinct
    } else {
        let last = distinct.len() - 1;
        let n = MAX_EXACT_THRESHOLDS;
        let mut picks: Vec<f64> = (0..n)
            .map(|i| distinct[(i as f64 * last as f64 / (n - 1) as f64).round() as usize])
            .collect();
        picks.dedup();
        picks
    };
    out.push(f64::NEG_INFINITY);
    out
}

/// Full PRO curve in one sorted sweep over all pixels.
pub fn pro_curve(maps: &[AnomalyMap], gts: &[GroundTruth]) -> Result<ProCurve> {
    check_aligned(maps, gts)?;

    struct Pixel {
        score: f64,
        /// Index into `region_sizes`, or `None` for a negative pixel.
        region: Option<usize>,
    }
    let mut pixels = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for (m, g) in maps.iter().zip(gts) {
        let mut region_of = vec![None; m.scores().len()];
        for region in connected_components(&g.mask) {
            for &p in &region {
                region_of[p] = Some(region_sizes.len());
            }
            region_sizes.push(region.len());
        }
        pixels.extend(
            m.scores()
                .iter()
                .zip(region_of)
                .map(|(&score, region)| Pixel { score, region }),
        );
    }
    let negatives = pixels.iter().filter(|p| p.region.is_none()).count();
    if region_sizes.is_empty() {
        return Err(Error::Evaluation(
            "no ground-truth regions in the dataset".into(),
        ));
    }
    if negatives == 0 {
        return Err(Error::Evaluation(
            "no negative pixels in the dataset".into(),
        ));
    }
    pixels.sort_unstable_by(|a, b| b.score.total_cmp(&a.score));

    let mut covered = vec![0usize; region_sizes.len()];
    let mut false_pos = 0usize;
    let mut next = 0;
    let mut points = Vec::new();
    for t in sweep_thresholds(maps) {
        while next < pixels.len() && pixels[next].score > t {
            match pixels[next].region {
                Some(r) => covered[r] += 1,
                None => false_pos += 1,
            }
            next += 1;
        }
        let pro = covered
            .iter()
            .zip(&region_sizes)
            .map(|(&c, &n)| c as f64 / n as f64)
            .sum::<f64>()
            / region_sizes.len() as f64;
        points.push(ProPoint {
            threshold: t,
            fpr: false_pos as f64 / negatives as f64,
            pro,
        });
    }
    Ok(ProCurve { points })
}

impl ProCurve {
    /// Trapezoidal area under PRO over FPR in `[0, fpr_limit]`, with linear
    /// interpolation at the limit, divided by `fpr_limit`.
    pub fn normalized_area(&self, fpr_limit: f64) -> Result<f64> {
        if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
            return Err(Error::Evaluation(format!(
                "fpr_limit must lie in (0, 1], got {fpr_limit}"
            )));
        }
        let mut area = 0.0;
        for pair in self.points.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a.fpr >= fpr_limit {
                break;
            }
            if b.fpr <= fpr_limit {
                area += (b.fpr - a.fpr) * (a.pro + b.pro) / 2.0;
            } else {
                let pro_at_limit = a.pro + (b.pro - a.pro) * (fpr_limit - a.fpr) / (b.fpr - a.fpr);
                area += (fpr_limit - a.fpr) * (a.pro + pro_at_limit) / 2.0;
                break;
            }
        }
        Ok(area / fpr_limit)
    }
}

/// Normalized PRO-AUC up to `fpr_limit` (1.0 for a perfect detector).
pub fn pro_auc(maps: &[AnomalyMap], gts: &[GroundTruth], fpr_limit: f64) -> Result<f64> {
    pro_curve(maps, gts)?.normalized_area(fpr_limit)
}

/// Rank-based ROC-AUC over every pixel of the dataset; ties count one half.
pub fn pixel_roc_auc(maps: &[AnomalyMap], gts: &[GroundTruth]) -> Result<f64> {
    check_aligned(maps, gts)?;
    let mut pixels: Vec<(f64, bool)> = maps
        .iter()
        .zip(gts)
        .flat_map(|(m, g)| {
            m.scores()
                .iter()
                .copied()
                .zip(g.mask.data().iter().copied())
        })
        .collect();
    let positives = pixels.iter().filter(|p| p.1).count();
    let negatives = pixels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Evaluation(
            "ROC-AUC needs at least one positive and one negative pixel".into(),
        ));
    }
    pixels.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pixels.len() {
        let mut j = i;
        while j < pixels.len() && pixels[j].0 == pixels[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * pixels[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}
