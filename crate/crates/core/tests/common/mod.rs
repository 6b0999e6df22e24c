//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the library code it is used to check.
#![allow(dead_code)]

use mmae::evaluation::GroundTruth;
use mmae::grid::BinaryMask;
use mmae::model::{loss, Mmae, ModelConfig};
use mmae::pyramid::PyramidConfig;
use mmae::scoring::AnomalyMap;
use mmae::ImageGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 16;

// ---------------------------------------------------------------- regions

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected regions by union-find over all neighbouring positive pairs.
pub fn regions_union_find(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for (dy, dx) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask[j] {
                    let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..h * w {
        if mask[i] {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
    }
    groups.into_values().collect()
}

// ---------------------------------------------------------------- PRO

/// Per-threshold counting: predicted = score > t.
pub fn brute_pro_fpr(scores: &[Vec<f64>], masks: &[Vec<bool>], t: f64) -> (f64, f64) {
    let mut overlaps = Vec::new();
    let (mut fp, mut neg) = (0usize, 0usize);
    for (s, m) in scores.iter().zip(masks) {
        for region in regions_union_find(m, SIDE, SIDE) {
            let hit = region.iter().filter(|&&p| s[p] > t).count();
            overlaps.push(hit as f64 / region.len() as f64);
        }
        for (v, &gt) in s.iter().zip(m) {
            if !gt {
                neg += 1;
                if *v > t {
                    fp += 1;
                }
            }
        }
    }
    (
        overlaps.iter().sum::<f64>() / overlaps.len() as f64,
        fp as f64 / neg as f64,
    )
}

/// Every distinct score in descending order, then −∞.
pub fn all_thresholds(scores: &[Vec<f64>]) -> Vec<f64> {
    let mut t: Vec<f64> = scores.iter().flatten().copied().collect();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t.push(f64::NEG_INFINITY);
    t
}

/// Area under the piecewise-linear (fpr, pro) curve clipped to
/// `[0, limit]`, divided by `limit`. Each segment is clipped on its own.
pub fn brute_pro_auc(scores: &[Vec<f64>], masks: &[Vec<bool>], limit: f64) -> f64 {
    let pts: Vec<(f64, f64)> = all_thresholds(scores)
        .into_iter()
        .map(|t| {
            let (pro, fpr) = brute_pro_fpr(scores, masks, t);
            (fpr, pro)
        })
        .collect();
    let mut area = 0.0;
    for seg in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
        if x1 <= x0 {
            continue;
        }
        let a = x0.max(0.0);
        let b = x1.min(limit);
        if b <= a {
            continue;
        }
        let at = |x: f64| y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        area += (b - a) * (at(a) + at(b)) / 2.0;
    }
    area / limit
}

pub struct Instance {
    pub scores: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
}

impl Instance {
    pub fn maps(&self) -> Vec<AnomalyMap> {
        self.scores
            .iter()
            .enumerate()
            .map(|(i, s)| AnomalyMap::new(format!("img{i}"), SIDE, SIDE, s.clone()).unwrap())
            .collect()
    }

    pub fn gts(&self) -> Vec<GroundTruth> {
        self.masks
            .iter()
            .map(|m| GroundTruth::new(BinaryMask::new(SIDE, SIDE, m.clone()).unwrap(), "defect"))
            .collect()
    }
}

/// 1–3 images of 16×16 with 1–3 rectangular or random-walk regions in
/// total. Scores are uniform, coarsely quantized (many ties) or correlated
/// with the ground truth.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let images = rng.gen_range(1..=3);
    let mut masks = vec![vec![false; SIDE * SIDE]; images];
    for _ in 0..rng.gen_range(1..=3) {
        let m = &mut masks[rng.gen_range(0..images)];
        if rng.gen_bool(0.5) {
            let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
            let (y0, x0) = (rng.gen_range(0..=SIDE - h), rng.gen_range(0..=SIDE - w));
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    m[y * SIDE + x] = true;
                }
            }
        } else {
            let (mut y, mut x) = (rng.gen_range(0..SIDE) as i64, rng.gen_range(0..SIDE) as i64);
            for _ in 0..rng.gen_range(1..12) {
                m[y as usize * SIDE + x as usize] = true;
                y = (y + rng.gen_range(-1..=1)).clamp(0, SIDE as i64 - 1);
                x = (x + rng.gen_range(-1..=1)).clamp(0, SIDE as i64 - 1);
            }
        }
    }
    let mode = rng.gen_range(0..3);
    let scores = masks
        .iter()
        .map(|m| {
            m.iter()
                .map(|&gt| match mode {
                    0 => rng.gen_range(0.0..1.0),
                    1 => rng.gen_range(0..8) as f64 / 8.0,
                    _ => (if gt { 0.5 } else { 0.0 }) + rng.gen_range(0.0..0.8),
                })
                .collect()
        })
        .collect();
    Instance { scores, masks }
}

// ---------------------------------------------------------------- memory

/// Direct read: cosine similarity, softmax, zero weights <= lambda and
/// renormalize (one-hot on the first maximum if nothing survives).
pub fn naive_read(f: &[f64], rows: &[Vec<f64>], lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let sims: Vec<f64> = rows
        .iter()
        .map(|m| f.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() / (norm(f) * norm(m)))
        .collect();
    let top = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = sims.iter().map(|s| (s - top).exp()).collect();
    let z: f64 = e.iter().sum();
    let soft: Vec<f64> = e.iter().map(|v| v / z).collect();
    let kept: f64 = soft.iter().filter(|&&w| w > lambda).sum();
    let w: Vec<f64> = if kept > 0.0 {
        soft.iter()
            .map(|&v| if v > lambda { v / kept } else { 0.0 })
            .collect()
    } else {
        let best = (0..soft.len()).fold(0, |b, j| if soft[j] > soft[b] { j } else { b });
        (0..soft.len())
            .map(|j| if j == best { 1.0 } else { 0.0 })
            .collect()
    };
    let mut out = vec![0.0; f.len()];
    for (wj, m) in w.iter().zip(rows) {
        for (o, v) in out.iter_mut().zip(m) {
            *o += wj * v;
        }
    }
    (w, out)
}

pub fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// ---------------------------------------------------------------- models

pub fn micro_config(levels: usize, slots: usize) -> ModelConfig {
    ModelConfig {
        pyramid: PyramidConfig::new(levels, 0.5, (16, 16)),
        channels: 3,
        latent_dim: 8,
        memory_slots: slots,
        channel_base: 2,
        target_spatial: 8,
        fuser_hidden: 4,
        shrink_threshold: None,
    }
}

pub fn random_image(rng: &mut ChaCha8Rng, side: usize, channels: usize) -> ImageGrid {
    let data = (0..side * side * channels)
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    ImageGrid::from_planar(side, side, channels, data).unwrap()
}

pub struct GradCheck {
    pub relative_error: f64,
    pub kink_distance: f64,
    pub coordinates: usize,
}

/// Compares analytic parameter gradients of the full loss with central
/// differences at `step` on a few coordinates of every parameter tensor.
/// Returns `None` when the point lies within `min_kink` of a shrinkage kink.
pub fn gradient_check_point(seed: u64, alpha: f64, step: f64, min_kink: f64) -> Option<GradCheck> {
    let cfg = micro_config(2, 4);
    let lambda = cfg.shrink_threshold();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Mmae::new(cfg, &mut rng).unwrap();
    let x = random_image(&mut rng, 16, 3);

    let (out, cache) = model.forward_with_cache(&x).unwrap();
    let kink = cache.kink_distance(lambda);
    if kink <= min_kink {
        return None;
    }
    let g: Vec<f64> = out
        .x_hat
        .data()
        .iter()
        .zip(x.data())
        .map(|(r, t)| 2.0 * (r - t))
        .collect();
    model.zero_grad();
    model.backward(&cache, &g, alpha);

    let coords: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| {
            let n = p.value.len();
            (0..2)
                .map(|_| (pi, rng.gen_range(0..n)))
                .collect::<Vec<_>>()
        })
        .collect();
    let analytic: Vec<f64> = {
        let params = model.params();
        coords.iter().map(|&(pi, i)| params[pi].grad[i]).collect()
    };
    let mut numeric = Vec::with_capacity(coords.len());
    for &(pi, i) in &coords {
        let orig = model.params()[pi].value[i];
        let eval = |v: f64, model: &mut Mmae| {
            model.params_mut()[pi].value[i] = v;
            let out = model.forward(&x).unwrap();
            loss(&x, &out, alpha).unwrap()
        };
        let plus = eval(orig + step, &mut model);
        let minus = eval(orig - step, &mut model);
        model.params_mut()[pi].value[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = norm(&analytic).max(norm(&numeric)).max(1e-12);
    Some(GradCheck {
        relative_error: diff / scale,
        kink_distance: kink,
        coordinates: coords.len(),
    })
}
