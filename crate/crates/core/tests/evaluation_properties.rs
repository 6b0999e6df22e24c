mod common;

use common::{random_instance, regions_union_find, Instance, SIDE};
use mmae::evaluation::{
    connected_components, pixel_roc_auc, pro_at_threshold, pro_auc, GroundTruth,
};
use mmae::grid::BinaryMask;
use mmae::scoring::AnomalyMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn canonical(mut regions: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for r in &mut regions {
        r.sort_unstable();
    }
    regions.sort();
    regions
}

#[test]
fn components_match_union_find_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let density = rng.gen_range(0.05..0.7);
        let data: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density)).collect();
        let mask = BinaryMask::new(h, w, data.clone()).unwrap();
        assert_eq!(
            canonical(connected_components(&mask)),
            canonical(regions_union_find(&data, h, w))
        );
    }
}

#[test]
fn diagonal_touching_pixels_form_one_region() {
    let mut mask = BinaryMask::empty(3, 3);
    mask.set(0, 0, true);
    mask.set(1, 1, true);
    mask.set(2, 0, true);
    assert_eq!(connected_components(&mask).len(), 1);
}

#[test]
fn thresholds_between_scores_agree_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let inst = random_instance(&mut rng);
        let t = rng.gen_range(-0.1..1.4);
        let (pro, fpr) = pro_at_threshold(&inst.maps(), &inst.gts(), t).unwrap();
        let (bp, bf) = common::brute_pro_fpr(&inst.scores, &inst.masks, t);
        assert!((pro - bp).abs() < 1e-12 && (fpr - bf).abs() < 1e-12);
    }
}

#[test]
fn fpr_limit_variants_agree_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let limit = rng.gen_range(0.01..=1.0);
        let a = pro_auc(&inst.maps(), &inst.gts(), limit).unwrap();
        let b = common::brute_pro_auc(&inst.scores, &inst.masks, limit);
        assert!((a - b).abs() < 1e-9, "{a} vs {b} at limit {limit}");
    }
}

/// Mann–Whitney by enumerating every positive/negative pair.
fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn single_map(scores: Vec<f64>, labels: Vec<bool>) -> (Vec<AnomalyMap>, Vec<GroundTruth>) {
    let n = scores.len();
    (
        vec![AnomalyMap::new("m", 1, n, scores).unwrap()],
        vec![GroundTruth::new(
            BinaryMask::new(1, n, labels).unwrap(),
            "d",
        )],
    )
}

fn instance_strategy() -> impl Strategy<Value = u64> {
    any::<u64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pro_auc_is_rank_invariant(seed in instance_strategy(), power in 0.2f64..4.0, shift in 0.0f64..3.0) {
        let inst = random_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let transformed = Instance {
            scores: inst.scores.iter().map(|s| s.iter().map(|v| v.powf(power) * 7.0 + shift).collect()).collect(),
            masks: inst.masks.clone(),
        };
        let a = pro_auc(&inst.maps(), &inst.gts(), 0.3).unwrap();
        let b = pro_auc(&transformed.maps(), &transformed.gts(), 0.3).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn roc_auc_matches_pairs_and_flips(
        raw in proptest::collection::vec((0u8..6, any::<bool>()), 2..60),
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 5.0).collect();
        let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let (m, g) = single_map(scores.clone(), labels.clone());
        let a = pixel_roc_auc(&m, &g).unwrap();
        prop_assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-12);
        let (m, g) = single_map(scores, labels.iter().map(|l| !l).collect());
        let flipped = pixel_roc_auc(&m, &g).unwrap();
        prop_assert!((flipped - (1.0 - a)).abs() < 1e-12);
    }
}

#[test]
fn single_class_inputs_are_rejected() {
    let (m, g) = single_map(vec![0.1, 0.2], vec![false, false]);
    assert!(pixel_roc_auc(&m, &g).is_err());
    assert!(pro_auc(&m, &g, 0.3).is_err());
    let (m, g) = single_map(vec![0.1, 0.2], vec![true, true]);
    assert!(pixel_roc_auc(&m, &g).is_err());
    assert!(pro_at_threshold(&m, &g, 0.0).is_err());
}

#[test]
fn misaligned_inputs_are_rejected() {
    let inst = random_instance(&mut ChaCha8Rng::seed_from_u64(5));
    let mut gts = inst.gts();
    gts.push(GroundTruth::new(BinaryMask::empty(SIDE, SIDE), "good"));
    assert!(pro_auc(&inst.maps(), &gts, 0.3).is_err());
}
