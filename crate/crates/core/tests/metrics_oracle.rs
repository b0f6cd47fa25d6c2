//! AP and IoU against an exhaustive reference on random fixtures.

use lesionseg::metrics::{evaluate, ApMode, MetricConfig, MetricsReport};
use lesionseg::LesionClass;
use lesionseg_oracles::metrics::{self as oracle, Image, Mode};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random discs on an empty plane.
fn blobs(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<bool> {
    let mut plane = vec![false; h * w];
    for _ in 0..rng.random_range(0..5) {
        let (cy, cx) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
        let r: f64 = rng.random_range(0.5..5.0);
        for y in 0..h {
            for x in 0..w {
                if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                    plane[y * w + x] = true;
                }
            }
        }
    }
    plane
}

/// Ground truth plus a probability map that loosely follows it, with
/// speckle, dropped regions and values exactly at 0.5.
fn fixture(seed: u64) -> (usize, usize, Vec<Array3<f32>>, Vec<Array3<u8>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.random_range(4..=32), rng.random_range(4..=32));
    let n = rng.random_range(1..=5);
    let mut probs = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..n {
        let mut p = Array3::<f32>::zeros((4, h, w));
        let mut g = Array3::<u8>::zeros((4, h, w));
        for c in 0..4 {
            let truth = if rng.random_bool(0.2) { vec![false; h * w] } else { blobs(&mut rng, h, w) };
            let extra = blobs(&mut rng, h, w);
            let drop = rng.random_bool(0.3);
            for i in 0..h * w {
                let (y, x) = (i / w, i % w);
                g[[c, y, x]] = u8::from(truth[i]);
                let base: f32 = if truth[i] && !(drop && x < w / 2) { 0.8 } else { 0.1 };
                let mut v = base + rng.random_range(-0.35..0.35);
                if extra[i] && rng.random_bool(0.7) {
                    v = 0.9;
                }
                if rng.random_bool(0.03) {
                    v = 0.5;
                }
                p[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
        probs.push(p);
        gts.push(g);
    }
    (h, w, probs, gts)
}

fn reference(h: usize, w: usize, probs: &[Array3<f32>], gts: &[Array3<u8>], config: &MetricConfig) -> oracle::Report {
    let flat: Vec<(Vec<f32>, Vec<u8>)> = probs
        .iter()
        .zip(gts)
        .map(|(p, g)| (p.iter().copied().collect(), g.iter().copied().collect()))
        .collect();
    let images: Vec<Image> = flat.iter().map(|(p, g)| Image { probs: p, gt: g }).collect();
    let mode = match config.ap_mode {
        ApMode::Component => Mode::Component,
        ApMode::Image => Mode::Image,
    };
    oracle::evaluate(&images, 4, h, w, config.tau, config.epsilon, mode, &config.thresholds)
}

fn assert_same(report: &MetricsReport, expected: &oracle::Report, context: &str) {
    for class in LesionClass::ALL {
        let c = class.channel_index();
        assert_eq!(report.ap(class), expected.ap[c], "{context}: AP {class}");
        assert_eq!(report.iou(class), expected.iou[c], "{context}: IoU {class}");
    }
    assert_eq!(report.map, expected.map, "{context}: mAP");
    assert_eq!(report.miou, expected.miou, "{context}: mIoU");
}

#[test]
fn matches_exhaustive_reference() {
    let mut nontrivial = 0;
    for seed in 0..40 {
        let (h, w, probs, gts) = fixture(seed);
        for ap_mode in [ApMode::Component, ApMode::Image] {
            for tau in [0.5, 0.3] {
                let config = MetricConfig {
                    tau,
                    ap_mode,
                    ..MetricConfig::default()
                };
                let report = evaluate(&probs, &gts, &config).unwrap();
                let expected = reference(h, w, &probs, &gts, &config);
                assert_same(&report, &expected, &format!("seed {seed}, {ap_mode}, tau {tau}"));
                assert_eq!(report.num_images, probs.len());
                if expected.ap.iter().any(|&a| a > 0.0 && a < 1.0) {
                    nontrivial += 1;
                }
            }
        }
    }
    // The fixtures should exercise partial matches, not just 0 and 1.
    assert!(nontrivial > 40, "{nontrivial}");
}

#[test]
fn image_order_does_not_matter() {
    for seed in 100..110 {
        let (_, _, mut probs, mut gts) = fixture(seed);
        let config = MetricConfig::default();
        let a = evaluate(&probs, &gts, &config).unwrap();
        probs.reverse();
        gts.reverse();
        let b = evaluate(&probs, &gts, &config).unwrap();
        for class in LesionClass::ALL {
            assert_eq!(a.ap(class), b.ap(class));
            assert_eq!(a.iou(class), b.iou(class));
        }
    }
}

#[test]
fn perfect_prediction_scores_one() {
    let (_, _, _, gts) = fixture(7);
    let probs: Vec<Array3<f32>> = gts.iter().map(|g| g.mapv(f32::from)).collect();
    let report = evaluate(&probs, &gts, &MetricConfig::default()).unwrap();
    for class in LesionClass::ALL {
        let c = class.channel_index();
        let present = gts.iter().any(|g| g.index_axis(ndarray::Axis(0), c).iter().any(|&v| v != 0));
        assert_eq!(report.iou(class), 1.0);
        assert_eq!(report.ap(class), if present { 1.0 } else { 0.0 });
    }
}
