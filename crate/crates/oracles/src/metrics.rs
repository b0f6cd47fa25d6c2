//! Exhaustive metric oracle. Components are labelled with union-find over
//! 8-neighbourhoods, every predicted/ground-truth component pair is
//! enumerated, and IoU comparisons during matching use exact integer
//! cross-multiplication.

use std::cmp::Ordering;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Component,
    Image,
}

/// One image: `channels` class planes of `height × width`, row-major.
pub struct Image<'a> {
    pub probs: &'a [f32],
    pub gt: &'a [u8],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub ap: Vec<f64>,
    pub iou: Vec<f64>,
    pub map: f64,
    pub miou: f64,
    /// Per class: matched pair counts per threshold and total predictions.
    pub hits: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Components as sets of pixel indices, ordered by their smallest index.
pub fn components(mask: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..mask.len()).collect();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            for (dy, dx) in [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1)] {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || nx >= width as i64 {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if mask[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..mask.len() {
        if mask[i] {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|c| c[0]);
    out
}

/// IoU as an exact fraction `(intersection, union)`.
fn overlap(a: &[usize], b: &[usize]) -> (usize, usize) {
    let inter = a.iter().filter(|p| b.contains(p)).count();
    (inter, a.len() + b.len() - inter)
}

fn cmp_fraction(a: (usize, usize), b: (usize, usize)) -> Ordering {
    (a.0 as u128 * b.1 as u128).cmp(&(b.0 as u128 * a.1 as u128))
}

/// Greedy matching: repeatedly take the highest-IoU unused pair (lowest
/// prediction index, then lowest ground-truth index on ties).
fn greedy(pred: &[Vec<usize>], gt: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut matched = Vec::new();
    loop {
        let mut best: Option<((usize, usize), usize, usize)> = None;
        for (i, p) in pred.iter().enumerate() {
            if pred_used[i] {
                continue;
            }
            for (j, g) in gt.iter().enumerate() {
                if gt_used[j] {
                    continue;
                }
                let f = overlap(p, g);
                if f.0 == 0 {
                    continue;
                }
                if best.is_none_or(|(bf, _, _)| cmp_fraction(f, bf) == Ordering::Greater) {
                    best = Some((f, i, j));
                }
            }
        }
        match best {
            Some((f, i, j)) => {
                pred_used[i] = true;
                gt_used[j] = true;
                matched.push(f);
            }
            None => return matched,
        }
    }
}

fn meets(f: (usize, usize), t: f64) -> bool {
    f.0 as f64 / f.1 as f64 >= t
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    images: &[Image],
    channels: usize,
    height: usize,
    width: usize,
    tau: f64,
    epsilon: f64,
    mode: Mode,
    thresholds: &[f64],
) -> Report {
    let plane = height * width;
    let mut hits = vec![vec![0usize; thresholds.len()]; channels];
    let mut predictions = vec![0usize; channels];
    let mut inter = vec![0u64; channels];
    let mut union = vec![0u64; channels];
    for image in images {
        assert_eq!(image.probs.len(), channels * plane);
        assert_eq!(image.gt.len(), channels * plane);
        for c in 0..channels {
            let pred: Vec<bool> = image.probs[c * plane..(c + 1) * plane]
                .iter()
                .map(|&p| f64::from(p) > tau)
                .collect();
            let gt: Vec<bool> = image.gt[c * plane..(c + 1) * plane].iter().map(|&g| g != 0).collect();
            for (&p, &g) in pred.iter().zip(&gt) {
                inter[c] += u64::from(p && g);
                union[c] += u64::from(p || g);
            }
            let matched = match mode {
                Mode::Component => {
                    let pc = components(&pred, height, width);
                    let gc = components(&gt, height, width);
                    predictions[c] += pc.len();
                    greedy(&pc, &gc)
                }
                Mode::Image => {
                    let p: Vec<usize> = (0..plane).filter(|&i| pred[i]).collect();
                    let g: Vec<usize> = (0..plane).filter(|&i| gt[i]).collect();
                    if p.is_empty() {
                        continue;
                    }
                    predictions[c] += 1;
                    greedy(&[p], &[g])
                }
            };
            for (k, &t) in thresholds.iter().enumerate() {
                hits[c][k] += matched.iter().filter(|&&f| meets(f, t)).count();
            }
        }
    }
    let ap: Vec<f64> = (0..channels)
        .map(|c| {
            let n = predictions[c];
            let total: f64 = hits[c]
                .iter()
                .map(|&h| if n == 0 { 0.0 } else { h as f64 / n as f64 })
                .sum();
            total / thresholds.len() as f64
        })
        .collect();
    let iou: Vec<f64> = (0..channels)
        .map(|c| (inter[c] as f64 + epsilon) / (union[c] as f64 + epsilon))
        .collect();
    Report {
        map: ap.iter().sum::<f64>() / channels as f64,
        miou: iou.iter().sum::<f64>() / channels as f64,
        ap,
        iou,
        hits,
        predictions,
    }
}
