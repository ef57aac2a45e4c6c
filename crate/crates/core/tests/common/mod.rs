#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use condlane::geometry::{decode_lane, encode_rowwise_targets, GridSpec, ImageSpec, LanePolyline, Point};
use condlane::metrics::MatchConfig;

/// Straight (`bend == 0`) or quadratic lane sampled at 24 points, fully
/// inside `image` and spanning at least a third of its height.
pub fn random_lane(rng: &mut ChaCha8Rng, image: &ImageSpec, quadratic: bool) -> LanePolyline {
    let (w, h) = (image.width as f64 - 1.0, image.height as f64 - 1.0);
    loop {
        let y_b = rng.gen_range(0.6 * h..=h);
        let y_t = rng.gen_range(0.0..=y_b - h / 3.0);
        let x_b = rng.gen_range(0.0..=w);
        let x_t = rng.gen_range(0.0..=w);
        let bend = if quadratic { rng.gen_range(-0.3 * w..=0.3 * w) } else { 0.0 };
        let pts: Vec<Point> = (0..24)
            .map(|k| {
                let t = k as f64 / 23.0;
                Point::new(x_b + (x_t - x_b) * t + bend * t * (1.0 - t), y_b + (y_t - y_b) * t)
            })
            .collect();
        if pts.iter().all(|p| (0.0..=w).contains(&p.x)) {
            return LanePolyline::new(pts).unwrap();
        }
    }
}

/// Largest per-row x error of `decode(encode(lane))` with perfect targets,
/// without and with offsets.
pub fn round_trip_errors(lane: &LanePolyline, grid: &GridSpec) -> (f64, f64) {
    let t = encode_rowwise_targets(lane, grid, 5).unwrap();
    let exp: Vec<f64> = t.loc.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect();
    let logits: Vec<[f64; 2]> = t
        .valid
        .iter()
        .map(|&v| if v { [0.0, 1.0] } else { [1.0, 0.0] })
        .collect();
    let err = |off: Option<&Array2<f64>>| {
        let d = decode_lane(&exp, &logits, off, grid).unwrap().unwrap();
        assert_eq!(d.len(), t.n_valid());
        d.points()
            .iter()
            .map(|p| (p.x - lane.x_at(p.y).unwrap()).abs())
            .fold(0.0, f64::max)
    };
    (err(None), err(Some(&t.offset_map)))
}

fn dist_sq_to_segment(px: f64, py: f64, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b.x - a.x, b.y - a.y);
    let l2 = vx * vx + vy * vy;
    let t = if l2 == 0.0 {
        0.0
    } else {
        (((px - a.x) * vx + (py - a.y) * vy) / l2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.x + t * vx, a.y + t * vy);
    (px - qx).powi(2) + (py - qy).powi(2)
}

fn covered(lane: &LanePolyline, u: usize, v: usize, r: f64) -> bool {
    lane.points()
        .windows(2)
        .any(|s| dist_sq_to_segment(u as f64, v as f64, s[0], s[1]) <= r * r)
}

/// IoU by visiting every canvas pixel.
pub fn pixel_count_iou(a: &LanePolyline, b: &LanePolyline, cfg: &MatchConfig) -> f64 {
    let r = cfg.line_width / 2.0;
    let (mut inter, mut union) = (0usize, 0usize);
    for v in 0..cfg.eval_size.height {
        for u in 0..cfg.eval_size.width {
            let (ia, ib) = (covered(a, u, v, r), covered(b, u, v, r));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// TP counts reachable by some maximum-total-IoU one-to-one assignment,
/// found by enumerating every assignment.
pub fn exhaustive_tp(iou: &[Vec<f64>], n_gts: usize, threshold: f64) -> BTreeSet<usize> {
    fn walk(
        iou: &[Vec<f64>],
        i: usize,
        used: &mut Vec<bool>,
        total: f64,
        tp: usize,
        threshold: f64,
        best: &mut (f64, BTreeSet<usize>),
    ) {
        if i == iou.len() {
            if total > best.0 + 1e-12 {
                *best = (total, BTreeSet::from([tp]));
            } else if (total - best.0).abs() <= 1e-12 {
                best.1.insert(tp);
            }
            return;
        }
        walk(iou, i + 1, used, total, tp, threshold, best);
        for g in 0..used.len() {
            if !used[g] {
                used[g] = true;
                let hit = (iou[i][g] >= threshold) as usize;
                walk(iou, i + 1, used, total + iou[i][g], tp + hit, threshold, best);
                used[g] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, BTreeSet::new());
    walk(iou, 0, &mut vec![false; n_gts], 0.0, 0, threshold, &mut best);
    best.1
}
