//! Lane evaluation: stroked-mask IoU with optimal one-to-one matching
//! (CULane style) and point accuracy on fixed sample rows (TuSimple style).
//!
//! A lane mask is the set of integer pixels `(u, v)` on the evaluation canvas
//! whose distance to some segment of the polyline is at most
//! `line_width / 2`. That is a stroke with round caps and joins.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImageSpec, LanePolyline, Point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    pub line_width: f64,
    pub iou_threshold: f64,
    pub eval_size: ImageSpec,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            line_width: 30.0,
            iou_threshold: 0.5,
            eval_size: ImageSpec {
                height: 590,
                width: 1640,
            },
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.line_width >= 1.0) {
            return Err(Error::ConfigField {
                field: "metrics.line_width".into(),
                msg: format!("must be >= 1, got {}", self.line_width),
            });
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::ConfigField {
                field: "metrics.iou_threshold".into(),
                msg: format!("must lie in (0, 1], got {}", self.iou_threshold),
            });
        }
        Ok(())
    }

    /// Maps a lane given in `image` pixels onto the evaluation canvas.
    pub fn to_canvas(&self, lane: &LanePolyline, image: &ImageSpec) -> LanePolyline {
        lane.scaled(
            self.eval_size.width as f64 / image.width as f64,
            self.eval_size.height as f64 / image.height as f64,
        )
    }
}

fn segment_dist_sq(p: (f64, f64), a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq == 0.0 {
        0.0
    } else {
        (((p.0 - a.x) * dx + (p.1 - a.y) * dy) / len_sq).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.x + t * dx, a.y + t * dy);
    (p.0 - cx).powi(2) + (p.1 - cy).powi(2)
}

/// Whether pixel `(u, v)` belongs to the stroked mask of `lane`.
pub fn pixel_in_stroke(lane: &LanePolyline, u: usize, v: usize, line_width: f64) -> bool {
    let r = line_width / 2.0;
    let p = (u as f64, v as f64);
    lane.points()
        .windows(2)
        .any(|s| segment_dist_sq(p, s[0], s[1]) <= r * r)
}

/// Sorted, deduplicated row-major pixel indices of a lane's mask.
pub fn rasterize(lane: &LanePolyline, cfg: &MatchConfig) -> Vec<u32> {
    let (w, h) = (cfg.eval_size.width, cfg.eval_size.height);
    let r = cfg.line_width / 2.0;
    let mut px = Vec::new();
    for s in lane.points().windows(2) {
        let (a, b) = (s[0], s[1]);
        let u0 = (a.x.min(b.x) - r).ceil().max(0.0);
        let u1 = (a.x.max(b.x) + r).floor().min(w as f64 - 1.0);
        let v0 = (a.y.min(b.y) - r).ceil().max(0.0);
        let v1 = (a.y.max(b.y) + r).floor().min(h as f64 - 1.0);
        if u0 > u1 || v0 > v1 {
            continue;
        }
        for v in v0 as usize..=v1 as usize {
            for u in u0 as usize..=u1 as usize {
                if segment_dist_sq((u as f64, v as f64), a, b) <= r * r {
                    px.push((v * w + u) as u32);
                }
            }
        }
    }
    px.sort_unstable();
    px.dedup();
    px
}

fn sorted_intersection(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn mask_iou(a: &[u32], b: &[u32]) -> f64 {
    let inter = sorted_intersection(a, b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of the stroked masks of two lanes already on the evaluation canvas.
pub fn lane_iou(a: &LanePolyline, b: &LanePolyline, cfg: &MatchConfig) -> f64 {
    mask_iou(&rasterize(a, cfg), &rasterize(b, cfg))
}

pub fn iou_matrix(preds: &[LanePolyline], gts: &[LanePolyline], cfg: &MatchConfig) -> Vec<Vec<f64>> {
    let pm: Vec<_> = preds.iter().map(|l| rasterize(l, cfg)).collect();
    let gm: Vec<_> = gts.iter().map(|l| rasterize(l, cfg)).collect();
    pm.iter()
        .map(|p| gm.iter().map(|g| mask_iou(p, g)).collect())
        .collect()
}

/// Maximum-weight one-to-one assignment on a rectangular weight matrix
/// (Hungarian method with potentials). Returns `(row, col)` pairs.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let n = rows.max(cols);
    // square cost matrix, 1-based for the classic formulation
    let cost = |i: usize, j: usize| -> f64 {
        if i <= rows && j <= cols {
            -weights[i - 1][j - 1]
        } else {
            0.0
        }
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n)
        .filter(|&j| p[j] >= 1 && p[j] <= rows && j <= cols)
        .map(|j| (p[j] - 1, j - 1))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(pred, gt)` pairs of the optimal assignment whose IoU reaches `threshold`.
pub fn matched_pairs(iou: &[Vec<f64>], threshold: f64) -> Vec<(usize, usize)> {
    max_weight_assignment(iou)
        .into_iter()
        .filter(|&(p, g)| iou[p][g] >= threshold)
        .collect()
}

/// Counts for one image from its IoU matrix (`preds x gts`).
pub fn score_iou_matrix(iou: &[Vec<f64>], n_preds: usize, n_gts: usize, threshold: f64) -> Counts {
    let tp = matched_pairs(iou, threshold).len();
    Counts {
        tp,
        fp: n_preds - tp,
        fn_: n_gts - tp,
    }
}

/// One report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub category: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ReportRecord {
    fn new(category: &str, c: Counts) -> Self {
        Self {
            category: category.to_string(),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub total: Counts,
    pub per_category: BTreeMap<String, Counts>,
}

impl EvalReport {
    pub fn precision(&self) -> f64 {
        self.total.precision()
    }

    pub fn recall(&self) -> f64 {
        self.total.recall()
    }

    pub fn f1(&self) -> f64 {
        self.total.f1()
    }

    /// Category rows in name order, then the `total` row.
    pub fn records(&self) -> Vec<ReportRecord> {
        let mut out: Vec<_> = self
            .per_category
            .iter()
            .map(|(k, c)| ReportRecord::new(k, *c))
            .collect();
        out.push(ReportRecord::new("total", self.total));
        out
    }

    /// One JSON object per line, fields in fixed order.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in self.records() {
            s.push_str(&serde_json::to_string(&r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Scores a dataset. `preds[i]` and `gts[i]` are the lanes of image `i` on
/// the evaluation canvas; `categories`, when given, tags each image.
pub fn match_and_score(
    preds: &[Vec<LanePolyline>],
    gts: &[Vec<LanePolyline>],
    categories: Option<&[String]>,
    cfg: &MatchConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} prediction sets for {} images",
            preds.len(),
            gts.len()
        )));
    }
    if let Some(c) = categories {
        if c.len() != gts.len() {
            return Err(Error::Shape(format!("{} category tags for {} images", c.len(), gts.len())));
        }
    }
    let mut report = EvalReport::default();
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        let iou = iou_matrix(p, g, cfg);
        let c = score_iou_matrix(&iou, p.len(), g.len(), cfg.iou_threshold);
        report.total.add(c);
        if let Some(cats) = categories {
            report.per_category.entry(cats[i].clone()).or_default().add(c);
        }
    }
    Ok(report)
}

/// Lanes of one image sampled at fixed rows; negative abscissae mark absent
/// points (the format uses -2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledLanes {
    pub h_samples: Vec<f64>,
    pub lanes: Vec<Vec<f64>>,
}

impl SampledLanes {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lanes.iter().find(|l| l.len() != self.h_samples.len()) {
            return Err(Error::Format(format!(
                "lane has {} entries but there are {} h_samples",
                l.len(),
                self.h_samples.len()
            )));
        }
        Ok(())
    }

    /// Samples polylines at `h_samples`; rows outside a lane's span get -2.
    pub fn from_polylines(lanes: &[LanePolyline], h_samples: &[f64]) -> Self {
        Self {
            h_samples: h_samples.to_vec(),
            lanes: lanes
                .iter()
                .map(|l| h_samples.iter().map(|&y| l.x_at(y).unwrap_or(-2.0)).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TusimpleReport {
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub f1: f64,
    pub tp: usize,
    pub n_pred: usize,
    pub n_gt: usize,
}

pub fn tusimple_score(
    preds: &[SampledLanes],
    gts: &[SampledLanes],
    pixel_tol: f64,
    lane_acc_threshold: f64,
) -> Result<TusimpleReport> {
    if preds.len() != gts.len() {
        return Err(Error::Format(format!(
            "{} prediction records for {} ground-truth records",
            preds.len(),
            gts.len()
        )));
    }
    let (mut correct, mut total) = (0usize, 0usize);
    let mut counts = Counts::default();
    let (mut n_pred, mut n_gt) = (0, 0);
    for (p, g) in preds.iter().zip(gts) {
        p.validate()?;
        g.validate()?;
        if p.h_samples != g.h_samples {
            return Err(Error::Format(
                "prediction and ground truth use different h_samples".into(),
            ));
        }
        let gt_lanes: Vec<&Vec<f64>> = g.lanes.iter().filter(|l| l.iter().any(|&x| x >= 0.0)).collect();
        let pred_lanes: Vec<&Vec<f64>> = p.lanes.iter().filter(|l| l.iter().any(|&x| x >= 0.0)).collect();
        let mut matched = 0;
        for gl in &gt_lanes {
            let n_pts = gl.iter().filter(|&&x| x >= 0.0).count();
            let best = pred_lanes
                .iter()
                .map(|pl| {
                    gl.iter()
                        .zip(pl.iter())
                        .filter(|(&gx, &px)| gx >= 0.0 && px >= 0.0 && (px - gx).abs() <= pixel_tol)
                        .count()
                })
                .max()
                .unwrap_or(0);
            correct += best;
            total += n_pts;
            if best as f64 / n_pts as f64 > lane_acc_threshold {
                matched += 1;
            }
        }
        n_pred += pred_lanes.len();
        n_gt += gt_lanes.len();
        counts.add(Counts {
            tp: matched,
            fp: pred_lanes.len().saturating_sub(matched),
            fn_: gt_lanes.len() - matched,
        });
    }
    Ok(TusimpleReport {
        accuracy: ratio(correct, total),
        fp_rate: ratio(counts.fp, n_pred),
        fn_rate: ratio(counts.fn_, n_gt),
        f1: counts.f1(),
        tp: counts.tp,
        n_pred,
        n_gt,
    })
}
