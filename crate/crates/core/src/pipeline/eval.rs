//! Batch inference and scoring against ground-truth lanes.

use candle_core::Tensor;

use crate::error::Result;
use crate::geometry::{GridSpec, ImageSpec, LanePolyline};
use crate::metrics::{iou_matrix, match_and_score, matched_pairs, EvalReport, MatchConfig};

use super::model::{LaneDetector, ImageDetections};

/// Runs detection over `images` (`3 x H x W` each) in chunks.
pub fn detect_all(model: &LaneDetector, images: &[Tensor], threshold: f64, batch_size: usize) -> Result<Vec<ImageDetections>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let batch = Tensor::stack(chunk, 0)?;
        out.extend(model.detect(&batch, threshold)?);
    }
    Ok(out)
}

/// Matching of one image on the evaluation canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    /// `(pred, gt)` pairs at or above the IoU threshold.
    pub pairs: Vec<(usize, usize)>,
    pub n_pred: usize,
    pub n_gt: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub matches: Vec<ImageMatch>,
}

/// Scores lanes given in `image` pixels on the canvas of `cfg`.
pub fn evaluate_lanes(
    preds: &[Vec<LanePolyline>],
    gts: &[Vec<LanePolyline>],
    categories: Option<&[String]>,
    image: &ImageSpec,
    cfg: &MatchConfig,
) -> Result<Evaluation> {
    let canvas = |sets: &[Vec<LanePolyline>]| -> Vec<Vec<LanePolyline>> {
        sets.iter()
            .map(|ls| ls.iter().map(|l| cfg.to_canvas(l, image)).collect())
            .collect()
    };
    let (cp, cg) = (canvas(preds), canvas(gts));
    let report = match_and_score(&cp, &cg, categories, cfg)?;
    let matches = cp
        .iter()
        .zip(&cg)
        .map(|(p, g)| ImageMatch {
            pairs: matched_pairs(&iou_matrix(p, g, cfg), cfg.iou_threshold),
            n_pred: p.len(),
            n_gt: g.len(),
        })
        .collect();
    Ok(Evaluation { report, matches })
}

/// Mean absolute horizontal error, in image pixels, over the grid rows
/// shared by each matched pair. Returns `(sum, count)`.
pub fn row_error(
    preds: &[Vec<LanePolyline>],
    gts: &[Vec<LanePolyline>],
    matches: &[ImageMatch],
    grid: &GridSpec,
) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for ((p, g), m) in preds.iter().zip(gts).zip(matches) {
        for &(pi, gi) in &m.pairs {
            for r in 0..grid.rows {
                let y = grid.row_y(r);
                if let (Some(a), Some(b)) = (p[pi].x_at(y), g[gi].x_at(y)) {
                    sum += (a - b).abs();
                    count += 1;
                }
            }
        }
    }
    (sum, count)
}
