//! Lane geometry without any learned parameters.
//!
//! A lane is an ordered polyline in image pixels. The network describes it on
//! a coarse `rows x cols` grid: one abscissa per grid row (in column units),
//! the contiguous range of rows the lane crosses, and a sub-cell offset map.
//! Instances are anchored at their bottom-most point on a coarser proposal
//! grid, supervised by a Gaussian heatmap.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
}

impl ImageSpec {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Contract(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        Ok(Self { height, width })
    }
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            height: 320,
            width: 800,
        }
    }
}

/// A `rows x cols` partition of an image into equal cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub image: ImageSpec,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, image: ImageSpec) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Contract("grid must have at least one cell".into()));
        }
        if image.height % rows != 0 || image.width % cols != 0 {
            return Err(Error::Contract(format!(
                "grid {rows}x{cols} does not divide image {}x{}",
                image.height, image.width
            )));
        }
        Ok(Self { rows, cols, image })
    }

    /// Grid whose cells are `downscale x downscale` pixels.
    pub fn at_downscale(image: ImageSpec, downscale: usize) -> Result<Self> {
        if downscale == 0 || image.height % downscale != 0 || image.width % downscale != 0 {
            return Err(Error::Contract(format!(
                "image {}x{} is not divisible by downscale {downscale}",
                image.height, image.width
            )));
        }
        Self::new(image.height / downscale, image.width / downscale, image)
    }

    pub fn cell_height(&self) -> f64 {
        (self.image.height / self.rows) as f64
    }

    pub fn cell_width(&self) -> f64 {
        (self.image.width / self.cols) as f64
    }

    /// Pixel ordinate sampled by grid row `i`.
    pub fn row_y(&self, row: usize) -> f64 {
        self.cell_height() * row as f64
    }

    /// Cell containing pixel `(x, y)`, clamped to the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let cx = (x / self.cell_width()).floor().clamp(0.0, (self.cols - 1) as f64);
        let cy = (y / self.cell_height()).floor().clamp(0.0, (self.rows - 1) as f64);
        (cx as usize, cy as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Lane coordinates ordered from the bottom of the image (largest `y`) upwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct LanePolyline {
    points: Vec<Point>,
}

impl LanePolyline {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidLane(format!(
                "a lane needs at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidLane(format!("non-finite point ({}, {})", p.x, p.y)));
        }
        if let Some(w) = points.windows(2).find(|w| w[1].y >= w[0].y) {
            return Err(Error::InvalidLane(format!(
                "y must strictly decrease along the lane: {} then {}",
                w[0].y, w[1].y
            )));
        }
        Ok(Self { points })
    }

    /// Builds a lane from points in any order; duplicates in `y` keep the first.
    pub fn from_unordered(mut points: Vec<Point>) -> Result<Self> {
        points.sort_by(|a, b| b.y.total_cmp(&a.y));
        points.dedup_by(|b, a| a.y == b.y);
        Self::new(points)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Bottom-most point; the lane's proposal anchor.
    pub fn start(&self) -> Point {
        self.points[0]
    }

    pub fn y_bottom(&self) -> f64 {
        self.points[0].y
    }

    pub fn y_top(&self) -> f64 {
        self.points[self.points.len() - 1].y
    }

    pub fn mean_x(&self) -> f64 {
        self.points.iter().map(|p| p.x).sum::<f64>() / self.points.len() as f64
    }

    /// Linear interpolation of the lane abscissa at `y`; `None` outside the span.
    pub fn x_at(&self, y: f64) -> Option<f64> {
        if y > self.y_bottom() || y < self.y_top() {
            return None;
        }
        // points are sorted by decreasing y
        let idx = self.points.partition_point(|p| p.y > y);
        if idx == 0 {
            return Some(self.points[0].x);
        }
        let (lo, hi) = (self.points[idx - 1], self.points[idx]);
        if hi.y == y {
            return Some(hi.x);
        }
        let t = (lo.y - y) / (lo.y - hi.y);
        Some(lo.x + t * (hi.x - lo.x))
    }

    pub fn within(&self, image: &ImageSpec) -> bool {
        let (w, h) = (image.width as f64, image.height as f64);
        self.points
            .iter()
            .all(|p| p.x >= 0.0 && p.x <= w - 1.0 && p.y >= 0.0 && p.y <= h - 1.0)
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| Point::new(p.x * sx, p.y * sy))
                .collect(),
        }
    }
}

impl TryFrom<Vec<Point>> for LanePolyline {
    type Error = Error;

    fn try_from(points: Vec<Point>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<LanePolyline> for Vec<Point> {
    fn from(lane: LanePolyline) -> Self {
        lane.points
    }
}

/// Row-wise supervision for one lane instance.
#[derive(Debug, Clone)]
pub struct RowwiseTarget {
    pub grid: GridSpec,
    /// Abscissa per row in column units; NaN outside the vertical range.
    pub loc: Vec<f64>,
    pub valid: Vec<bool>,
    pub v_min: usize,
    pub v_max: usize,
    pub offset_map: Array2<f64>,
    pub offset_mask: Array2<bool>,
}

impl RowwiseTarget {
    pub fn n_valid(&self) -> usize {
        self.v_max - self.v_min + 1
    }

    pub fn n_omega(&self) -> usize {
        self.offset_mask.iter().filter(|&&m| m).count()
    }
}

pub fn encode_rowwise_targets(
    lane: &LanePolyline,
    grid: &GridSpec,
    omega: usize,
) -> Result<RowwiseTarget> {
    if omega < 1 {
        return Err(Error::Contract("offset half-width must be >= 1".into()));
    }
    let ch = grid.cell_height();
    let cw = grid.cell_width();
    let first = (lane.y_top() / ch).ceil().max(0.0) as usize;
    let last = ((lane.y_bottom() / ch).floor() as usize).min(grid.rows - 1);
    let crossed = if last >= first { last - first + 1 } else { 0 };
    if crossed < 2 {
        return Err(Error::DegenerateLane { rows: crossed });
    }

    let mut loc = vec![f64::NAN; grid.rows];
    let mut valid = vec![false; grid.rows];
    let mut offset_map = Array2::zeros((grid.rows, grid.cols));
    let mut offset_mask = Array2::from_elem((grid.rows, grid.cols), false);
    for i in first..=last {
        let x = lane
            .x_at(grid.row_y(i))
            .expect("row ordinate lies inside the lane span");
        let l = x / cw;
        if !(0.0..grid.cols as f64).contains(&l) {
            return Err(Error::InvalidLane(format!(
                "abscissa {x} px at row {i} is outside the image"
            )));
        }
        loc[i] = l;
        valid[i] = true;
        let col = l.floor() as usize;
        let frac = l - col as f64;
        let lo = col.saturating_sub(omega);
        let hi = (col + omega).min(grid.cols - 1);
        for j in lo..=hi {
            offset_map[(i, j)] = frac;
            offset_mask[(i, j)] = true;
        }
    }
    Ok(RowwiseTarget {
        grid: *grid,
        loc,
        valid,
        v_min: first,
        v_max: last,
        offset_map,
        offset_mask,
    })
}

/// Probability-weighted column index of one row distribution.
pub fn expected_abscissa(prob_row: &[f64]) -> Result<f64> {
    if prob_row.is_empty() {
        return Err(Error::Contract("empty probability row".into()));
    }
    if prob_row.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::Contract("probabilities must be non-negative".into()));
    }
    let total: f64 = prob_row.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "probabilities sum to {total}, expected 1"
        )));
    }
    Ok(prob_row
        .iter()
        .enumerate()
        .map(|(j, p)| j as f64 * p)
        .sum())
}

/// Longest contiguous run of `true`; ties go to the run nearest the bottom.
fn longest_run(positive: &[bool]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < positive.len() {
        if !positive[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < positive.len() && positive[i] {
            i += 1;
        }
        let run = (start, i - 1);
        match best {
            Some((s, e)) if e - s > run.1 - run.0 => {}
            _ => best = Some(run),
        }
    }
    best
}

/// Turns one instance's row-wise prediction into a polyline.
///
/// With an offset map the abscissa of row `i` is
/// `W/X * (floor(loc_i) + offset[i, floor(loc_i)])`; without one the expected
/// location is snapped to the nearest column. Rows come from the longest
/// contiguous run of positive range decisions. Returns `None` when fewer than
/// two rows are positive.
pub fn decode_lane(
    exp_loc: &[f64],
    range_logits: &[[f64; 2]],
    offset_map: Option<&Array2<f64>>,
    grid: &GridSpec,
) -> Result<Option<LanePolyline>> {
    if exp_loc.len() != grid.rows || range_logits.len() != grid.rows {
        return Err(Error::Shape(format!(
            "expected {} rows, got {} locations and {} range logits",
            grid.rows,
            exp_loc.len(),
            range_logits.len()
        )));
    }
    if let Some(off) = offset_map {
        if off.dim() != (grid.rows, grid.cols) {
            return Err(Error::Shape(format!(
                "offset map is {:?}, grid is {}x{}",
                off.dim(),
                grid.rows,
                grid.cols
            )));
        }
    }
    let positive: Vec<bool> = range_logits.iter().map(|l| l[1] > l[0]).collect();
    let Some((v_min, v_max)) = longest_run(&positive) else {
        return Ok(None);
    };
    if v_max == v_min {
        return Ok(None);
    }
    let cw = grid.cell_width();
    let max_col = (grid.cols - 1) as f64;
    let x_max = (grid.image.width - 1) as f64;
    let points = (v_min..=v_max)
        .rev()
        .map(|i| {
            let x = match offset_map {
                Some(off) => {
                    let col = exp_loc[i].clamp(0.0, max_col).floor();
                    cw * (col + off[(i, col as usize)])
                }
                None => cw * exp_loc[i].max(0.0).round(),
            };
            Point::new(x.clamp(0.0, x_max), grid.row_y(i))
        })
        .collect();
    LanePolyline::new(points).map(Some)
}

/// A start cell on the proposal grid shared by `count` lanes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalPoint {
    pub x: usize,
    pub y: usize,
    pub count: usize,
    /// Indices into the rendered lane list, in input order.
    pub lanes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ProposalTarget {
    pub heatmap: Array2<f64>,
    /// Sorted row-major by cell.
    pub points: Vec<ProposalPoint>,
}

pub fn render_proposal_heatmap(
    lanes: &[LanePolyline],
    grid_p: &GridSpec,
    sigma: f64,
) -> ProposalTarget {
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (k, lane) in lanes.iter().enumerate() {
        let s = lane.start();
        let (cx, cy) = grid_p.cell_of(s.x, s.y);
        cells.entry((cy, cx)).or_default().push(k);
    }
    let mut heatmap = Array2::zeros((grid_p.rows, grid_p.cols));
    let denom = 2.0 * sigma * sigma;
    for &(py, px) in cells.keys() {
        for ((r, c), v) in heatmap.indexed_iter_mut() {
            let dy = r as f64 - py as f64;
            let dx = c as f64 - px as f64;
            let g = (-(dx * dx + dy * dy) / denom).exp();
            if g > *v {
                *v = g;
            }
        }
    }
    let points = cells
        .into_iter()
        .map(|((y, x), lanes)| ProposalPoint {
            x,
            y,
            count: lanes.len(),
            lanes,
        })
        .collect();
    ProposalTarget { heatmap, points }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalPeak {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// Strict 3x3 local maxima at or above `threshold`, highest score first.
/// Equal neighbours are resolved in favour of the smaller row-major index.
pub fn extract_proposal_points(heatmap: &Array2<f64>, threshold: f64) -> Vec<ProposalPeak> {
    let (rows, cols) = heatmap.dim();
    let mut peaks = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let v = heatmap[(r, c)];
            if v < threshold {
                continue;
            }
            let idx = r * cols + c;
            let mut is_peak = true;
            'nb: for nr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                    if (nr, nc) == (r, c) {
                        continue;
                    }
                    let n = heatmap[(nr, nc)];
                    if n > v || (n == v && nr * cols + nc < idx) {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                peaks.push(ProposalPeak { x: c, y: r, score: v });
            }
        }
    }
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
    peaks
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid_800() -> GridSpec {
        GridSpec::new(80, 100, ImageSpec::new(320, 800).unwrap()).unwrap()
    }

    fn vertical(x: f64, y_bottom: f64, y_top: f64) -> LanePolyline {
        LanePolyline::new(vec![Point::new(x, y_bottom), Point::new(x, y_top)]).unwrap()
    }

    #[test]
    fn grid_rejects_non_dividing_shape() {
        let img = ImageSpec::new(320, 800).unwrap();
        assert!(GridSpec::new(7, 100, img).is_err());
        assert!(GridSpec::at_downscale(img, 3).is_err());
        let g = GridSpec::at_downscale(img, 8).unwrap();
        assert_eq!((g.rows, g.cols), (40, 100));
    }

    #[test]
    fn polyline_invariants() {
        assert!(LanePolyline::new(vec![Point::new(1.0, 2.0)]).is_err());
        assert!(LanePolyline::new(vec![Point::new(1.0, 2.0), Point::new(1.0, 2.0)]).is_err());
        assert!(LanePolyline::new(vec![Point::new(1.0, 2.0), Point::new(1.0, 5.0)]).is_err());
        let l = LanePolyline::from_unordered(vec![Point::new(1.0, 2.0), Point::new(3.0, 5.0)])
            .unwrap();
        assert_eq!(l.start(), Point::new(3.0, 5.0));
        assert_abs_diff_eq!(l.x_at(3.5).unwrap(), 2.0);
        assert!(l.x_at(6.0).is_none());
    }

    #[test]
    fn encode_vertical_line_mid_cell() {
        let lane = vertical(84.0, 300.0, 40.0);
        let t = encode_rowwise_targets(&lane, &grid_800(), 5).unwrap();
        for i in t.v_min..=t.v_max {
            assert_abs_diff_eq!(t.loc[i], 10.5);
            for j in 5..=15 {
                assert!(t.offset_mask[(i, j)]);
                assert_abs_diff_eq!(t.offset_map[(i, j)], 0.5);
            }
            assert!(!t.offset_mask[(i, 4)] && !t.offset_mask[(i, 16)]);
        }
        assert_eq!(t.n_omega(), t.n_valid() * 11);
    }

    #[test]
    fn encode_on_column_boundary() {
        let t = encode_rowwise_targets(&vertical(80.0, 300.0, 40.0), &grid_800(), 5).unwrap();
        assert_abs_diff_eq!(t.loc[20], 10.0);
        assert_abs_diff_eq!(t.offset_map[(20, 10)], 0.0);
    }

    #[test]
    fn encode_range_rows_5_to_20() {
        // cell height 4 px: rows 5..=20 sample y = 20..=80
        let t = encode_rowwise_targets(&vertical(100.0, 80.0, 20.0), &grid_800(), 5).unwrap();
        assert_eq!((t.v_min, t.v_max, t.n_valid()), (5, 20, 16));
        for (i, v) in t.valid.iter().enumerate() {
            assert_eq!(*v, (5..=20).contains(&i));
            assert_eq!(t.loc[i].is_nan(), !v);
        }
    }

    #[test]
    fn encode_rejects_degenerate_lane() {
        let err = encode_rowwise_targets(&vertical(100.0, 22.0, 19.0), &grid_800(), 5);
        assert!(matches!(err, Err(Error::DegenerateLane { rows: 1 })));
        assert!(encode_rowwise_targets(&vertical(100.0, 80.0, 20.0), &grid_800(), 0).is_err());
    }

    #[test]
    fn decode_applies_floor_and_offset() {
        let g = grid_800();
        let mut exp = vec![0.0; 80];
        exp[10] = 10.7;
        exp[11] = 10.7;
        let mut logits = vec![[1.0, 0.0]; 80];
        logits[10] = [0.0, 1.0];
        logits[11] = [0.0, 1.0];
        let mut off = Array2::zeros((80, 100));
        off[(10, 10)] = 0.5;
        let lane = decode_lane(&exp, &logits, Some(&off), &g).unwrap().unwrap();
        // bottom-to-top: row 11 first
        assert_eq!(lane.points()[1], Point::new(84.0, 40.0));
        assert_eq!(lane.points()[0], Point::new(80.0, 44.0));
    }

    #[test]
    fn decode_identity_offset_and_gaps() {
        let g = grid_800();
        let exp = vec![7.0; 80];
        let mut logits = vec![[0.0, 1.0]; 80];
        // break into runs [0,9] and [11,79]; the longer one wins
        logits[10] = [1.0, 0.0];
        let off = Array2::zeros((80, 100));
        let lane = decode_lane(&exp, &logits, Some(&off), &g).unwrap().unwrap();
        assert_eq!(lane.len(), 69);
        assert!(lane.points().iter().all(|p| p.x == 56.0));
        assert_eq!(lane.y_top(), 44.0);

        let none = decode_lane(&exp, &vec![[1.0, 0.0]; 80], None, &g).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn expected_abscissa_examples() {
        let mut onehot = vec![0.0; 8];
        onehot[4] = 1.0;
        assert_abs_diff_eq!(expected_abscissa(&onehot).unwrap(), 4.0);
        assert_abs_diff_eq!(expected_abscissa(&[0.25; 4]).unwrap(), 1.5);
        assert_abs_diff_eq!(expected_abscissa(&[0.5, 0.5, 0.0, 0.0]).unwrap(), 0.5);
        assert!(expected_abscissa(&[0.5, 0.6]).is_err());
        assert!(expected_abscissa(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn heatmap_center_neighbours_and_forks() {
        let img = ImageSpec::new(320, 800).unwrap();
        let gp = GridSpec::at_downscale(img, 16).unwrap();
        // start cell (x=5, y=3): pixel (88, 56)
        let lane = LanePolyline::new(vec![Point::new(88.0, 56.0), Point::new(90.0, 10.0)]).unwrap();
        let t = render_proposal_heatmap(std::slice::from_ref(&lane), &gp, 1.0);
        assert_eq!(t.heatmap[(3, 5)], 1.0);
        assert_abs_diff_eq!(t.heatmap[(4, 6)], (-2.0f64 / 2.0).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(t.heatmap[(3, 4)], (-0.5f64).exp(), epsilon = 1e-12);

        let fork = LanePolyline::new(vec![Point::new(90.0, 60.0), Point::new(140.0, 10.0)]).unwrap();
        let t = render_proposal_heatmap(&[lane, fork], &gp, 2.0);
        assert_eq!(t.points.len(), 1);
        assert_eq!(t.points[0].count, 2);
        assert_eq!(t.points[0].lanes, vec![0, 1]);

        let empty = render_proposal_heatmap(&[], &gp, 2.0);
        assert!(empty.points.is_empty() && empty.heatmap.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn peak_extraction() {
        assert!(extract_proposal_points(&Array2::zeros((5, 7)), 0.1).is_empty());
        let mut h = Array2::zeros((6, 12));
        h[(2, 2)] = 0.9;
        h[(2, 3)] = 0.5;
        h[(4, 9)] = 0.7;
        let p = extract_proposal_points(&h, 0.3);
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].x, p[0].y), (2, 2));
        assert_eq!((p[1].x, p[1].y), (9, 4));
        // plateau: only the first in row-major order survives
        let mut flat = Array2::zeros((3, 3));
        flat[(1, 1)] = 0.5;
        flat[(1, 2)] = 0.5;
        let p = extract_proposal_points(&flat, 0.1);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].x, p[0].y), (1, 1));
    }
}
