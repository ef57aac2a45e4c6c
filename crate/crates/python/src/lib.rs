//! Python module `condlane`: lane geometry, mask-IoU scoring, synthetic
//! scenes and annotation text formats.

use std::path::Path;

use ndarray::Array2;
use pyo3::exceptions::{PyIndexError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use condlane::data::{self, SceneConfig};
use condlane::geometry::{self, GridSpec, ImageSpec, LanePolyline, Point};
use condlane::metrics::{self, MatchConfig};
use condlane::Error;

type Lane = Vec<(f64, f64)>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Index(m) => PyIndexError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn polyline(points: &Lane) -> PyResult<LanePolyline> {
    LanePolyline::new(points.iter().map(|&(x, y)| Point::new(x, y)).collect()).map_err(to_py)
}

fn points(lane: &LanePolyline) -> Lane {
    lane.points().iter().map(|p| (p.x, p.y)).collect()
}

fn grid(height: usize, width: usize, rows: usize, cols: usize) -> PyResult<GridSpec> {
    let image = ImageSpec::new(height, width).map_err(to_py)?;
    GridSpec::new(rows, cols, image).map_err(to_py)
}

/// Probability-weighted column index of one row distribution.
#[pyfunction]
fn expected_abscissa(prob_row: Vec<f64>) -> PyResult<f64> {
    geometry::expected_abscissa(&prob_row).map_err(to_py)
}

/// Row-wise targets of one lane: `loc` (NaN outside the range), `valid`,
/// `v_min`, `v_max`.
#[pyfunction]
#[pyo3(signature = (lane, height, width, rows, cols, omega = 5))]
fn encode_rowwise<'py>(
    py: Python<'py>,
    lane: Lane,
    height: usize,
    width: usize,
    rows: usize,
    cols: usize,
    omega: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let g = grid(height, width, rows, cols)?;
    let t = geometry::encode_rowwise_targets(&polyline(&lane)?, &g, omega).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("loc", t.loc.clone())?;
    d.set_item("valid", t.valid.clone())?;
    d.set_item("v_min", t.v_min)?;
    d.set_item("v_max", t.v_max)?;
    d.set_item("n_omega", t.n_omega())?;
    Ok(d)
}

/// Decodes per-row expected columns and range logits into points, or `None`.
/// `offsets`, when given, is a rows x cols nested list.
#[pyfunction]
#[pyo3(signature = (exp_loc, range_logits, height, width, rows, cols, offsets = None))]
fn decode_lane(
    exp_loc: Vec<f64>,
    range_logits: Vec<[f64; 2]>,
    height: usize,
    width: usize,
    rows: usize,
    cols: usize,
    offsets: Option<Vec<Vec<f64>>>,
) -> PyResult<Option<Lane>> {
    let g = grid(height, width, rows, cols)?;
    let off = match offsets {
        Some(o) => {
            let flat: Vec<f64> = o.iter().flatten().copied().collect();
            let shape = (o.len(), o.first().map_or(0, |r| r.len()));
            Some(
                Array2::from_shape_vec(shape, flat)
                    .map_err(|e| PyValueError::new_err(format!("offsets: {e}")))?,
            )
        }
        None => None,
    };
    let lane = geometry::decode_lane(&exp_loc, &range_logits, off.as_ref(), &g).map_err(to_py)?;
    Ok(lane.as_ref().map(points))
}

/// Mask IoU of two lanes given in `height x width` image pixels.
#[pyfunction]
fn lane_iou(a: Lane, b: Lane, height: usize, width: usize) -> PyResult<f64> {
    let cfg = MatchConfig::default();
    let image = ImageSpec::new(height, width).map_err(to_py)?;
    let (a, b) = (cfg.to_canvas(&polyline(&a)?, &image), cfg.to_canvas(&polyline(&b)?, &image));
    Ok(metrics::lane_iou(&a, &b, &cfg))
}

/// Matches predictions to ground truth image by image and returns totals.
#[pyfunction]
#[pyo3(signature = (preds, gts, height, width, iou_threshold = 0.5))]
fn score<'py>(
    py: Python<'py>,
    preds: Vec<Vec<Lane>>,
    gts: Vec<Vec<Lane>>,
    height: usize,
    width: usize,
    iou_threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = MatchConfig {
        iou_threshold,
        ..MatchConfig::default()
    };
    let image = ImageSpec::new(height, width).map_err(to_py)?;
    let canvas = |sets: &[Vec<Lane>]| -> PyResult<Vec<Vec<LanePolyline>>> {
        sets.iter()
            .map(|s| s.iter().map(|l| Ok(cfg.to_canvas(&polyline(l)?, &image))).collect())
            .collect()
    };
    let report = metrics::match_and_score(&canvas(&preds)?, &canvas(&gts)?, None, &cfg).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("tp", report.total.tp)?;
    d.set_item("fp", report.total.fp)?;
    d.set_item("fn", report.total.fn_)?;
    d.set_item("precision", report.precision())?;
    d.set_item("recall", report.recall())?;
    d.set_item("f1", report.f1())?;
    Ok(d)
}

/// Default scene configuration as JSON.
#[pyfunction]
fn default_scene_config() -> PyResult<String> {
    serde_json::to_string(&SceneConfig::default()).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Renders scene `index`. Returns `(rgb, lanes, category)` where `rgb` is
/// `height * width * 3` bytes in row-major order.
#[pyfunction]
#[pyo3(signature = (index, config = None))]
fn generate_scene<'py>(
    py: Python<'py>,
    index: u64,
    config: Option<&str>,
) -> PyResult<(Bound<'py, PyBytes>, Vec<Lane>, String)> {
    let cfg: SceneConfig = match config {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SceneConfig::default(),
    };
    cfg.validate().map_err(to_py)?;
    let s = data::generate_scene(&cfg, index).map_err(to_py)?;
    let rgb = data::array_to_rgb(&s.image);
    Ok((
        PyBytes::new(py, rgb.as_raw()),
        s.lanes.iter().map(points).collect(),
        s.category.to_string(),
    ))
}

#[pyfunction]
fn parse_culane(text: &str) -> PyResult<Vec<Lane>> {
    let lanes = data::annotations::parse_culane(text, Path::new("<string>")).map_err(to_py)?;
    Ok(lanes.iter().map(points).collect())
}

#[pyfunction]
fn format_culane(lanes: Vec<Lane>) -> PyResult<String> {
    let lanes = lanes.iter().map(polyline).collect::<PyResult<Vec<_>>>()?;
    Ok(data::annotations::format_culane(&lanes))
}

#[pymodule]
#[pyo3(name = "condlane")]
pub fn condlane_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(expected_abscissa, m)?)?;
    m.add_function(wrap_pyfunction!(encode_rowwise, m)?)?;
    m.add_function(wrap_pyfunction!(decode_lane, m)?)?;
    m.add_function(wrap_pyfunction!(lane_iou, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(default_scene_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(parse_culane, m)?)?;
    m.add_function(wrap_pyfunction!(format_culane, m)?)?;
    Ok(())
}
