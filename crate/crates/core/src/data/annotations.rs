//! Annotation file formats.
//!
//! CULane: one lane per line, whitespace-separated `x y` pairs.
//! TuSimple: one JSON object per line with `lanes` (abscissae per h-sample,
//! `-2` for absent), shared `h_samples` and the image path `raw_file`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LanePolyline, Point};
use crate::metrics::SampledLanes;

pub const ABSENT: f64 = -2.0;

pub fn parse_culane(text: &str, path: &Path) -> Result<Vec<LanePolyline>> {
    let mut lanes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() % 2 != 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("odd number of coordinates ({})", fields.len()),
            });
        }
        let mut pts = Vec::with_capacity(fields.len() / 2);
        for pair in fields.chunks(2) {
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("bad coordinate `{s}`: {e}"),
                })
            };
            pts.push(Point::new(parse(pair[0])?, parse(pair[1])?));
        }
        match LanePolyline::from_unordered(pts) {
            Ok(l) => lanes.push(l),
            Err(e) => log::warn!("{}:{line_no}: skipping lane: {e}", path.display()),
        }
    }
    Ok(lanes)
}

pub fn format_culane(lanes: &[LanePolyline]) -> String {
    let mut s = String::new();
    for lane in lanes {
        let coords: Vec<String> = lane
            .points()
            .iter()
            .map(|p| format!("{:.6} {:.6}", p.x, p.y))
            .collect();
        s.push_str(&coords.join(" "));
        s.push('\n');
    }
    s
}

pub fn read_culane(path: &Path) -> Result<Vec<LanePolyline>> {
    parse_culane(&fs::read_to_string(path)?, path)
}

pub fn write_culane(path: &Path, lanes: &[LanePolyline]) -> Result<()> {
    fs::write(path, format_culane(lanes))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TusimpleRecord {
    pub lanes: Vec<Vec<f64>>,
    pub h_samples: Vec<f64>,
    pub raw_file: String,
}

impl TusimpleRecord {
    pub fn validate(&self) -> Result<()> {
        self.sampled().validate()
    }

    pub fn sampled(&self) -> SampledLanes {
        SampledLanes {
            h_samples: self.h_samples.clone(),
            lanes: self.lanes.clone(),
        }
    }

    pub fn from_polylines(lanes: &[LanePolyline], h_samples: &[f64], raw_file: &str) -> Self {
        let s = SampledLanes::from_polylines(lanes, h_samples);
        Self {
            lanes: s.lanes,
            h_samples: s.h_samples,
            raw_file: raw_file.to_string(),
        }
    }

    /// Valid entries of each lane as polylines; lanes with fewer than two
    /// valid points are dropped.
    pub fn polylines(&self) -> Result<Vec<LanePolyline>> {
        self.validate()?;
        Ok(self
            .lanes
            .iter()
            .filter_map(|xs| {
                let pts: Vec<Point> = xs
                    .iter()
                    .zip(&self.h_samples)
                    .filter(|(&x, _)| x >= 0.0)
                    .map(|(&x, &y)| Point::new(x, y))
                    .collect();
                LanePolyline::from_unordered(pts).ok()
            })
            .collect())
    }
}

pub fn parse_tusimple(text: &str, path: &Path) -> Result<Vec<TusimpleRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TusimpleRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn format_tusimple(records: &[TusimpleRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        r.validate()?;
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_tusimple(path: &Path) -> Result<Vec<TusimpleRecord>> {
    parse_tusimple(&fs::read_to_string(path)?, path)
}

pub fn write_tusimple(path: &Path, records: &[TusimpleRecord]) -> Result<()> {
    fs::write(path, format_tusimple(records)?)?;
    Ok(())
}
