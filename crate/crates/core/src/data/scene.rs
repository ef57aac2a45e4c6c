//! Procedural road scenes with annotated lanes.
//!
//! Lanes converge towards a vanishing point and share one quadratic bend, so
//! ordinary lanes never cross. Fork scenes split a lane at its start point;
//! dense scenes add a parallel lane a few pixels away.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, ImageSpec, LanePolyline, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Normal,
    Fork,
    Dense,
    Curve,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Normal => "normal",
            Category::Fork => "fork",
            Category::Dense => "dense",
            Category::Curve => "curve",
        }
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Category::Normal),
            "fork" => Ok(Category::Fork),
            "dense" => Ok(Category::Dense),
            "curve" => Ok(Category::Curve),
            other => Err(Error::Format(format!("unknown category `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub image: ImageSpec,
    pub lane_count: [usize; 2],
    /// Lateral bend at the horizon, px; the sign is random.
    pub curvature: [f64; 2],
    pub fork_probability: f64,
    pub dense_probability: f64,
    pub dense_gap: f64,
    /// Standard deviation of additive pixel noise (intensity in [0, 1]).
    pub noise: f64,
    pub seed: u64,
    /// Painted line thickness, px.
    pub line_thickness: f64,
    pub proposal_downscale: usize,
    /// Minimum spacing of distinct start cells, in proposal cells.
    pub min_start_separation: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image: ImageSpec::default(),
            lane_count: [2, 4],
            curvature: [0.0, 80.0],
            fork_probability: 0.0,
            dense_probability: 0.0,
            dense_gap: 8.0,
            noise: 0.03,
            seed: 0,
            line_thickness: 6.0,
            proposal_downscale: 16,
            min_start_separation: 3,
        }
    }
}

impl SceneConfig {
    fn proposal_grid(&self) -> Result<GridSpec> {
        GridSpec::at_downscale(self.image, self.proposal_downscale)
    }

    /// Most lanes whose start columns fit at the configured separation.
    pub fn max_lanes(&self) -> Result<usize> {
        let usable = self.proposal_grid()?.cols.saturating_sub(2);
        Ok(usable.saturating_sub(1) / self.min_start_separation.max(1) + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, msg: String| Error::ConfigField {
            field: format!("data.{f}"),
            msg,
        };
        if self.lane_count[0] == 0 || self.lane_count[0] > self.lane_count[1] {
            return Err(field("lane_count", format!("invalid range {:?}", self.lane_count)));
        }
        if self.curvature[0] < 0.0 || self.curvature[0] > self.curvature[1] {
            return Err(field("curvature", format!("invalid range {:?}", self.curvature)));
        }
        for (name, p) in [
            ("fork_probability", self.fork_probability),
            ("dense_probability", self.dense_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(field(name, format!("must lie in [0, 1], got {p}")));
            }
        }
        if self.fork_probability + self.dense_probability > 1.0 {
            return Err(field(
                "dense_probability",
                "fork and dense probabilities sum above 1".into(),
            ));
        }
        if self.dense_gap < 4.0 {
            return Err(field("dense_gap", format!("must be >= 4 px, got {}", self.dense_gap)));
        }
        if self.noise < 0.0 || self.line_thickness <= 0.0 {
            return Err(field("noise", "noise must be >= 0 and thickness > 0".into()));
        }
        if self.min_start_separation == 0 {
            return Err(field("min_start_separation", "must be >= 1".into()));
        }
        let grid = self.proposal_grid()?;
        // start columns are drawn from 1..cols-1, spaced by the separation
        let usable = grid.cols.saturating_sub(2);
        let needed = (self.lane_count[1] - 1) * self.min_start_separation + 1;
        if needed > usable {
            return Err(Error::Config(format!(
                "{} lanes spaced {} proposal cells apart do not fit in {} columns",
                self.lane_count[1], self.min_start_separation, usable
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// `3 x H x W`, values in [0, 1].
    pub image: Array3<f32>,
    pub lanes: Vec<LanePolyline>,
    pub category: Category,
}

struct SceneFrame {
    vp_x: f64,
    y_h: f64,
    y_b: f64,
    bend: f64,
}

impl SceneFrame {
    fn t(&self, y: f64) -> f64 {
        (y - self.y_h) / (self.y_b - self.y_h)
    }

    fn x(&self, x0: f64, y: f64) -> f64 {
        let t = self.t(y);
        self.vp_x + (x0 - self.vp_x) * t + self.bend * (1.0 - t).powi(2)
    }
}

/// Samples `f(y)` from the bottom up every 2 px, stopping at `y_top` or where
/// the lane leaves the image.
fn trace(f: impl Fn(f64) -> f64, y_b: f64, y_top: f64, image: &ImageSpec) -> Vec<Point> {
    let x_max = image.width as f64 - 1.0;
    let mut pts = Vec::new();
    let mut y = y_b;
    loop {
        let x = f(y);
        if !(0.0..=x_max).contains(&x) {
            break;
        }
        pts.push(Point::new(x, y));
        if y <= y_top {
            break;
        }
        y = (y - 2.0).max(y_top);
    }
    pts
}

fn distinct_start_columns(rng: &mut ChaCha8Rng, n: usize, cols: usize, sep: usize) -> Vec<usize> {
    // place n columns in 1..cols-1 with gaps >= sep: distribute the slack
    let usable = cols - 2;
    let slack = usable - ((n - 1) * sep + 1);
    let mut extra: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=slack)).collect();
    extra.sort_unstable();
    (0..n).map(|k| 1 + k * sep + extra[k]).collect()
}

fn render(lanes: &[(LanePolyline, [f32; 3])], cfg: &SceneConfig, y_h: f64, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let (h, w) = (cfg.image.height, cfg.image.width);
    let mut img = Array3::<f32>::zeros((3, h, w));
    let base: f32 = rng.gen_range(0.22..0.34);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.02..0.15),
                rng.gen_range(0.02..0.15),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.01..0.04),
            )
        })
        .collect();
    for v in 0..h {
        for u in 0..w {
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (fx * u as f64 + fy * v as f64 + ph).sin())
                .sum();
            let sky = if (v as f64) < y_h { 0.25 } else { 0.0 };
            let g = (base as f64 + tex + sky) as f32;
            for c in 0..3 {
                img[(c, v, u)] = g;
            }
        }
    }
    let half = cfg.line_thickness / 2.0;
    for (lane, color) in lanes {
        for s in lane.points().windows(2) {
            let (a, b) = (s[0], s[1]);
            let u0 = (a.x.min(b.x) - half - 1.0).floor().max(0.0) as usize;
            let u1 = ((a.x.max(b.x) + half + 1.0).ceil() as usize).min(w - 1);
            let v0 = (b.y - half - 1.0).floor().max(0.0) as usize;
            let v1 = ((a.y + half + 1.0).ceil() as usize).min(h - 1);
            for v in v0..=v1 {
                for u in u0..=u1 {
                    let d = seg_dist(u as f64, v as f64, a, b);
                    let cover = (half + 0.5 - d).clamp(0.0, 1.0) as f32;
                    if cover > 0.0 {
                        for c in 0..3 {
                            let px = &mut img[(c, v, u)];
                            *px = px.max(*px * (1.0 - cover) + color[c] * cover);
                        }
                    }
                }
            }
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("noise std is finite");
        img.mapv_inplace(|p| p + normal.sample(rng) as f32);
    }
    img.mapv_inplace(|p| p.clamp(0.0, 1.0));
    img
}

fn seg_dist(x: f64, y: f64, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq == 0.0 {
        0.0
    } else {
        (((x - a.x) * dx + (y - a.y) * dy) / len_sq).clamp(0.0, 1.0)
    };
    ((x - a.x - t * dx).powi(2) + (y - a.y - t * dy).powi(2)).sqrt()
}

const WHITE: [f32; 3] = [0.95, 0.95, 0.92];
const YELLOW: [f32; 3] = [0.95, 0.82, 0.25];

/// Generates sample `index` of the dataset described by `cfg`. The result
/// depends only on `(cfg, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let grid = cfg.proposal_grid()?;
    let (hf, wf) = (cfg.image.height as f64, cfg.image.width as f64);
    let cell_w = grid.cell_width();

    for _attempt in 0..64 {
        let roll: f64 = rng.gen();
        let kind = if roll < cfg.fork_probability {
            Category::Fork
        } else if roll < cfg.fork_probability + cfg.dense_probability {
            Category::Dense
        } else {
            Category::Normal
        };
        let n = rng.gen_range(cfg.lane_count[0]..=cfg.lane_count[1]);
        let n_roots = if kind == Category::Normal { n } else { n.saturating_sub(1).max(1) };

        let bend_mag = rng.gen_range(cfg.curvature[0]..=cfg.curvature[1]);
        let bend = if rng.gen_bool(0.5) { bend_mag } else { -bend_mag };
        let frame = SceneFrame {
            vp_x: wf * rng.gen_range(0.4..0.6),
            y_h: hf * rng.gen_range(0.25..0.35),
            y_b: hf - 1.0,
            bend,
        };
        let cols = distinct_start_columns(&mut rng, n_roots, grid.cols, cfg.min_start_separation);
        let starts: Vec<f64> = cols
            .iter()
            .map(|&c| (c as f64 + rng.gen_range(0.25..0.75)) * cell_w)
            .collect();
        // stop where neighbouring lanes come within 6 px of each other
        let min_gap = starts.windows(2).map(|s| s[1] - s[0]).fold(wf, f64::min);
        let t_top = (6.0 / min_gap).max(rng.gen_range(0.12..0.3)).min(0.6);
        let y_top = frame.y_h + t_top * (frame.y_b - frame.y_h);

        let mut lanes: Vec<(Vec<Point>, [f32; 3])> = starts
            .iter()
            .map(|&x0| {
                let color = if rng.gen_bool(0.2) { YELLOW } else { WHITE };
                (trace(|y| frame.x(x0, y), frame.y_b, y_top, &cfg.image), color)
            })
            .collect();

        match kind {
            Category::Fork => {
                // split the outermost lane on a random side, bending outwards
                let left = rng.gen_bool(0.5);
                let k = if left { 0 } else { starts.len() - 1 };
                let slope = rng.gen_range(0.4..0.9) * if left { -1.0 } else { 1.0 };
                let x0 = starts[k];
                let branch_top = frame.y_b - (frame.y_b - y_top) * rng.gen_range(0.6..0.9);
                let pts = trace(
                    |y| frame.x(x0, y) + slope * (frame.y_b - y),
                    frame.y_b,
                    branch_top,
                    &cfg.image,
                );
                lanes.push((pts, lanes[k].1));
            }
            Category::Dense => {
                let left = rng.gen_bool(0.5);
                let k = if left { 0 } else { starts.len() - 1 };
                let gap = cfg.dense_gap * if left { -1.0 } else { 1.0 };
                let x0 = starts[k];
                let pts = trace(|y| frame.x(x0, y) + gap, frame.y_b, y_top, &cfg.image);
                lanes.push((pts, YELLOW));
            }
            _ => {}
        }

        let min_len = 0.4 * hf;
        if lanes
            .iter()
            .any(|(p, _)| p.len() < 2 || p[0].y - p[p.len() - 1].y < min_len)
        {
            continue;
        }
        let lanes: Vec<(LanePolyline, [f32; 3])> = lanes
            .into_iter()
            .map(|(p, c)| LanePolyline::new(p).map(|l| (l, c)))
            .collect::<Result<_>>()?;
        let category = match kind {
            Category::Normal if bend_mag > 0.05 * wf => Category::Curve,
            k => k,
        };
        let image = render(&lanes, cfg, frame.y_h, &mut rng);
        return Ok(Sample {
            image,
            lanes: lanes.into_iter().map(|(l, _)| l).collect(),
            category,
        });
    }
    Err(Error::Config(
        "could not place lanes inside the image; reduce curvature or lane count".into(),
    ))
}
