//! Proposal head and conditional shape head.
//!
//! The proposal head predicts a start-point heatmap and a per-cell parameter
//! map. The shape head computes one shared feature map per image; each lane
//! instance then applies its own dynamic 1x1 convolutions to it. A kernel is
//! `[w_loc (66), b_loc, w_off (66), b_off]`.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder};

use crate::backbone::{conv, ConvNorm};
use crate::error::{Error, Result};

pub const SHAPE_CHANNELS: usize = 64;
/// Learned shape channels plus the two coordinate channels.
pub const SHARED_CHANNELS: usize = SHAPE_CHANNELS + 2;
pub const BRANCH_PARAMS: usize = SHARED_CHANNELS + 1;
pub const KERNEL_DIM: usize = 2 * BRANCH_PARAMS;
/// Parameter-map width when kernels come from the recurrent instance module.
pub const RIM_FEATURE_DIM: usize = 128;

/// Initial heatmap logit bias, a prior of about 0.1 per cell.
const HEATMAP_PRIOR_BIAS: f64 = -2.19;

/// Width of the parameter map.
pub fn param_channels(rim_enabled: bool) -> usize {
    if rim_enabled {
        RIM_FEATURE_DIM
    } else {
        KERNEL_DIM
    }
}

#[derive(Debug, Clone)]
pub struct ProposalOutput {
    /// `B x 1 x Hp x Wp`, pre-sigmoid.
    pub heatmap_logits: Tensor,
    /// `B x 1 x Hp x Wp`, in (0, 1).
    pub heatmap: Tensor,
    /// `B x Cp x Hp x Wp`.
    pub param_map: Tensor,
}

#[derive(Debug, Clone)]
pub struct ProposalHead {
    heat_hidden: ConvNorm,
    heat_out: Conv2d,
    param_hidden: ConvNorm,
    param_out: Conv2d,
    param_channels: usize,
}

impl ProposalHead {
    pub fn new(
        in_channels: usize,
        hidden: usize,
        param_channels: usize,
        groups: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        let heat_vb = vb.pp("heatmap");
        let ws = heat_vb.pp("out").get_with_hints(
            (1, hidden, 3, 3),
            "weight",
            candle_nn::init::DEFAULT_KAIMING_NORMAL,
        )?;
        let bs = heat_vb
            .pp("out")
            .get_with_hints(1, "bias", candle_nn::Init::Const(HEATMAP_PRIOR_BIAS))?;
        let heat_out = Conv2d::new(
            ws,
            Some(bs),
            Conv2dConfig {
                padding: 1,
                ..Default::default()
            },
        );
        Ok(Self {
            heat_hidden: ConvNorm::new(in_channels, hidden, 3, 1, groups, true, heat_vb.pp("hidden"))?,
            heat_out,
            param_hidden: ConvNorm::new(in_channels, hidden, 3, 1, groups, true, vb.pp("params").pp("hidden"))?,
            param_out: conv(hidden, param_channels, 3, 1, true, vb.pp("params").pp("out"))?,
            param_channels,
        })
    }

    pub fn param_channels(&self) -> usize {
        self.param_channels
    }

    /// `feature` is the downscale-16 pyramid level.
    pub fn forward(&self, feature: &Tensor, image_hw: (usize, usize)) -> Result<ProposalOutput> {
        let (_, _, h, w) = feature.dims4()?;
        if (h * 16, w * 16) != image_hw {
            return Err(Error::Shape(format!(
                "proposal head expects the downscale-16 level ({}x{}), got {h}x{w}",
                image_hw.0 / 16,
                image_hw.1 / 16
            )));
        }
        let heatmap_logits = feature.apply(&self.heat_hidden)?.apply(&self.heat_out)?;
        let heatmap = candle_nn::ops::sigmoid(&heatmap_logits)?;
        let param_map = feature.apply(&self.param_hidden)?.apply(&self.param_out)?;
        Ok(ProposalOutput {
            heatmap_logits,
            heatmap,
            param_map,
        })
    }
}

/// Normalised coordinate channels `[x / (X-1), y / (Y-1)]`, `2 x Y x X`.
pub fn coordinate_channels(rows: usize, cols: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if rows < 2 || cols < 2 {
        return Err(Error::Shape(format!(
            "shape grid must be at least 2x2, got {rows}x{cols}"
        )));
    }
    let mut data = Vec::with_capacity(2 * rows * cols);
    for _ in 0..rows {
        for j in 0..cols {
            data.push(j as f64 / (cols - 1) as f64);
        }
    }
    for i in 0..rows {
        for _ in 0..cols {
            data.push(i as f64 / (rows - 1) as f64);
        }
    }
    Ok(Tensor::from_vec(data, (2, rows, cols), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct ShapeHead {
    conv1: ConvNorm,
    conv2: ConvNorm,
    conv3: Conv2d,
    range: Linear,
}

impl ShapeHead {
    pub fn new(in_channels: usize, grid_cols: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv1: ConvNorm::new(in_channels, SHAPE_CHANNELS, 3, 1, groups, true, vb.pp("conv1"))?,
            conv2: ConvNorm::new(SHAPE_CHANNELS, SHAPE_CHANNELS, 3, 1, groups, true, vb.pp("conv2"))?,
            conv3: conv(SHAPE_CHANNELS, SHAPE_CHANNELS, 3, 1, true, vb.pp("conv3"))?,
            range: candle_nn::linear(grid_cols, 2, vb.pp("range"))?,
        })
    }

    /// `B x 66 x Y x X`; the last two channels are the coordinate grids.
    pub fn shared_forward(&self, feature: &Tensor) -> Result<Tensor> {
        let ys = feature
            .apply(&self.conv1)?
            .apply(&self.conv2)?
            .apply(&self.conv3)?;
        let (b, _, rows, cols) = ys.dims4()?;
        let coords = coordinate_channels(rows, cols, ys.dtype(), ys.device())?
            .unsqueeze(0)?
            .broadcast_as((b, 2, rows, cols))?;
        Ok(Tensor::cat(&[&ys, &coords], 1)?)
    }

    /// Per-row range logits `N x Y x 2` (index 1 = row crossed) from raw
    /// location maps `N x Y x X`.
    pub fn vertical_range_forward(&self, location_map: &Tensor) -> Result<Tensor> {
        Ok(self.range.forward(location_map)?)
    }
}

/// Applies one dynamic 1x1 convolution per instance.
///
/// `shared` is `N x 66 x Y x X` (one row per instance) or `66 x Y x X` shared
/// by all instances; `kernels` is `N x 134`. Returns location and offset maps,
/// each `N x Y x X`.
pub fn conditional_forward(shared: &Tensor, kernels: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, k) = kernels.dims2()?;
    if k != KERNEL_DIM {
        return Err(Error::Contract(format!(
            "kernel vectors must have {KERNEL_DIM} entries, got {k}"
        )));
    }
    let shared = match shared.rank() {
        3 => {
            let (c, y, x) = shared.dims3()?;
            shared.unsqueeze(0)?.broadcast_as((n, c, y, x))?
        }
        _ => shared.clone(),
    };
    let (ns, c, rows, cols) = shared.dims4()?;
    if ns != n || c != SHARED_CHANNELS {
        return Err(Error::Shape(format!(
            "shared features {ns}x{c} do not match {n} kernels over {SHARED_CHANNELS} channels"
        )));
    }
    let flat = shared.reshape((n, c, rows * cols))?;
    let branch = |start: usize| -> Result<Tensor> {
        let w = kernels.narrow(1, start, SHARED_CHANNELS)?.unsqueeze(1)?;
        let b = kernels.narrow(1, start + SHARED_CHANNELS, 1)?.unsqueeze(2)?;
        Ok(w.matmul(&flat)?.broadcast_add(&b)?.reshape((n, rows, cols))?)
    };
    Ok((branch(0)?, branch(BRANCH_PARAMS)?))
}

/// Row-softmax expectation of the column index, `N x Y x X -> N x Y`.
pub fn expected_locations(location_map: &Tensor) -> Result<Tensor> {
    let cols = location_map.dim(D::Minus1)?;
    let probs = candle_nn::ops::softmax(location_map, D::Minus1)?;
    let idx = Tensor::arange(0u32, cols as u32, location_map.device())?.to_dtype(location_map.dtype())?;
    Ok(probs.broadcast_mul(&idx)?.sum(D::Minus1)?)
}

/// Flat indices of `(sample, x, y)` cells into a `B x Hp x Wp` grid.
fn flat_cells(points: &[(usize, usize, usize)], dims: (usize, usize, usize)) -> Result<Vec<u32>> {
    let (b, hp, wp) = dims;
    points
        .iter()
        .map(|&(s, x, y)| {
            if s >= b || x >= wp || y >= hp {
                Err(Error::Index(format!(
                    "point (sample {s}, x {x}, y {y}) outside {b}x{hp}x{wp}"
                )))
            } else {
                Ok(((s * hp + y) * wp + x) as u32)
            }
        })
        .collect()
}

/// Kernel vectors at `(sample, x, y)` cells of a `B x Cp x Hp x Wp` map, in
/// input order, as `N x Cp`.
pub fn gather_kernels_batched(param_map: &Tensor, points: &[(usize, usize, usize)]) -> Result<Tensor> {
    let (b, cp, hp, wp) = param_map.dims4()?;
    if points.is_empty() {
        return Ok(Tensor::zeros((0, cp), param_map.dtype(), param_map.device())?);
    }
    let idx = flat_cells(points, (b, hp, wp))?;
    let idx = Tensor::from_vec(idx, points.len(), param_map.device())?;
    let cells = param_map
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .reshape((b * hp * wp, cp))?;
    Ok(cells.index_select(&idx, 0)?)
}

/// Single-image form: `param_map` is `Cp x Hp x Wp`, points are `(x, y)`.
pub fn gather_kernels(param_map: &Tensor, points: &[(usize, usize)]) -> Result<Tensor> {
    let pts: Vec<_> = points.iter().map(|&(x, y)| (0, x, y)).collect();
    gather_kernels_batched(&param_map.unsqueeze(0)?, &pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cpu() -> Device {
        Device::Cpu
    }

    fn to_vec3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
        t.to_dtype(DType::F64).unwrap().to_vec3().unwrap()
    }

    fn random_shared(n: usize) -> Tensor {
        let learned = Tensor::randn(0f64, 1.0, (64, 4, 6), &cpu()).unwrap();
        let coords = coordinate_channels(4, 6, DType::F64, &cpu()).unwrap();
        let s = Tensor::cat(&[&learned, &coords], 0).unwrap();
        if n == 0 {
            s
        } else {
            s.unsqueeze(0).unwrap().repeat((n, 1, 1, 1)).unwrap()
        }
    }

    #[test]
    fn kernel_arithmetic() {
        assert_eq!(KERNEL_DIM, 134);
        assert_eq!(param_channels(true), 128);
        assert_eq!(param_channels(false), 134);
    }

    #[test]
    fn zero_kernel_gives_bias_maps() {
        let mut k = vec![0f64; KERNEL_DIM];
        k[66] = 0.25;
        k[133] = -1.5;
        let k = Tensor::from_vec(k, (1, KERNEL_DIM), &cpu()).unwrap();
        let (loc, off) = conditional_forward(&random_shared(0), &k).unwrap();
        assert!(to_vec3(&loc).iter().flatten().flatten().all(|&v| v == 0.25));
        assert!(to_vec3(&off).iter().flatten().flatten().all(|&v| v == -1.5));
    }

    #[test]
    fn coordinate_pass_through() {
        let mut k = vec![0f64; KERNEL_DIM];
        k[64] = 1.0;
        k[BRANCH_PARAMS + 65] = 1.0;
        let k = Tensor::from_vec(k, (1, KERNEL_DIM), &cpu()).unwrap();
        let (loc, off) = conditional_forward(&random_shared(0), &k).unwrap();
        let (loc, off) = (to_vec3(&loc), to_vec3(&off));
        for i in 0..4 {
            for j in 0..6 {
                assert!((loc[0][i][j] - j as f64 / 5.0).abs() < 1e-12);
                assert!((off[0][i][j] - i as f64 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_kernel_length_is_rejected() {
        let k = Tensor::zeros((2, 133), DType::F64, &cpu()).unwrap();
        assert!(matches!(
            conditional_forward(&random_shared(0), &k),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn instances_are_independent() {
        let shared = random_shared(0);
        let k = Tensor::randn(0f64, 1.0, (3, KERNEL_DIM), &cpu()).unwrap();
        let (loc_all, _) = conditional_forward(&shared, &k).unwrap();
        let (loc_one, _) = conditional_forward(&shared, &k.narrow(0, 1, 1).unwrap()).unwrap();
        assert_eq!(to_vec3(&loc_all)[1], to_vec3(&loc_one)[0]);
        // per-instance shared maps give the same answer as broadcasting
        let (loc_rep, _) = conditional_forward(&random_shared(3).affine(1.0, 0.0).unwrap(), &k).unwrap();
        assert_eq!(loc_rep.dims(), &[3, 4, 6]);
    }

    #[test]
    fn gather_single_and_empty() {
        let pm = Tensor::randn(0f64, 1.0, (5, 3, 4), &cpu()).unwrap();
        let g = gather_kernels(&pm, &[(2, 1)]).unwrap();
        let col: Vec<f64> = pm.narrow(1, 1, 1).unwrap().narrow(2, 2, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(g.get(0).unwrap().to_vec1::<f64>().unwrap(), col);
        assert_eq!(gather_kernels(&pm, &[]).unwrap().dims(), &[0, 5]);
        assert!(matches!(gather_kernels(&pm, &[(4, 0)]), Err(Error::Index(_))));
    }

    #[test]
    fn expected_locations_of_one_hot_rows() {
        let mut m = vec![-1e4f64; 2 * 5];
        m[3] = 0.0;
        m[5] = 0.0;
        let t = Tensor::from_vec(m, (1, 2, 5), &cpu()).unwrap();
        let e: Vec<Vec<f64>> = expected_locations(&t).unwrap().to_vec2().unwrap();
        assert!((e[0][0] - 3.0).abs() < 1e-12 && e[0][1].abs() < 1e-12);
    }
}
