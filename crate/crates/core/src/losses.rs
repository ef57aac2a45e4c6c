//! Training objectives. Every function works on tensors of any float dtype
//! and stays differentiable; per-instance losses return one value per row so
//! the caller decides how to aggregate.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.4,
            eta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta", self.eta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::ConfigField {
                    field: format!("loss.weights.{name}"),
                    msg: format!("must be a finite value >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Exponents of the heatmap focal loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    pub alpha_exp: f64,
    pub beta_exp: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha_exp: 2.0,
            beta_exp: 4.0,
        }
    }
}

fn safe_log(t: &Tensor) -> Result<Tensor> {
    Ok(t.maximum(LOG_EPS)?.log()?)
}

/// Masked mean of `|pred - target|` along the last dims of each instance.
/// Instances with an empty mask contribute 0.
fn masked_l1(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let n = pred.dim(0)?;
    let diff = ((pred - target)?.abs()? * mask)?.reshape((n, ()))?.sum(1)?;
    let count = mask.reshape((n, ()))?.sum(1)?.maximum(1.0)?;
    Ok((diff / count)?)
}

/// Row-wise location loss per instance: mean L1 between expected and target
/// abscissa over valid rows. `exp_loc`, `target_loc`, `valid` are `N x Y`;
/// `valid` holds 0/1 and `target_loc` may hold anything on invalid rows.
pub fn row_loss(exp_loc: &Tensor, target_loc: &Tensor, valid: &Tensor) -> Result<Tensor> {
    // keep NaN placeholders from reaching the gradient
    let target = target_loc.where_cond_finite()?;
    masked_l1(exp_loc, &target, valid)
}

/// Vertical-range cross-entropy per instance, summed over rows.
/// `range_logits` is `N x Y x 2` (index 1 = crossed), `valid` is `N x Y`.
pub fn range_loss(range_logits: &Tensor, valid: &Tensor) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(range_logits, D::Minus1)?.maximum(LOG_EPS.ln())?;
    let log_neg = logp.narrow(D::Minus1, 0, 1)?.squeeze(D::Minus1)?;
    let log_pos = logp.narrow(D::Minus1, 1, 1)?.squeeze(D::Minus1)?;
    let not_valid = valid.affine(-1.0, 1.0)?;
    let per_row = ((valid * log_pos)? + (not_valid * log_neg)?)?.neg()?;
    Ok(per_row.sum(D::Minus1)?)
}

/// Offset L1 per instance over the region Ω; all tensors `N x Y x X`.
pub fn offset_loss(pred_offset: &Tensor, target_offset: &Tensor, mask: &Tensor) -> Result<Tensor> {
    masked_l1(pred_offset, target_offset, mask)
}

/// Heatmap focal loss per image. `pred` and `target` are `B x 1 x Hp x Wp`
/// (or `B x Hp x Wp`); cells with target exactly 1 are positives. Each image
/// is normalised by its positive count, or by 1 when it has none.
pub fn focal_point_loss(pred: &Tensor, target: &Tensor, params: &FocalParams) -> Result<Tensor> {
    let b = pred.dim(0)?;
    let pred = pred.reshape((b, ()))?;
    let target = target.reshape((b, ()))?;
    let pos = target.ge(1.0)?.to_dtype(pred.dtype())?;
    let neg = pos.affine(-1.0, 1.0)?;
    let one_minus_pred = pred.affine(-1.0, 1.0)?;
    let pos_term = (one_minus_pred.powf(params.alpha_exp)? * safe_log(&pred)?)?;
    let neg_weight = (target.affine(-1.0, 1.0)?.maximum(0.0)?.powf(params.beta_exp)?
        * pred.powf(params.alpha_exp)?)?;
    let neg_term = (neg_weight * safe_log(&one_minus_pred)?)?;
    let total = ((pos_term * &pos)? + (neg_term * neg)?)?.sum(1)?;
    let n_pos = pos.sum(1)?.maximum(1.0)?;
    Ok((total.neg()? / n_pos)?)
}

/// Mean binary cross-entropy of the recurrent states. `state_logits` is
/// `M x 2` as `[continue, stop]`; `continue_labels` is `M` with 1 for
/// continue and 0 for stop. Empty input gives 0.
pub fn rim_state_loss(state_logits: &Tensor, continue_labels: &Tensor) -> Result<Tensor> {
    let m = state_logits.dim(0)?;
    if m == 0 {
        return Ok(Tensor::zeros((), state_logits.dtype(), state_logits.device())?);
    }
    let logp = candle_nn::ops::log_softmax(state_logits, D::Minus1)?.maximum(LOG_EPS.ln())?;
    let log_cont = logp.narrow(1, 0, 1)?.squeeze(1)?;
    let log_stop = logp.narrow(1, 1, 1)?.squeeze(1)?;
    let per = ((continue_labels * log_cont)? + (continue_labels.affine(-1.0, 1.0)? * log_stop)?)?;
    Ok(per.mean(0)?.neg()?)
}

/// The five scalar components, in logging order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub point: f64,
    pub row: f64,
    pub range: f64,
    pub offset: f64,
    pub state: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.point + w.alpha * self.row + w.beta * self.range + w.gamma * self.offset + w.eta * self.state
    }

    pub fn is_finite(&self) -> bool {
        [self.point, self.row, self.range, self.offset, self.state]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Differentiable counterpart of [`LossComponents`].
#[derive(Debug, Clone)]
pub struct LossTensors {
    pub point: Tensor,
    pub row: Tensor,
    pub range: Tensor,
    pub offset: Tensor,
    pub state: Tensor,
}

impl LossTensors {
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        let t = (&self.point
            + self.row.affine(w.alpha, 0.0)?
            + self.range.affine(w.beta, 0.0)?
            + self.offset.affine(w.gamma, 0.0)?
            + self.state.affine(w.eta, 0.0)?)?;
        Ok(t)
    }

    pub fn values(&self) -> Result<LossComponents> {
        let v = |t: &Tensor| -> Result<f64> {
            Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
        };
        Ok(LossComponents {
            point: v(&self.point)?,
            row: v(&self.row)?,
            range: v(&self.range)?,
            offset: v(&self.offset)?,
            state: v(&self.state)?,
        })
    }
}

trait FiniteOrZero {
    fn where_cond_finite(&self) -> Result<Tensor>;
}

impl FiniteOrZero for Tensor {
    fn where_cond_finite(&self) -> Result<Tensor> {
        // NaN != NaN
        let finite = self.eq(self)?;
        Ok(finite.where_cond(self, &self.zeros_like()?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use candle_core::Device;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap()
    }

    fn t2(v: &[f64], r: usize, c: usize) -> Tensor {
        Tensor::from_vec(v.to_vec(), (r, c), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.flatten_all().unwrap().sum(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn row_loss_examples() {
        let l = row_loss(&t2(&[1.0, 2.0], 1, 2), &t2(&[1.0, 2.0], 1, 2), &t2(&[1.0, 1.0], 1, 2));
        assert_abs_diff_eq!(scalar(&l.unwrap()), 0.0);
        let l = row_loss(&t2(&[1.5, 9.0], 1, 2), &t2(&[1.0, f64::NAN], 1, 2), &t2(&[1.0, 0.0], 1, 2));
        assert_abs_diff_eq!(scalar(&l.unwrap()), 0.5);
        let l = row_loss(&t2(&[2.0, 3.0], 1, 2), &t2(&[1.0, 3.0], 1, 2), &t2(&[1.0, 1.0], 1, 2));
        assert_abs_diff_eq!(scalar(&l.unwrap()), 0.5);
        let l = row_loss(&t2(&[2.0, 3.0], 1, 2), &t2(&[1.0, 3.0], 1, 2), &t2(&[0.0, 0.0], 1, 2));
        assert_abs_diff_eq!(scalar(&l.unwrap()), 0.0);
    }

    #[test]
    fn range_loss_examples() {
        let y = 6;
        let logits = Tensor::zeros((1, y, 2), candle_core::DType::F64, &Device::Cpu).unwrap();
        let valid = t2(&[1.0, 1.0, 0.0, 0.0, 1.0, 0.0], 1, y);
        assert_abs_diff_eq!(
            scalar(&range_loss(&logits, &valid).unwrap()),
            y as f64 * 2f64.ln(),
            epsilon = 1e-12
        );
        let sure = Tensor::from_vec(vec![-50.0, 50.0, 50.0, -50.0], (1, 2, 2), &Device::Cpu).unwrap();
        let l = scalar(&range_loss(&sure, &t2(&[1.0, 0.0], 1, 2)).unwrap());
        assert!(l < 1e-12);
        // flipping one label changes the loss by |log v - log(1-v)|
        let lg = Tensor::from_vec(vec![0.0, 0.7, 0.3, -0.4], (1, 2, 2), &Device::Cpu).unwrap();
        let a = scalar(&range_loss(&lg, &t2(&[1.0, 1.0], 1, 2)).unwrap());
        let b = scalar(&range_loss(&lg, &t2(&[0.0, 1.0], 1, 2)).unwrap());
        let v = 1.0 / (1.0 + (-0.7f64).exp());
        assert_abs_diff_eq!((a - b).abs(), (v.ln() - (1.0 - v).ln()).abs(), epsilon = 1e-12);
    }

    #[test]
    fn offset_loss_examples() {
        let target = t2(&[0.1, 0.2, 0.3, 0.4], 1, 4).reshape((1, 2, 2)).unwrap();
        let mask = t2(&[1.0, 1.0, 0.0, 1.0], 1, 4).reshape((1, 2, 2)).unwrap();
        assert_abs_diff_eq!(scalar(&offset_loss(&target, &target, &mask).unwrap()), 0.0);
        let pred = (&target + 0.25).unwrap();
        assert_abs_diff_eq!(scalar(&offset_loss(&pred, &target, &mask).unwrap()), 0.25, epsilon = 1e-12);
        let empty = mask.zeros_like().unwrap();
        assert_abs_diff_eq!(scalar(&offset_loss(&pred, &target, &empty).unwrap()), 0.0);
    }

    #[test]
    fn focal_examples() {
        let fp = FocalParams::default();
        let target = t2(&[1.0, 0.0, 0.5, 0.0], 1, 4);
        let pred = t2(&[0.5, 0.0, 0.0, 0.0], 1, 4);
        let l = scalar(&focal_point_loss(&pred, &target, &fp).unwrap());
        assert_abs_diff_eq!(l, 0.25 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.1733, epsilon = 1e-4);
        // negative cell with P = 0.5 contributes (0.5)^4 * p^2 * -log(1 - p)
        let p = 0.3;
        let pred = t2(&[1.0, 0.0, p, 0.0], 1, 4);
        let l = scalar(&focal_point_loss(&pred, &target, &fp).unwrap());
        assert_abs_diff_eq!(l, 0.5f64.powi(4) * p * p * -(1.0 - p).ln(), epsilon = 1e-12);
        // no positives: normalised by 1
        let l = scalar(&focal_point_loss(&t2(&[0.2], 1, 1), &t2(&[0.0], 1, 1), &fp).unwrap());
        assert_abs_diff_eq!(l, 0.04 * -(0.8f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn state_loss_examples() {
        let even = Tensor::zeros((3, 2), candle_core::DType::F64, &Device::Cpu).unwrap();
        let l = scalar(&rim_state_loss(&even, &t1(&[1.0, 0.0, 1.0])).unwrap());
        assert_abs_diff_eq!(l, 2f64.ln(), epsilon = 1e-12);
        let sure = t2(&[40.0, -40.0, -40.0, 40.0], 2, 2);
        assert!(scalar(&rim_state_loss(&sure, &t1(&[1.0, 0.0])).unwrap()) < 1e-12);
        let a = t2(&[0.3, -0.2, 1.0, 0.5], 2, 2);
        let b = t2(&[1.0, 0.5, 0.3, -0.2], 2, 2);
        assert_abs_diff_eq!(
            scalar(&rim_state_loss(&a, &t1(&[1.0, 0.0])).unwrap()),
            scalar(&rim_state_loss(&b, &t1(&[0.0, 1.0])).unwrap()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights::default();
        let ones = LossComponents {
            point: 1.0,
            row: 1.0,
            range: 1.0,
            offset: 1.0,
            state: 1.0,
        };
        assert_abs_diff_eq!(ones.total(&w), 4.4, epsilon = 1e-12);
        assert_eq!(LossComponents::default().total(&w), 0.0);
        let no_offset = LossWeights { gamma: 0.0, ..w };
        let big_offset = LossComponents { offset: 1e6, ..ones };
        assert_abs_diff_eq!(big_offset.total(&no_offset), 4.0, epsilon = 1e-12);
        assert!(LossWeights { eta: -1.0, ..w }.validate().is_err());
    }
}
