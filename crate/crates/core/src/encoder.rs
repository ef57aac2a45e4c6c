//! Single-layer transformer encoder that keeps its input two-dimensional:
//! projections and the feed-forward block are 1x1 convolutions, attention runs
//! over the flattened `h*w` positions.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, VarBuilder};

use crate::backbone::conv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_channels: usize,
}

/// Fixed 2D sinusoidal embedding, `1 x channels x h x w`. The first half of
/// the channels encodes the row, the second half the column, as interleaved
/// sine/cosine pairs.
pub fn sinusoidal_embedding_2d(
    channels: usize,
    h: usize,
    w: usize,
    dtype: DType,
    device: &Device,
) -> candle_core::Result<Tensor> {
    assert!(channels % 4 == 0, "embedding width must be a multiple of 4");
    let half = channels / 2;
    let mut data = vec![0f64; channels * h * w];
    for c in 0..channels {
        let (k, along_rows) = if c < half { (c, true) } else { (c - half, false) };
        let freq = 10000f64.powf(-((2 * (k / 2)) as f64) / half as f64);
        for i in 0..h {
            for j in 0..w {
                let pos = if along_rows { i } else { j } as f64 + 1.0;
                let a = pos * freq;
                data[(c * h + i) * w + j] = if k % 2 == 0 { a.sin() } else { a.cos() };
            }
        }
    }
    Tensor::from_vec(data, (1, channels, h, w), device)?.to_dtype(dtype)
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    cfg: EncoderConfig,
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    ffn_in: Conv2d,
    ffn_out: Conv2d,
}

impl TransformerEncoder {
    pub fn new(cfg: &EncoderConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            cfg: *cfg,
            query: conv(c, c, 1, 1, true, vb.pp("query"))?,
            key: conv(c, c, 1, 1, true, vb.pp("key"))?,
            value: conv(c, c, 1, 1, true, vb.pp("value"))?,
            ffn_in: conv(c, cfg.ffn_channels, 1, 1, true, vb.pp("ffn_in"))?,
            ffn_out: conv(cfg.ffn_channels, c, 1, 1, true, vb.pp("ffn_out"))?,
        })
    }

    pub fn feed_forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        xs.apply(&self.ffn_in)?.relu()?.apply(&self.ffn_out)
    }

    /// Returns the encoded map and the attention weights,
    /// `B x heads x hw x hw` with rows summing to one.
    pub fn forward_with_attention(&self, xs: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let (b, c, h, w) = xs.dims4()?;
        let heads = self.cfg.heads;
        let d = c / heads;
        let n = h * w;
        let pos = sinusoidal_embedding_2d(c, h, w, xs.dtype(), xs.device())?;
        let z = xs.broadcast_add(&pos)?;
        let q = z.apply(&self.query)?.reshape((b, heads, d, n))?;
        let k = z.apply(&self.key)?.reshape((b, heads, d, n))?;
        let v = z.apply(&self.value)?.reshape((b, heads, d, n))?;
        let scores = (q.transpose(2, 3)?.contiguous()?.matmul(&k)? / (d as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, candle_core::D::Minus1)?;
        // out[:, :, :, i] = sum_j attn[i, j] * v[:, :, :, j]
        let attended = v.matmul(&attn.transpose(2, 3)?.contiguous()?)?.reshape((b, c, h, w))?;
        let ys = (xs + attended)?;
        let ys = (&ys + self.feed_forward(&ys)?)?;
        Ok((ys, attn))
    }
}

impl Module for TransformerEncoder {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        Ok(self.forward_with_attention(xs)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::VarMap;

    fn build(heads: usize) -> (VarMap, TransformerEncoder) {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F64, &Device::Cpu);
        let enc = TransformerEncoder::new(
            &EncoderConfig {
                channels: 16,
                heads,
                ffn_channels: 32,
            },
            vb,
        )
        .unwrap();
        (vm, enc)
    }

    fn zero(vm: &VarMap, prefix: &str) {
        let data = vm.data().lock().unwrap();
        for (name, var) in data.iter() {
            if name.starts_with(prefix) {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn embedding_is_bounded_and_position_dependent() {
        let e = sinusoidal_embedding_2d(8, 3, 5, DType::F64, &Device::Cpu).unwrap();
        let v: Vec<f64> = e.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| x.abs() <= 1.0));
        // channel 0 is sin(row + 1), constant along a row
        let c0 = e.get(0).unwrap().get(0).unwrap();
        let r1: Vec<f64> = c0.get(1).unwrap().to_vec1().unwrap();
        assert!(r1.iter().all(|&x| (x - 2f64.sin()).abs() < 1e-12));
    }

    #[test]
    fn residual_paths() {
        let (vm, enc) = build(2);
        let x = Tensor::randn(0f64, 1.0, (2, 16, 3, 4), &Device::Cpu).unwrap();
        zero(&vm, "value.");
        let y = enc.forward(&x).unwrap();
        let expect = (&x + enc.feed_forward(&x).unwrap()).unwrap();
        assert!(max_abs_diff(&y, &expect) < 1e-12);
        zero(&vm, "ffn_out.");
        let y = enc.forward(&x).unwrap();
        assert!(max_abs_diff(&y, &x) == 0.0);
    }
}
