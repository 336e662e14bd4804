//! Discrete wavelet decomposition of the conditioning image and the
//! high-frequency-guided cross-attention hook that injects its detail
//! subbands into the denoiser.
//!
//! The wavelet side is a single-level orthonormal Haar transform; the
//! attention side runs on tensors so its projections train with the model.

use candle_core::{Tensor, D};
use candle_nn::ops::softmax;
use ndarray::Array2;

use crate::error::{Result, WxError};

/// Wavelet family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    Haar,
}

impl std::str::FromStr for WaveletFamily {
    type Err = WxError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(WaveletFamily::Haar),
            other => Err(WxError::Config(format!("unknown wavelet family {other:?}"))),
        }
    }
}

/// Single-level 2D subbands, each (h/2 × w/2). First letter = row filter,
/// second = column filter; `lh`/`hl`/`hh` are the high-frequency components.
#[derive(Debug, Clone)]
pub struct WaveletSubbands {
    pub ll: Array2<f64>,
    pub lh: Array2<f64>,
    pub hl: Array2<f64>,
    pub hh: Array2<f64>,
    pub wavelet: WaveletFamily,
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn haar_axis_pairs(a: f64, b: f64) -> (f64, f64) {
    ((a + b) * INV_SQRT2, (a - b) * INV_SQRT2)
}

/// Single-level separable orthonormal DWT; input dimensions must be even.
pub fn dwt2(f: &Array2<f64>, wavelet: WaveletFamily) -> Result<WaveletSubbands> {
    let (h, w) = f.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(WxError::Shape(format!(
            "dwt2 needs even dimensions, got {h}x{w}"
        )));
    }
    let (h2, w2) = (h / 2, w / 2);
    // filter along columns
    let mut low = Array2::zeros((h, w2));
    let mut high = Array2::zeros((h, w2));
    for i in 0..h {
        for k in 0..w2 {
            let (l, hi) = haar_axis_pairs(f[[i, 2 * k]], f[[i, 2 * k + 1]]);
            low[[i, k]] = l;
            high[[i, k]] = hi;
        }
    }
    // then along rows
    let mut ll = Array2::zeros((h2, w2));
    let mut lh = Array2::zeros((h2, w2));
    let mut hl = Array2::zeros((h2, w2));
    let mut hh = Array2::zeros((h2, w2));
    for k in 0..h2 {
        for j in 0..w2 {
            let (l, hi) = haar_axis_pairs(low[[2 * k, j]], low[[2 * k + 1, j]]);
            ll[[k, j]] = l;
            hl[[k, j]] = hi;
            let (l2, hi2) = haar_axis_pairs(high[[2 * k, j]], high[[2 * k + 1, j]]);
            lh[[k, j]] = l2;
            hh[[k, j]] = hi2;
        }
    }
    Ok(WaveletSubbands {
        ll,
        lh,
        hl,
        hh,
        wavelet,
    })
}

/// Inverse of [`dwt2`]; perfect reconstruction for the orthonormal filters.
pub fn idwt2(sub: &WaveletSubbands) -> Result<Array2<f64>> {
    let (h2, w2) = sub.ll.dim();
    for band in [&sub.lh, &sub.hl, &sub.hh] {
        if band.dim() != (h2, w2) {
            return Err(WxError::Shape("subband shapes disagree".into()));
        }
    }
    let (h, w) = (2 * h2, 2 * w2);
    let mut low = Array2::zeros((h, w2));
    let mut high = Array2::zeros((h, w2));
    for k in 0..h2 {
        for j in 0..w2 {
            let (a, b) = haar_axis_pairs(sub.ll[[k, j]], sub.hl[[k, j]]);
            low[[2 * k, j]] = a;
            low[[2 * k + 1, j]] = b;
            let (a2, b2) = haar_axis_pairs(sub.lh[[k, j]], sub.hh[[k, j]]);
            high[[2 * k, j]] = a2;
            high[[2 * k + 1, j]] = b2;
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w2 {
            let (a, b) = haar_axis_pairs(low[[i, j]], high[[i, j]]);
            out[[i, 2 * j]] = a;
            out[[i, 2 * j + 1]] = b;
        }
    }
    Ok(out)
}

/// Stack the three HF subbands as a `[batch=1, 3, h/2, w/2]`-shaped tensor.
pub fn hf_subband_tensor(
    sub: &WaveletSubbands,
    dtype: candle_core::DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let (h2, w2) = sub.lh.dim();
    let mut data = Vec::with_capacity(3 * h2 * w2);
    for band in [&sub.lh, &sub.hl, &sub.hh] {
        data.extend(band.iter().copied());
    }
    let t = Tensor::from_vec(data, (1, 3, h2, w2), device)?.to_dtype(dtype)?;
    Ok(t)
}

/// 1×1 projection of the stacked HF subbands down to one guidance map.
///
/// `proj_w` has shape `[1, 3, 1, 1]`, `proj_b` shape `[1]`; the input is the
/// `[b, 3, h/2, w/2]` subband stack.
pub fn hf_guidance(subbands: &Tensor, proj_w: &Tensor, proj_b: &Tensor) -> Result<Tensor> {
    let c_in = subbands.dim(1)?;
    if c_in != proj_w.dim(1)? {
        return Err(WxError::Shape(format!(
            "guidance projection expects {} input channels, got {c_in}",
            proj_w.dim(1)?
        )));
    }
    let g = subbands.conv2d(proj_w, 0, 1, 1, 1)?;
    let g = g.broadcast_add(&proj_b.reshape((1, (), 1, 1))?)?;
    Ok(g)
}

/// Nearest-neighbour spatial resampling via differentiable index selection.
pub fn resample_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let dev = x.device();
    let rows: Vec<u32> = (0..out_h).map(|i| ((i * h) / out_h) as u32).collect();
    let cols: Vec<u32> = (0..out_w).map(|j| ((j * w) / out_w) as u32).collect();
    let row_idx = Tensor::from_vec(rows, out_h, dev)?;
    let col_idx = Tensor::from_vec(cols, out_w, dev)?;
    let x = x.index_select(&row_idx, 2)?;
    let x = x.index_select(&col_idx, 3)?;
    Ok(x)
}

/// Weights of one multi-head cross-attention block. Queries derive from the
/// feature stack, keys/values from the single-channel guidance map.
pub struct CrossAttnWeights<'a> {
    pub wq: &'a Tensor, // [c, c]
    pub bq: &'a Tensor, // [c]
    pub wk: &'a Tensor, // [c, 1]
    pub bk: &'a Tensor, // [c]
    pub wv: &'a Tensor, // [c, 1]
    pub bv: &'a Tensor, // [c]
    pub wo: &'a Tensor, // [c, c]
    pub bo: &'a Tensor, // [c]
}

/// Residual multi-head cross-attention: `out = features + W_o(attn)`.
///
/// With a zero output projection (`wo = 0`, `bo = 0`) this is the identity.
pub fn cross_attend(
    features: &Tensor,
    guidance: &Tensor,
    w: &CrossAttnWeights,
    heads: usize,
) -> Result<Tensor> {
    let (b, c, h, wd) = features.dims4()?;
    if c % heads != 0 {
        return Err(WxError::Shape(format!(
            "channels {c} not divisible by heads {heads}"
        )));
    }
    if guidance.dim(0)? != b || guidance.dim(1)? != 1 {
        return Err(WxError::Shape(format!(
            "guidance must be [batch, 1, h, w], got {:?}",
            guidance.dims()
        )));
    }
    let g = resample_nearest(guidance, h, wd)?;
    let n = h * wd;
    let dk = c / heads;

    let feat_tok = features.reshape((b, c, n))?.transpose(1, 2)?; // [b, n, c]
    let g_tok = g.reshape((b, 1, n))?.transpose(1, 2)?; // [b, n, 1]

    let project = |tok: &Tensor, wm: &Tensor, bias: &Tensor| -> Result<Tensor> {
        // tok [b, n, cin] x wm^T [cin, c] -> [b, n, c]
        let y = tok.broadcast_matmul(&wm.t()?.unsqueeze(0)?)?;
        Ok(y.broadcast_add(&bias.reshape((1, 1, ()))?)?)
    };
    let q = project(&feat_tok, w.wq, w.bq)?;
    let k = project(&g_tok, w.wk, w.bk)?;
    let v = project(&g_tok, w.wv, w.bv)?;

    // [b, n, c] -> [b*heads, n, dk]
    let split = |t: &Tensor| -> Result<Tensor> {
        Ok(t.reshape((b, n, heads, dk))?
            .transpose(1, 2)?
            .reshape((b * heads, n, dk))?
            .contiguous()?)
    };
    let (q, k, v) = (split(&q)?, split(&k)?, split(&v)?);
    let scale = 1.0 / (dk as f64).sqrt();
    let att = (q.matmul(&k.transpose(1, 2)?)? * scale)?;
    let att = softmax(&att, D::Minus1)?;
    let out = att.matmul(&v)?; // [b*heads, n, dk]
    let out = out
        .reshape((b, heads, n, dk))?
        .transpose(1, 2)?
        .reshape((b, n, c))?;
    let out = project(&out, w.wo, w.bo)?;
    let out = out.transpose(1, 2)?.reshape((b, c, h, wd))?;
    Ok((features + out)?)
}
