//! Small neural-net primitives on candle tensors: a named parameter store
//! with deterministic seeded initialization, group normalization, dropout,
//! and single-head self-attention.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::ops::softmax;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

use crate::error::{Result, WxError};

/// Initialization recipe for one parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) with std = `scale / sqrt(fan_in)`.
    ScaledNormal { fan_in: usize, scale: f64 },
}

/// Named trainable parameters with per-name deterministic initialization.
///
/// Every parameter's values are a pure function of `(seed, name, shape)`,
/// independent of registration order.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    pub dtype: DType,
    pub device: Device,
    seed: u64,
}

fn name_rng(seed: u64, name: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha20Rng::from_seed(key)
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
            device,
            seed,
        }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.vars.contains_key(name) {
            return Err(WxError::Contract(format!(
                "parameter {name:?} registered twice"
            )));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::ScaledNormal { fan_in, scale } => {
                let std = scale / (fan_in.max(1) as f64).sqrt();
                let mut rng = name_rng(self.seed, name);
                (0..n)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                    .collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| WxError::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| WxError::Contract(format!("unknown parameter {name:?}")))
    }

    /// Sorted (name, var) pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter's value (checkpoint restore).
    pub fn set(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| WxError::Checkpoint(format!("unknown parameter {name:?}")))?;
        if var.shape() != value.shape() {
            return Err(WxError::Checkpoint(format!(
                "parameter {name:?} shape mismatch: {:?} vs {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Detached snapshot of all parameter values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            out.insert(name.clone(), var.as_tensor().copy()?);
        }
        Ok(out)
    }
}

/// Either the live parameters or a detached (e.g. EMA) snapshot.
pub enum ParamView<'a> {
    Live(&'a ParamStore),
    Snapshot(&'a BTreeMap<String, Tensor>),
}

impl ParamView<'_> {
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        match self {
            ParamView::Live(store) => store.tensor(name),
            ParamView::Snapshot(map) => map
                .get(name)
                .cloned()
                .ok_or_else(|| WxError::Contract(format!("unknown parameter {name:?}"))),
        }
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let y = x.conv2d(w, padding, stride, 1, 1)?;
    Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?)
}

/// Group normalization over `groups` channel groups, eps 1e-5.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % groups != 0 {
        return Err(WxError::Shape(format!(
            "channels {c} not divisible by groups {groups}"
        )));
    }
    let xg = x.reshape((b, groups, c / groups * h * w))?;
    let mean = xg.mean_keepdim(2)?;
    let centered = xg.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    let normed = normed.reshape((b, c, h, w))?;
    let normed = normed.broadcast_mul(&gamma.reshape((1, (), 1, 1))?)?;
    Ok(normed.broadcast_add(&beta.reshape((1, (), 1, 1))?)?)
}

/// Largest group count ≤ 8 that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Inverted dropout driven by an explicit rng; identity when `p == 0`.
pub fn dropout(x: &Tensor, p: f64, rng: &mut ChaCha20Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    if !(p < 1.0) {
        return Err(WxError::Config(format!("dropout must be in [0,1), got {p}")));
    }
    let n = x.elem_count();
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Weights of one single-head self-attention block.
pub struct SelfAttnWeights {
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Pre-normed single-head self-attention with residual connection.
pub fn self_attention(x: &Tensor, w: &SelfAttnWeights) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let n = h * wd;
    let y = group_norm(x, &w.norm_g, &w.norm_b, norm_groups(c))?;
    let tok = y.reshape((b, c, n))?.transpose(1, 2)?; // [b, n, c]
    let project = |t: &Tensor, wm: &Tensor, bias: &Tensor| -> Result<Tensor> {
        let y = t.broadcast_matmul(&wm.t()?.unsqueeze(0)?)?;
        Ok(y.broadcast_add(&bias.reshape((1, 1, ()))?)?)
    };
    let q = project(&tok, &w.wq, &w.bq)?;
    let k = project(&tok, &w.wk, &w.bk)?;
    let v = project(&tok, &w.wv, &w.bv)?;
    let att = (q.matmul(&k.transpose(1, 2)?)? * (1.0 / (c as f64).sqrt()))?;
    let att = softmax(&att, D::Minus1)?;
    let out = att.matmul(&v)?;
    let out = project(&out, &w.wo, &w.bo)?;
    let out = out.transpose(1, 2)?.reshape((b, c, h, wd))?;
    Ok((x + out)?)
}

/// Per-batch sinusoidal embedding of a scaled log noise level.
///
/// Input `s` is `100·(−ln ᾱ_t)` per batch item; output is `[b, dim]` with
/// interleaved sin/cos halves using transformer frequencies.
pub fn sinusoidal_embedding(
    s: &[f64],
    dim: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(WxError::Config(format!(
            "embedding dim must be even, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(s.len() * dim);
    for &v in s {
        for k in 0..half {
            let freq = (-(10_000f64).ln() * k as f64 / (half.max(2) - 1) as f64).exp();
            data.push((v * freq).sin());
        }
        for k in 0..half {
            let freq = (-(10_000f64).ln() * k as f64 / (half.max(2) - 1) as f64).exp();
            data.push((v * freq).cos());
        }
    }
    let t = Tensor::from_vec(data, (s.len(), dim), device)?.to_dtype(dtype)?;
    Ok(t)
}
