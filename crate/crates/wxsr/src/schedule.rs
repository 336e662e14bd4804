//! Diffusion noise schedule and the closed-form forward (noising) process.

use ndarray::Array2;

use crate::error::{Result, WxError};
use crate::grid_data::GridField;

/// Precomputed β/α/ᾱ tables for `T` timesteps, indexed by 1-based `t`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(WxError::Domain(format!(
                "timestep {t} outside 1..={}",
                self.t_max
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }
}

#[cfg(test)]
impl NoiseSchedule {
    /// Build directly from β values, bypassing range validation; lets tests
    /// probe edge schedules such as β ≡ 0.
    pub(crate) fn from_betas(beta: Vec<f64>) -> NoiseSchedule {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut prod = 1.0;
        let alpha_bar = alpha
            .iter()
            .map(|a| {
                prod *= a;
                prod
            })
            .collect();
        NoiseSchedule {
            t_max: beta.len(),
            beta,
            alpha,
            alpha_bar,
        }
    }
}

/// β_t = beta_start + (t−1)/(T−1) · (beta_end − beta_start), t = 1..T.
pub fn make_linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(WxError::Config(format!("T must be at least 2, got {t_max}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(WxError::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let mut beta = Vec::with_capacity(t_max);
    let mut alpha = Vec::with_capacity(t_max);
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for t in 1..=t_max {
        let b = beta_start + (t - 1) as f64 / (t_max - 1) as f64 * (beta_end - beta_start);
        let a = 1.0 - b;
        prod *= a;
        beta.push(b);
        alpha.push(a);
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        t_max,
        beta,
        alpha,
        alpha_bar,
    })
}

/// Reparameterized draw from q(y_t | y_0): √ᾱ_t·y0 + √(1−ᾱ_t)·eps.
pub fn forward_noise(
    y0: &GridField,
    t: usize,
    eps: &GridField,
    sched: &NoiseSchedule,
) -> Result<GridField> {
    if y0.shape() != eps.shape() {
        return Err(WxError::Shape(format!(
            "y0 shape {:?} != eps shape {:?}",
            y0.shape(),
            eps.shape()
        )));
    }
    let values = forward_noise_values(&y0.values, t, &eps.values, sched)?;
    let mut out = y0.clone();
    out.values = values;
    Ok(out)
}

/// Array-level forward noising used by the training loop.
pub fn forward_noise_values(
    y0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if y0.dim() != eps.dim() {
        return Err(WxError::Shape(format!(
            "y0 shape {:?} != eps shape {:?}",
            y0.dim(),
            eps.dim()
        )));
    }
    let ab = sched.alpha_bar(t)?;
    let c_signal = ab.sqrt();
    let c_noise = (1.0 - ab).sqrt();
    Ok(y0 * c_signal + eps * c_noise)
}
