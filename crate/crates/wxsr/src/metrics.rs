//! Validation metrics: MSE, MAE, PSNR and SSIM over destandardized fields.
//!
//! SSIM uses the canonical 11×11 Gaussian window (σ = 1.5) with
//! C1 = (0.01·range)², C2 = (0.03·range)², evaluated on valid windows only
//! (no padding) via separable filtering.

use ndarray::Array2;

use crate::error::{Result, WxError};
use crate::grid_data::GridField;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Pixelwise mean squared and mean absolute differences.
pub fn error_metrics(pred: &GridField, reference: &GridField) -> Result<(f64, f64)> {
    error_metrics_values(&pred.values, &reference.values)
}

pub fn error_metrics_values(pred: &Array2<f64>, reference: &Array2<f64>) -> Result<(f64, f64)> {
    if pred.dim() != reference.dim() {
        return Err(WxError::Shape(format!(
            "metric shapes disagree: {:?} vs {:?}",
            pred.dim(),
            reference.dim()
        )));
    }
    let n = pred.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (a, b) in pred.iter().zip(reference.iter()) {
        let d = a - b;
        se += d * d;
        ae += d.abs();
    }
    Ok((se / n, ae / n))
}

/// 10·log10(range² / mse); +∞ when the fields are identical.
pub fn psnr(pred: &GridField, reference: &GridField, data_range: f64) -> Result<f64> {
    let (mse, _) = error_metrics(pred, reference)?;
    psnr_from_mse(mse, data_range)
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(WxError::Domain(format!(
            "data_range must be positive, got {data_range}"
        )));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filtering with the SSIM window.
fn filter_valid(f: &Array2<f64>) -> Array2<f64> {
    let (h, w) = f.dim();
    let g = gaussian_window();
    let k = SSIM_WINDOW;
    let mut rows = Array2::zeros((h, w - k + 1));
    for i in 0..h {
        for j in 0..w - k + 1 {
            let mut acc = 0.0;
            for (o, gv) in g.iter().enumerate() {
                acc += gv * f[[i, j + o]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((h - k + 1, w - k + 1));
    for i in 0..h - k + 1 {
        for j in 0..w - k + 1 {
            let mut acc = 0.0;
            for (o, gv) in g.iter().enumerate() {
                acc += gv * rows[[i + o, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Mean local SSIM over valid windows.
pub fn ssim(pred: &GridField, reference: &GridField, data_range: f64) -> Result<f64> {
    ssim_values(&pred.values, &reference.values, data_range)
}

pub fn ssim_values(pred: &Array2<f64>, reference: &Array2<f64>, data_range: f64) -> Result<f64> {
    if pred.dim() != reference.dim() {
        return Err(WxError::Shape(format!(
            "ssim shapes disagree: {:?} vs {:?}",
            pred.dim(),
            reference.dim()
        )));
    }
    if !(data_range > 0.0) {
        return Err(WxError::Domain(format!(
            "data_range must be positive, got {data_range}"
        )));
    }
    let (h, w) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(WxError::Shape(format!(
            "ssim window {SSIM_WINDOW} larger than field {h}x{w}"
        )));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);

    let mu1 = filter_valid(pred);
    let mu2 = filter_valid(reference);
    let m11 = filter_valid(&(pred * pred));
    let m22 = filter_valid(&(reference * reference));
    let m12 = filter_valid(&(pred * reference));

    let mut acc = 0.0;
    for idx in ndarray::indices(mu1.dim()) {
        let (u1, u2) = (mu1[idx], mu2[idx]);
        let s1 = m11[idx] - u1 * u1;
        let s2 = m22[idx] - u2 * u2;
        let s12 = m12[idx] - u1 * u2;
        let val = ((2.0 * u1 * u2 + c1) * (2.0 * s12 + c2))
            / ((u1 * u1 + u2 * u2 + c1) * (s1 + s2 + c2));
        acc += val;
    }
    Ok(acc / mu1.len() as f64)
}

/// Aggregated evaluation metrics for one prediction set.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub n_samples: usize,
    pub data_range: f64,
}

impl MetricsReport {
    /// Aggregate over aligned prediction/reference sets: MSE/MAE/SSIM are
    /// averaged per sample, PSNR derives from the pooled MSE so that
    /// `mse == 0 ⇔ psnr == ∞` holds for the report itself.
    pub fn from_fields(
        preds: &[GridField],
        refs: &[GridField],
        data_range: f64,
    ) -> Result<MetricsReport> {
        if preds.is_empty() || preds.len() != refs.len() {
            return Err(WxError::Contract(format!(
                "need matching non-empty sets, got {} vs {}",
                preds.len(),
                refs.len()
            )));
        }
        let mut mse = 0.0;
        let mut mae = 0.0;
        let mut ssim_acc = 0.0;
        for (p, r) in preds.iter().zip(refs) {
            let (m, a) = error_metrics(p, r)?;
            mse += m;
            mae += a;
            ssim_acc += ssim(p, r, data_range)?;
        }
        let n = preds.len() as f64;
        let mse = mse / n;
        Ok(MetricsReport {
            mse,
            mae: mae / n,
            psnr: psnr_from_mse(mse, data_range)?,
            ssim: ssim_acc / n,
            n_samples: preds.len(),
            data_range,
        })
    }

    /// Flat `key = value` text block.
    pub fn to_text(&self, prefix: &str) -> String {
        let mut out = String::new();
        let p = if prefix.is_empty() {
            String::new()
        } else {
            format!("{prefix}_")
        };
        out.push_str(&format!("{p}mse = {:.6}\n", self.mse));
        out.push_str(&format!("{p}mae = {:.6}\n", self.mae));
        out.push_str(&format!("{p}psnr = {:.4}\n", self.psnr));
        out.push_str(&format!("{p}ssim = {:.6}\n", self.ssim));
        out.push_str(&format!("{p}n_samples = {}\n", self.n_samples));
        out.push_str(&format!("{p}data_range = {:.6}\n", self.data_range));
        out
    }
}

/// The max−min of the HR ground truth set, the PSNR/SSIM range constant.
pub fn data_range_of(refs: &[GridField]) -> Result<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for f in refs {
        for &v in f.values.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(hi > lo) {
        return Err(WxError::Degenerate(
            "reference set has zero value range".into(),
        ));
    }
    Ok(hi - lo)
}
