//! Gridded field data: the `GridField` datum, paired LR/HR samples,
//! standardization, and synthetic fixtures.
//!
//! All real fields are two-meter temperature on a lat-lon grid: LR at 5.625°
//! (32 × 64) paired with HR at 1.40525° (128 × 256).

pub mod netcdf;

use chrono::{DateTime, TimeZone, Utc};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use std::path::Path;

use crate::error::{Result, WxError};

/// Canonical LR grid shape (height, width).
pub const LR_SHAPE: (usize, usize) = (32, 64);
/// Canonical HR grid shape (height, width).
pub const HR_SHAPE: (usize, usize) = (128, 256);
/// Grid spacing of the LR archive in degrees.
pub const LR_SPACING_DEG: f64 = 5.625;
/// Grid spacing of the HR archive in degrees.
pub const HR_SPACING_DEG: f64 = 1.40525;

/// Physical unit tag for a field's values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Kelvin,
    Standardized,
}

/// Which resolution's statistics to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Lr,
    Hr,
}

/// One single-channel 2D field on a lat-lon grid.
#[derive(Debug, Clone)]
pub struct GridField {
    pub values: Array2<f64>,
    pub units: Units,
    pub grid_spacing_deg: f64,
    pub timestamp: Option<DateTime<Utc>>,
}

impl GridField {
    pub fn new(values: Array2<f64>, units: Units, grid_spacing_deg: f64) -> Result<Self> {
        let (h, w) = values.dim();
        if h < 4 || w < 4 {
            return Err(WxError::Shape(format!(
                "grid must be at least 4x4, got {h}x{w}"
            )));
        }
        if grid_spacing_deg <= 0.0 {
            return Err(WxError::Config(format!(
                "grid spacing must be positive, got {grid_spacing_deg}"
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(WxError::Numeric("field contains non-finite values".into()));
        }
        Ok(GridField {
            values,
            units,
            grid_spacing_deg,
            timestamp: None,
        })
    }

    pub fn with_timestamp(mut self, ts: DateTime<Utc>) -> Self {
        self.timestamp = Some(ts);
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }
}

/// Aligned LR/HR pair sharing a timestamp and units.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub lr: GridField,
    pub hr: GridField,
    pub timestamp: DateTime<Utc>,
}

impl PairedSample {
    pub fn new(lr: GridField, hr: GridField, timestamp: DateTime<Utc>) -> Result<Self> {
        let (lh, lw) = lr.shape();
        let (hh, hw) = hr.shape();
        if hh != 4 * lh || hw != 4 * lw {
            return Err(WxError::Shape(format!(
                "hr dimensions must be 4x lr dimensions, got lr {lh}x{lw} vs hr {hh}x{hw}"
            )));
        }
        if lr.units != hr.units {
            return Err(WxError::Contract(
                "lr and hr of a pair must share units".into(),
            ));
        }
        Ok(PairedSample { lr, hr, timestamp })
    }
}

/// Scalar per-resolution standardization statistics, fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StandardizationStats {
    pub mean_lr: f64,
    pub std_lr: f64,
    pub mean_hr: f64,
    pub std_hr: f64,
}

impl StandardizationStats {
    /// Write as a small labeled text file (one `key = value` line per field).
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self)
            .map_err(|e| WxError::Data(format!("cannot serialize stats: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| WxError::Data(format!("bad stats file {path:?}: {e}")))
    }
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// Ordered collection of paired samples plus the stats used to standardize them.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub samples: Vec<PairedSample>,
    pub split: Split,
    pub stats: Option<StandardizationStats>,
    /// Number of candidate timestamps dropped because one side was missing.
    pub dropped: usize,
}

impl PairedDataset {
    pub fn from_samples(samples: Vec<PairedSample>, split: Split) -> Result<Self> {
        if samples.is_empty() {
            return Err(WxError::EmptyDataset("no samples".into()));
        }
        let shape = (samples[0].lr.shape(), samples[0].hr.shape());
        for s in &samples {
            if (s.lr.shape(), s.hr.shape()) != shape {
                return Err(WxError::Shape("samples must share identical shapes".into()));
            }
        }
        for w in samples.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(WxError::Data(
                    "sample timestamps must be strictly increasing".into(),
                ));
            }
        }
        Ok(PairedDataset {
            samples,
            split,
            stats: None,
            dropped: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn mean_std(fields: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut n = 0u64;
    let mut sum = 0.0;
    for v in fields.clone() {
        sum += v;
        n += 1;
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for v in fields {
        let d = v - mean;
        ss += d * d;
    }
    (mean, (ss / n as f64).sqrt())
}

/// Fit scalar mean/std per resolution over every pixel of the split.
pub fn fit_stats(ds: &PairedDataset) -> Result<StandardizationStats> {
    let lr_iter = ds.samples.iter().flat_map(|s| s.lr.values.iter().copied());
    let hr_iter = ds.samples.iter().flat_map(|s| s.hr.values.iter().copied());
    let (mean_lr, std_lr) = mean_std(lr_iter);
    let (mean_hr, std_hr) = mean_std(hr_iter);
    if std_lr <= 0.0 || std_hr <= 0.0 {
        return Err(WxError::Degenerate(
            "standardization std is zero (constant-valued dataset)".into(),
        ));
    }
    Ok(StandardizationStats {
        mean_lr,
        std_lr,
        mean_hr,
        std_hr,
    })
}

/// Map each field to zero-mean/unit-std using per-resolution scalar stats.
///
/// When `stats` is omitted they are fitted on `ds`, which must be the training
/// split; a validation split reuses the training stats verbatim.
pub fn standardize(ds: &PairedDataset, stats: Option<StandardizationStats>) -> Result<PairedDataset> {
    let stats = match stats {
        Some(s) => s,
        None => {
            if ds.split != Split::Train {
                return Err(WxError::Contract(
                    "stats may only be fitted on the training split".into(),
                ));
            }
            fit_stats(ds)?
        }
    };
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            let lr_vals = s.lr.values.mapv(|v| (v - stats.mean_lr) / stats.std_lr);
            let hr_vals = s.hr.values.mapv(|v| (v - stats.mean_hr) / stats.std_hr);
            let mut lr = s.lr.clone();
            lr.values = lr_vals;
            lr.units = Units::Standardized;
            let mut hr = s.hr.clone();
            hr.values = hr_vals;
            hr.units = Units::Standardized;
            PairedSample {
                lr,
                hr,
                timestamp: s.timestamp,
            }
        })
        .collect();
    Ok(PairedDataset {
        samples,
        split: ds.split,
        stats: Some(stats),
        dropped: ds.dropped,
    })
}

/// Undo standardization for one field using the given resolution's stats.
pub fn destandardize(
    f: &GridField,
    stats: &StandardizationStats,
    resolution: Resolution,
) -> Result<GridField> {
    if f.units != Units::Standardized {
        return Err(WxError::Contract(
            "destandardize expects a standardized field".into(),
        ));
    }
    let (mean, std) = match resolution {
        Resolution::Lr => (stats.mean_lr, stats.std_lr),
        Resolution::Hr => (stats.mean_hr, stats.std_hr),
    };
    let mut out = f.clone();
    out.values = f.values.mapv(|v| v * std + mean);
    out.units = Units::Kelvin;
    Ok(out)
}

/// Block-mean pooling over `factor`×`factor` cells.
pub fn downsample(hr: &GridField, factor: usize) -> Result<GridField> {
    if factor == 0 {
        return Err(WxError::Config("downsample factor must be positive".into()));
    }
    let (h, w) = hr.shape();
    if h % factor != 0 || w % factor != 0 {
        return Err(WxError::Shape(format!(
            "dimensions {h}x{w} not divisible by factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Array2::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for di in 0..factor {
                for dj in 0..factor {
                    acc += hr.values[[i * factor + di, j * factor + dj]];
                }
            }
            out[[i, j]] = acc * norm;
        }
    }
    let mut field = hr.clone();
    field.values = out;
    field.grid_spacing_deg = hr.grid_spacing_deg * factor as f64;
    Ok(field)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with mirror (reflect) boundary handling.
fn gaussian_blur(f: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let (h, w) = f.dim();
    let k = gaussian_kernel(sigma);
    let radius = k.len() / 2;
    let reflect = |idx: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = idx;
        // period 2(n-1) mirror without edge duplication
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
        }
        i as usize
    };
    let mut tmp = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (o, kv) in k.iter().enumerate() {
                let jj = reflect(j as isize + o as isize - radius as isize, w);
                acc += f[[i, jj]] * kv;
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for j in 0..w {
        for i in 0..h {
            let mut acc = 0.0;
            for (o, kv) in k.iter().enumerate() {
                let ii = reflect(i as isize + o as isize - radius as isize, h);
                acc += tmp[[ii, j]] * kv;
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Deterministic synthetic pair: HR = unit-normalized Gaussian-smoothed seeded
/// noise at 128×256, LR = 4× block-mean downsample of HR.
pub fn synth_pair(seed: u64, smoothness: f64) -> Result<PairedSample> {
    if !(smoothness > 0.0) {
        return Err(WxError::Config(format!(
            "smoothness must be positive, got {smoothness}"
        )));
    }
    let (h, w) = HR_SHAPE;
    // Mix the smoothness bits into the stream so (seed, smoothness) is the full key.
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ smoothness.to_bits().rotate_left(17));
    let mut noise = Array2::zeros((h, w));
    for v in noise.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    let smooth = gaussian_blur(&noise, smoothness);
    let (mean, std) = mean_std(smooth.iter().copied());
    let hr_vals = smooth.mapv(|v| (v - mean) / std);
    let hr = GridField::new(hr_vals, Units::Standardized, HR_SPACING_DEG)?;
    let lr = downsample(&hr, 4)?;
    // Synthetic timestamps advance one hour per seed so datasets stay ordered.
    let ts = Utc
        .with_ymd_and_hms(2000, 1, 1, 0, 0, 0)
        .unwrap()
        .checked_add_signed(chrono::Duration::hours(seed as i64))
        .unwrap();
    PairedSample::new(lr.with_timestamp(ts), hr.with_timestamp(ts), ts)
}

/// Build a synthetic dataset from consecutive seeds.
pub fn synth_dataset(
    seed_start: u64,
    count: usize,
    smoothness: f64,
    split: Split,
) -> Result<PairedDataset> {
    let samples: Vec<PairedSample> = (0..count)
        .map(|i| synth_pair(seed_start + i as u64, smoothness))
        .collect::<Result<_>>()?;
    PairedDataset::from_samples(samples, split)
}
