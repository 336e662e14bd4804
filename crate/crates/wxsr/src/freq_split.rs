//! Frequency-domain information splitter: decomposes conditioning inputs into
//! high/low-frequency representations and assembles the five-map conditioning
//! stack.
//!
//! Pipeline: 2D FFT of the interpolated and noised images; a residual
//! squeeze-excite block over the stacked spectral magnitudes sets the
//! high-pass width σ = min(mean|ResSE(M)| + l/2, l); a Gaussian high-pass
//! H(u,v) = 1 − exp(−D²/(2σ²)) splits the interpolated image's spectrum into
//! a high-pass-enriched part L and its low-frequency complement.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Result, WxError};

/// Unnormalized forward 2D FFT.
pub fn fft2(f: &Array2<f64>) -> Array2<Complex64> {
    let spectrum = f.mapv(|v| Complex64::new(v, 0.0));
    fft2_complex(spectrum, false)
}

/// Inverse 2D FFT with 1/(h·w) normalization.
pub fn ifft2(spectrum: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = spectrum.dim();
    let mut out = fft2_complex(spectrum.clone(), true);
    let norm = 1.0 / (h * w) as f64;
    out.mapv_inplace(|v| v * norm);
    out
}

fn fft2_complex(mut data: Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::new();
    let fft_rows = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for mut row in data.rows_mut() {
        let slice = row.as_slice_mut().expect("row-major layout");
        fft_rows.process(slice);
    }
    let fft_cols = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col_buf = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col_buf[i] = data[[i, j]];
        }
        fft_cols.process(&mut col_buf);
        for i in 0..h {
            data[[i, j]] = col_buf[i];
        }
    }
    data
}

/// Gaussian high-pass mask over centered frequency coordinates.
#[derive(Debug, Clone)]
pub struct FrequencyMask {
    /// H(u,v) ∈ [0, 1), laid out to match an unshifted FFT spectrum.
    pub values: Array2<f64>,
    pub sigma: f64,
    /// Clamp bound used when σ was derived; equals `sigma` for direct builds.
    pub limit_l: f64,
}

impl FrequencyMask {
    /// The low-pass complement 1 − H.
    pub fn complement(&self) -> Array2<f64> {
        self.values.mapv(|v| 1.0 - v)
    }
}

/// Radial distance of bin (u, v) from the DC bin in centered coordinates.
fn freq_distance(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let du = u.min(h - u) as f64;
    let dv = v.min(w - v) as f64;
    (du * du + dv * dv).sqrt()
}

/// H(u,v) = 1 − exp(−D²(u,v) / (2σ²)); H(0,0) = 0 exactly.
pub fn highpass_mask(shape: (usize, usize), sigma: f64) -> Result<FrequencyMask> {
    let (h, w) = shape;
    if h < 2 || w < 2 {
        return Err(WxError::Shape(format!("mask needs h,w >= 2, got {h}x{w}")));
    }
    if !(sigma > 0.0) {
        return Err(WxError::Config(format!("sigma must be positive, got {sigma}")));
    }
    // Where the Gaussian term underflows, clamp to the largest double below
    // one so the mask stays inside [0, 1).
    let below_one = 1.0f64.next_down();
    let values = Array2::from_shape_fn((h, w), |(u, v)| {
        let d = freq_distance(u, v, h, w);
        (1.0 - (-d * d / (2.0 * sigma * sigma)).exp()).min(below_one)
    });
    Ok(FrequencyMask {
        values,
        sigma,
        limit_l: sigma,
    })
}

/// σ = min(mean|resse_out| + l/2, l); always lands in [l/2, l].
pub fn sigma_from_resse(resse_out: &[Array2<f64>], limit_l: f64) -> f64 {
    let mut n = 0usize;
    let mut acc = 0.0;
    for ch in resse_out {
        for v in ch.iter() {
            acc += v.abs();
            n += 1;
        }
    }
    let mean_abs = if n == 0 { 0.0 } else { acc / n as f64 };
    (mean_abs + limit_l / 2.0).min(limit_l)
}

/// Residual squeeze-and-excitation block over a channel stack.
///
/// `out_c = M_c + M_c · w_c` with per-channel weights
/// `w = sigmoid(W2·relu(W1·gap(M) + b1) + b2)`. Parameters are fixed at
/// seeded initialization; conditioning assembly stays a pure function.
#[derive(Debug, Clone)]
pub struct ResSeBlock {
    pub channels: usize,
    pub bottleneck: usize,
    pub w1: Array2<f64>,
    pub b1: Vec<f64>,
    pub w2: Array2<f64>,
    pub b2: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ResSeBlock {
    /// Deterministic initialization; `reduction` is the bottleneck ratio r.
    pub fn seeded(channels: usize, reduction: usize, seed: u64) -> Self {
        let bottleneck = (channels / reduction).max(1);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut randn = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect()
        };
        let s1 = 1.0 / (channels as f64).sqrt();
        let w1 = Array2::from_shape_vec((bottleneck, channels), randn(bottleneck * channels, s1))
            .unwrap();
        let b1 = randn(bottleneck, 0.1);
        let s2 = 1.0 / (bottleneck as f64).sqrt();
        let w2 = Array2::from_shape_vec((channels, bottleneck), randn(channels * bottleneck, s2))
            .unwrap();
        let b2 = randn(channels, 0.1);
        ResSeBlock {
            channels,
            bottleneck,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// Per-channel excitation weights in (0, 1).
    pub fn excitation(&self, stack: &[Array2<f64>]) -> Vec<f64> {
        let gap: Vec<f64> = stack
            .iter()
            .map(|ch| ch.iter().sum::<f64>() / ch.len() as f64)
            .collect();
        let hidden: Vec<f64> = (0..self.bottleneck)
            .map(|i| {
                let z: f64 = (0..self.channels).map(|c| self.w1[[i, c]] * gap[c]).sum::<f64>()
                    + self.b1[i];
                z.max(0.0)
            })
            .collect();
        (0..self.channels)
            .map(|c| {
                let z: f64 = (0..self.bottleneck)
                    .map(|i| self.w2[[c, i]] * hidden[i])
                    .sum::<f64>()
                    + self.b2[c];
                sigmoid(z)
            })
            .collect()
    }

    /// Residual combination with explicit weights: out = M + M ⊙ w.
    pub fn apply_with_weights(stack: &[Array2<f64>], weights: &[f64]) -> Vec<Array2<f64>> {
        stack
            .iter()
            .zip(weights)
            .map(|(ch, &w)| ch * (1.0 + w))
            .collect()
    }

    pub fn apply(&self, stack: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
        if stack.len() != self.channels {
            return Err(WxError::Shape(format!(
                "ResSE expects {} channels, got {}",
                self.channels,
                stack.len()
            )));
        }
        let w = self.excitation(stack);
        Ok(Self::apply_with_weights(stack, &w))
    }
}

/// The five conditioning maps: interpolated LR, noise-added image, high/low
/// frequency components, and the current diffusion state.
#[derive(Debug, Clone)]
pub struct FiveMaps {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub x_hf: Array2<f64>,
    pub x_lf: Array2<f64>,
    pub x_t: Array2<f64>,
}

impl FiveMaps {
    pub fn channels(&self) -> [&Array2<f64>; 5] {
        [&self.x, &self.y, &self.x_hf, &self.x_lf, &self.x_t]
    }
}

/// FD Info Splitter with its two frozen ResSE blocks and the σ clamp `l`.
#[derive(Debug, Clone)]
pub struct FdInfoSplitter {
    pub resse_features: ResSeBlock,
    pub resse_attention: ResSeBlock,
    pub limit_l: f64,
}

impl FdInfoSplitter {
    pub fn seeded(limit_l: f64, seed: u64) -> Result<Self> {
        if !(limit_l > 0.0) {
            return Err(WxError::Config(format!(
                "fd_splitter.limit_l must be positive, got {limit_l}"
            )));
        }
        Ok(FdInfoSplitter {
            resse_features: ResSeBlock::seeded(2, 4, seed ^ 0x5eed_0001),
            resse_attention: ResSeBlock::seeded(1, 4, seed ^ 0x5eed_0002),
            limit_l,
        })
    }

    /// Decompose and assemble the five conditioning maps.
    pub fn split(
        &self,
        x_interp: &Array2<f64>,
        y_noised: &Array2<f64>,
        x_t: &Array2<f64>,
    ) -> Result<FiveMaps> {
        let shape = x_interp.dim();
        if y_noised.dim() != shape || x_t.dim() != shape {
            return Err(WxError::Shape(format!(
                "split inputs must share one shape, got {:?}/{:?}/{:?}",
                shape,
                y_noised.dim(),
                x_t.dim()
            )));
        }
        let f_x = fft2(x_interp);
        let f_y = fft2(y_noised);
        let mags = [f_x.mapv(|c| c.norm()), f_y.mapv(|c| c.norm())];
        let refined = self.resse_features.apply(&mags)?;
        let sigma = sigma_from_resse(&refined, self.limit_l);
        let mut mask = highpass_mask(shape, sigma)?;
        mask.limit_l = self.limit_l;

        // High-pass-enriched spectrum of the interpolated image.
        let l_spec = Array2::from_shape_fn(shape, |idx| f_x[idx] * mask.values[idx]);
        let lf_spec = Array2::from_shape_fn(shape, |idx| f_x[idx] * (1.0 - mask.values[idx]));
        let x_lf = ifft2(&lf_spec).mapv(|c| c.re);

        // Attention weights from the refined high-pass image, squashed to (0,1).
        let hf_img = ifft2(&l_spec).mapv(|c| c.norm());
        let refined_hf = self.resse_attention.apply(&[hf_img])?;
        let weights = refined_hf[0].mapv(sigmoid);
        let x_hf = x_interp * &weights;

        let maps = FiveMaps {
            x: x_interp.clone(),
            y: y_noised.clone(),
            x_hf,
            x_lf,
            x_t: x_t.clone(),
        };
        for ch in maps.channels() {
            if !ch.iter().all(|v| v.is_finite()) {
                return Err(WxError::Numeric(
                    "non-finite value in frequency split output".into(),
                ));
            }
        }
        Ok(maps)
    }

    /// Named parameter arrays for checkpointing.
    pub fn named_params(&self) -> Vec<(String, Vec<f64>, Vec<usize>)> {
        let mut out = Vec::new();
        for (prefix, block) in [
            ("fd_splitter.features", &self.resse_features),
            ("fd_splitter.attention", &self.resse_attention),
        ] {
            out.push((
                format!("{prefix}.w1"),
                block.w1.iter().copied().collect(),
                vec![block.w1.dim().0, block.w1.dim().1],
            ));
            out.push((format!("{prefix}.b1"), block.b1.clone(), vec![block.b1.len()]));
            out.push((
                format!("{prefix}.w2"),
                block.w2.iter().copied().collect(),
                vec![block.w2.dim().0, block.w2.dim().1],
            ));
            out.push((format!("{prefix}.b2"), block.b2.clone(), vec![block.b2.len()]));
        }
        out
    }

    /// Rebuild from checkpointed parameter arrays.
    pub fn from_named_params(
        limit_l: f64,
        params: &std::collections::BTreeMap<String, (Vec<f64>, Vec<usize>)>,
    ) -> Result<Self> {
        let get = |name: &str| -> Result<&(Vec<f64>, Vec<usize>)> {
            params.get(name).ok_or_else(|| {
                WxError::Checkpoint(format!("missing splitter parameter {name:?}"))
            })
        };
        let block = |prefix: &str| -> Result<ResSeBlock> {
            let (w1v, w1s) = get(&format!("{prefix}.w1"))?;
            let (b1, _) = get(&format!("{prefix}.b1"))?;
            let (w2v, w2s) = get(&format!("{prefix}.w2"))?;
            let (b2, _) = get(&format!("{prefix}.b2"))?;
            let w1 = Array2::from_shape_vec((w1s[0], w1s[1]), w1v.clone())
                .map_err(|e| WxError::Checkpoint(e.to_string()))?;
            let w2 = Array2::from_shape_vec((w2s[0], w2s[1]), w2v.clone())
                .map_err(|e| WxError::Checkpoint(e.to_string()))?;
            Ok(ResSeBlock {
                channels: w2.dim().0,
                bottleneck: w1.dim().0,
                w1,
                b1: b1.clone(),
                w2,
                b2: b2.clone(),
            })
        };
        Ok(FdInfoSplitter {
            resse_features: block("fd_splitter.features")?,
            resse_attention: block("fd_splitter.attention")?,
            limit_l,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_field(seed: u64, h: usize, w: usize) -> Array2<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn fft_round_trip() {
        let f = random_field(1, 16, 24);
        let back = ifft2(&fft2(&f));
        for (a, b) in f.iter().zip(back.iter()) {
            assert_abs_diff_eq!(*a, b.re, epsilon = 1e-10);
            assert_abs_diff_eq!(0.0, b.im, epsilon = 1e-10);
        }
    }

    #[test]
    fn mask_is_zero_at_dc() {
        let m = highpass_mask((32, 32), 5.0).unwrap();
        assert_eq!(m.values[[0, 0]], 0.0);
    }

    #[test]
    fn mask_at_sigma_matches_closed_form() {
        let sigma = 8.0;
        let m = highpass_mask((64, 64), sigma).unwrap();
        // D((8,0)) = 8 = sigma
        let expected = 1.0 - (-0.5f64).exp();
        assert_abs_diff_eq!(m.values[[8, 0]], expected, epsilon = 1e-9);
    }

    #[test]
    fn mask_saturates_far_from_dc() {
        let sigma = 1.0;
        let m = highpass_mask((64, 64), sigma).unwrap();
        // D((10,0)) = 10σ
        assert!(m.values[[10, 0]] > 1.0 - 1e-12);
        assert!(m.values.iter().all(|&v| v < 1.0));
    }

    #[test]
    fn mask_increases_with_radial_distance() {
        let (h, w) = (32, 48);
        let m = highpass_mask((h, w), 4.0).unwrap();
        let mut by_d: Vec<(f64, f64)> = Vec::new();
        for u in 0..h {
            for v in 0..w {
                by_d.push((freq_distance(u, v, h, w), m.values[[u, v]]));
            }
        }
        by_d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for pair in by_d.windows(2) {
            if pair[1].0 > pair[0].0 {
                assert!(
                    pair[1].1 > pair[0].1,
                    "H must strictly increase with D: {:?} vs {:?}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn sigma_clamp_examples() {
        let zeros = [Array2::from_elem((4, 4), 0.0)];
        assert_eq!(sigma_from_resse(&zeros, 10.0), 5.0);
        let tens = [Array2::from_elem((4, 4), 10.0)];
        assert_eq!(sigma_from_resse(&tens, 10.0), 10.0);
        let mid = [Array2::from_elem((4, 4), 2.5)];
        assert_eq!(sigma_from_resse(&mid, 10.0), 7.5);
    }

    #[test]
    fn sigma_clamp_always_in_range() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let scale: f64 = 10f64.powf(rng.random_range(-3.0..3.0));
            let arr = [Array2::from_shape_fn((8, 8), |_| {
                rng.sample::<f64, _>(StandardNormal) * scale
            })];
            let l = rng.random_range(1e-3..1e3);
            let s = sigma_from_resse(&arr, l);
            assert!(s >= l / 2.0 && s <= l, "sigma {s} outside [{}, {l}]", l / 2.0);
        }
    }

    #[test]
    fn resse_forced_unit_weights_is_identity_plus_residual() {
        let stack = [random_field(2, 8, 8), random_field(3, 8, 8)];
        let out = ResSeBlock::apply_with_weights(&stack, &[1.0, 1.0]);
        for (o, m) in out.iter().zip(stack.iter()) {
            for (a, b) in o.iter().zip(m.iter()) {
                assert_abs_diff_eq!(*a, 2.0 * b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn resse_excitation_weights_in_unit_interval() {
        let block = ResSeBlock::seeded(2, 4, 7);
        let stack = [random_field(4, 16, 16), random_field(5, 16, 16)];
        for w in block.excitation(&stack) {
            assert!(w > 0.0 && w < 1.0);
        }
        let out = block.apply(&stack).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].dim(), (16, 16));
    }

    #[test]
    fn split_constant_field_is_all_low_frequency() {
        let splitter = FdInfoSplitter::seeded(64.0, 0).unwrap();
        let x = Array2::from_elem((128, 256), 1.75);
        let y = random_field(6, 128, 256);
        let maps = splitter.split(&x, &y, &y).unwrap();
        for (a, b) in maps.x_lf.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-6, "x_LF {a} vs x {b}");
        }
        // x_HF = x ⊙ w with w ∈ (0,1): strictly shrinks a constant field
        for (a, b) in maps.x_hf.iter().zip(x.iter()) {
            assert!(a.abs() < b.abs());
        }
    }

    #[test]
    fn split_outputs_five_full_resolution_maps() {
        let splitter = FdInfoSplitter::seeded(64.0, 1).unwrap();
        let x = random_field(7, 128, 256);
        let y = random_field(8, 128, 256);
        let t = random_field(9, 128, 256);
        let maps = splitter.split(&x, &y, &t).unwrap();
        for ch in maps.channels() {
            assert_eq!(ch.dim(), (128, 256));
            assert!(ch.iter().all(|v| v.is_finite()));
        }
        assert_eq!(maps.x, x);
        assert_eq!(maps.y, y);
        assert_eq!(maps.x_t, t);
    }

    #[test]
    fn mask_complementarity_reconstructs_input() {
        let f = random_field(10, 64, 96);
        let spec = fft2(&f);
        let mask = highpass_mask((64, 96), 9.0).unwrap();
        let hi = Array2::from_shape_fn((64, 96), |idx| spec[idx] * mask.values[idx]);
        let lo = Array2::from_shape_fn((64, 96), |idx| spec[idx] * (1.0 - mask.values[idx]));
        let recon = ifft2(&hi).mapv(|c| c.re) + ifft2(&lo).mapv(|c| c.re);
        let scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in recon.iter().zip(f.iter()) {
            assert!((a - b).abs() / scale < 1e-6);
        }
    }

    #[test]
    fn highpass_energy_decreases_with_sigma() {
        let f = random_field(11, 32, 32);
        let spec = fft2(&f);
        let energy = |sigma: f64| -> f64 {
            let m = highpass_mask((32, 32), sigma).unwrap();
            spec.indexed_iter()
                .map(|(idx, c)| (c * m.values[idx]).norm_sqr())
                .sum()
        };
        let mut prev = energy(0.5);
        for sigma in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let e = energy(sigma);
            assert!(e < prev, "energy must strictly decrease: {e} !< {prev}");
            prev = e;
        }
    }

    #[test]
    fn split_rejects_mismatched_shapes() {
        let splitter = FdInfoSplitter::seeded(64.0, 2).unwrap();
        let x = random_field(12, 16, 16);
        let y = random_field(13, 16, 32);
        assert!(matches!(
            splitter.split(&x, &y, &x),
            Err(WxError::Shape(_))
        ));
    }

    #[test]
    fn splitter_params_round_trip() {
        let splitter = FdInfoSplitter::seeded(64.0, 42).unwrap();
        let named = splitter.named_params();
        let map: std::collections::BTreeMap<String, (Vec<f64>, Vec<usize>)> = named
            .into_iter()
            .map(|(n, v, s)| (n, (v, s)))
            .collect();
        let back = FdInfoSplitter::from_named_params(64.0, &map).unwrap();
        assert_eq!(back.resse_features.w1, splitter.resse_features.w1);
        assert_eq!(back.resse_attention.b2, splitter.resse_attention.b2);
    }
}
