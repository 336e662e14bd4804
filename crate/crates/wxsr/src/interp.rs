//! Bicubic upsampling — the initial prediction for every variant and the
//! evaluation baseline.
//!
//! Catmull-Rom kernel (a = −0.5), half-pixel-center alignment, edge
//! replication at the boundary. No longitude wraparound.

use ndarray::Array2;

use crate::error::{Result, WxError};
use crate::grid_data::GridField;

const A: f64 = -0.5;

fn cubic_kernel(d: f64) -> f64 {
    let d = d.abs();
    if d <= 1.0 {
        (A + 2.0) * d * d * d - (A + 3.0) * d * d + 1.0
    } else if d < 2.0 {
        A * d * d * d - 5.0 * A * d * d + 8.0 * A * d - 4.0 * A
    } else {
        0.0
    }
}

/// Per-axis taps: for each output index, the four clamped source indices and
/// their kernel weights.
fn axis_taps(n_src: usize, n_dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = n_dst as f64 / n_src as f64;
    (0..n_dst)
        .map(|o| {
            let src = (o as f64 + 0.5) / scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut wts = [0f64; 4];
            for k in 0..4 {
                let i = base as isize + k as isize - 1;
                idx[k] = i.clamp(0, n_src as isize - 1) as usize;
                wts[k] = cubic_kernel(frac - (k as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect()
}

/// Upsample `lr` to `(target_h, target_w)`; target dims must be integer
/// multiples of the source dims.
pub fn bicubic_upsample(lr: &GridField, target_h: usize, target_w: usize) -> Result<GridField> {
    let values = bicubic_upsample_values(&lr.values, target_h, target_w)?;
    let (h, _) = lr.shape();
    let mut out = lr.clone();
    out.grid_spacing_deg = lr.grid_spacing_deg * h as f64 / target_h as f64;
    out.values = values;
    Ok(out)
}

/// Array-level bicubic upsample.
pub fn bicubic_upsample_values(
    src: &Array2<f64>,
    target_h: usize,
    target_w: usize,
) -> Result<Array2<f64>> {
    let (h, w) = src.dim();
    if target_h == 0 || target_w == 0 || target_h % h != 0 || target_w % w != 0 {
        return Err(WxError::Shape(format!(
            "target {target_h}x{target_w} must be integer multiples of source {h}x{w}"
        )));
    }
    let row_taps = axis_taps(h, target_h);
    let col_taps = axis_taps(w, target_w);

    // Separable pass: columns first, then rows.
    let mut tmp = Array2::zeros((h, target_w));
    for i in 0..h {
        for (j, (idx, wts)) in col_taps.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += wts[k] * src[[i, idx[k]]];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((target_h, target_w));
    for (i, (idx, wts)) in row_taps.iter().enumerate() {
        for j in 0..target_w {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += wts[k] * tmp[[idx[k], j]];
            }
            out[[i, j]] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_data::{Units, LR_SPACING_DEG};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn kernel_partitions_unity_preserves_constants() {
        let src = Array2::from_elem((32, 64), 7.125);
        let up = bicubic_upsample_values(&src, 128, 256).unwrap();
        assert_eq!(up.dim(), (128, 256));
        for v in up.iter() {
            assert_abs_diff_eq!(*v, 7.125, epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_pair_matches_grid_geometry() {
        let f = GridField::new(Array2::zeros((32, 64)), Units::Kelvin, LR_SPACING_DEG).unwrap();
        let up = bicubic_upsample(&f, 128, 256).unwrap();
        assert_eq!(up.shape(), (128, 256));
        assert_abs_diff_eq!(up.grid_spacing_deg, LR_SPACING_DEG / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn ramp_is_reproduced_in_the_interior() {
        // f(i, j) = i + 2 j is degree-1, reproduced exactly away from edges.
        let src = Array2::from_shape_fn((32, 64), |(i, j)| i as f64 + 2.0 * j as f64);
        let up = bicubic_upsample_values(&src, 128, 256).unwrap();
        for oi in 8..120 {
            for oj in 8..248 {
                let si = (oi as f64 + 0.5) / 4.0 - 0.5;
                let sj = (oj as f64 + 0.5) / 4.0 - 0.5;
                let expected = si + 2.0 * sj;
                assert!(
                    (up[[oi, oj]] - expected).abs() < 1e-6,
                    "at ({oi},{oj}): {} vs {expected}",
                    up[[oi, oj]]
                );
            }
        }
    }

    #[test]
    fn upsample_is_linear() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let fa = Array2::from_shape_fn((8, 8), |_| rng.sample::<f64, _>(StandardNormal));
        let fb = Array2::from_shape_fn((8, 8), |_| rng.sample::<f64, _>(StandardNormal));
        let (a, b) = (0.75, -2.0);
        let lhs = bicubic_upsample_values(&(&fa * a + &fb * b), 32, 32).unwrap();
        let rhs = bicubic_upsample_values(&fa, 32, 32).unwrap() * a
            + bicubic_upsample_values(&fb, 32, 32).unwrap() * b;
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_non_multiple_target() {
        let src = Array2::zeros((32, 64));
        assert!(matches!(
            bicubic_upsample_values(&src, 100, 256),
            Err(WxError::Shape(_))
        ));
    }
}
