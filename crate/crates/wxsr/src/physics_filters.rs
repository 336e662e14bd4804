//! Physics-inspired conditioning: finite-difference stencil convolutions
//! producing first- and second-order derivative feature maps.
//!
//! Kernels are applied as cross-correlation after a reflect padding of 1
//! (mirror about the edge, edge pixel not duplicated):
//!
//! ```text
//! ∂x = [0 0 0; 0 -1 1; 0 0 0]   ∂y = [0 0 0; 0 -1 0; 0 1 0]
//! ∇² = [0 1 0; 1 -4 1; 0 1 0]
//! ```

use ndarray::Array2;

use crate::error::{Result, WxError};
use crate::grid_data::GridField;

/// The three derivative responses of one field.
#[derive(Debug, Clone)]
pub struct DerivativeMaps {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
    pub lap: Array2<f64>,
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    // mirror without duplicating the edge pixel: -1 -> 1, n -> n-2
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * (n - 1) - i as usize
    } else {
        i as usize
    }
}

/// Sample `f` with reflect-of-1 boundary handling.
#[inline]
fn at(f: &Array2<f64>, i: isize, j: isize) -> f64 {
    let (h, w) = f.dim();
    f[[reflect(i, h), reflect(j, w)]]
}

/// Apply the ∂x, ∂y and ∇² stencils to one field.
pub fn apply_stencils(f: &GridField) -> Result<DerivativeMaps> {
    apply_stencils_values(&f.values)
}

/// Array-level stencil application.
pub fn apply_stencils_values(f: &Array2<f64>) -> Result<DerivativeMaps> {
    let (h, w) = f.dim();
    if h < 3 || w < 3 {
        return Err(WxError::Shape(format!(
            "stencils need at least 3x3 input, got {h}x{w}"
        )));
    }
    let mut dx = Array2::zeros((h, w));
    let mut dy = Array2::zeros((h, w));
    let mut lap = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (ii, jj) = (i as isize, j as isize);
            let c = f[[i, j]];
            dx[[i, j]] = at(f, ii, jj + 1) - c;
            dy[[i, j]] = at(f, ii + 1, jj) - c;
            // summation order pinned to f(i+1,j)+f(i-1,j)+f(i,j+1)+f(i,j-1)-4f
            lap[[i, j]] =
                at(f, ii + 1, jj) + at(f, ii - 1, jj) + at(f, ii, jj + 1) + at(f, ii, jj - 1)
                    - 4.0 * c;
        }
    }
    Ok(DerivativeMaps { dx, dy, lap })
}

/// Assemble the 5-channel physics conditioning stack:
/// `[∂x(x), ∂y(x), ∇²(x), y_noised, x_interp]`.
pub fn physics_conditioning(
    x_interp: &Array2<f64>,
    y_noised: &Array2<f64>,
) -> Result<Vec<Array2<f64>>> {
    if x_interp.dim() != y_noised.dim() {
        return Err(WxError::Shape(format!(
            "x_interp {:?} vs y_noised {:?}",
            x_interp.dim(),
            y_noised.dim()
        )));
    }
    let maps = apply_stencils_values(x_interp)?;
    Ok(vec![
        maps.dx,
        maps.dy,
        maps.lap,
        y_noised.clone(),
        x_interp.clone(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn constant_field_has_zero_response() {
        let f = Array2::from_elem((16, 16), 3.5);
        let maps = apply_stencils_values(&f).unwrap();
        assert!(maps.dx.iter().all(|&v| v == 0.0));
        assert!(maps.dy.iter().all(|&v| v == 0.0));
        assert!(maps.lap.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn column_ramp_dx_interior_one_boundary_minus_one() {
        let (h, w) = (8, 12);
        let f = Array2::from_shape_fn((h, w), |(_, j)| j as f64);
        let maps = apply_stencils_values(&f).unwrap();
        for i in 0..h {
            for j in 0..w - 1 {
                assert_eq!(maps.dx[[i, j]], 1.0);
            }
            // reflect boundary: f(i, w) mirrors to f(i, w-2)
            assert_eq!(maps.dx[[i, w - 1]], -1.0);
        }
    }

    #[test]
    fn checkerboard_laplacian_is_minus_eight_f() {
        let f = Array2::from_shape_fn((10, 10), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { -1.0 });
        let maps = apply_stencils_values(&f).unwrap();
        for i in 1..9 {
            for j in 1..9 {
                assert_eq!(maps.lap[[i, j]], -8.0 * f[[i, j]]);
            }
        }
    }

    #[test]
    fn laplacian_matches_direct_indexing_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let f = Array2::from_shape_fn((12, 14), |_| rng.sample::<f64, _>(StandardNormal));
        let maps = apply_stencils_values(&f).unwrap();
        for i in 1..11 {
            for j in 1..13 {
                let expected =
                    f[[i + 1, j]] + f[[i - 1, j]] + f[[i, j + 1]] + f[[i, j - 1]] - 4.0 * f[[i, j]];
                assert_eq!(maps.lap[[i, j]], expected);
            }
        }
    }

    #[test]
    fn sine_row_dx_matches_forward_difference() {
        let w = 32usize;
        let f = Array2::from_shape_fn((6, w), |(_, j)| {
            (2.0 * std::f64::consts::PI * j as f64 / w as f64).sin()
        });
        let maps = apply_stencils_values(&f).unwrap();
        for i in 0..6 {
            for j in 0..w - 1 {
                let expected = (2.0 * std::f64::consts::PI * (j + 1) as f64 / w as f64).sin()
                    - (2.0 * std::f64::consts::PI * j as f64 / w as f64).sin();
                assert_eq!(maps.dx[[i, j]], expected);
            }
        }
    }

    #[test]
    fn stencils_are_linear() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let fa = Array2::from_shape_fn((9, 9), |_| rng.sample::<f64, _>(StandardNormal));
        let fb = Array2::from_shape_fn((9, 9), |_| rng.sample::<f64, _>(StandardNormal));
        let (a, b) = (1.25, -0.75);
        let lhs = apply_stencils_values(&(&fa * a + &fb * b)).unwrap();
        let ra = apply_stencils_values(&fa).unwrap();
        let rb = apply_stencils_values(&fb).unwrap();
        for ((l, x), y) in lhs.lap.iter().zip(ra.lap.iter()).zip(rb.lap.iter()) {
            assert_abs_diff_eq!(*l, x * a + y * b, epsilon = 1e-9);
        }
        for ((l, x), y) in lhs.dx.iter().zip(ra.dx.iter()).zip(rb.dx.iter()) {
            assert_abs_diff_eq!(*l, x * a + y * b, epsilon = 1e-9);
        }
        for ((l, x), y) in lhs.dy.iter().zip(ra.dy.iter()).zip(rb.dy.iter()) {
            assert_abs_diff_eq!(*l, x * a + y * b, epsilon = 1e-9);
        }
    }

    #[test]
    fn too_small_input_is_rejected() {
        let f = Array2::zeros((2, 8));
        assert!(matches!(
            apply_stencils_values(&f),
            Err(WxError::Shape(_))
        ));
    }

    #[test]
    fn conditioning_stack_layout() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((128, 256), |_| rng.sample::<f64, _>(StandardNormal));
        let y = Array2::from_shape_fn((128, 256), |_| rng.sample::<f64, _>(StandardNormal));
        let stack = physics_conditioning(&x, &y).unwrap();
        assert_eq!(stack.len(), 5);
        for ch in &stack {
            assert_eq!(ch.dim(), (128, 256));
        }
        // channels 3 and 4 pass the inputs through bitwise
        assert_eq!(stack[3], y);
        assert_eq!(stack[4], x);
    }

    #[test]
    fn conditioning_constant_input_zeroes_derivative_channels() {
        let x = Array2::from_elem((16, 16), 2.0);
        let y = Array2::from_elem((16, 16), 0.5);
        let stack = physics_conditioning(&x, &y).unwrap();
        for ch in &stack[..3] {
            assert!(ch.iter().all(|&v| v == 0.0));
        }
    }
}
