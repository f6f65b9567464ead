use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_ORDER: usize = 2;

/// Smoothing weights of a Savitzky-Golay filter: the value at the window
/// center of the least-squares polynomial fit, as a linear combination of
/// the window samples.
pub fn savgol_coefficients(window: usize, order: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || order >= window {
        return Err(Error::Config(format!(
            "Savitzky-Golay needs an odd window > order (window {window}, order {order})"
        )));
    }
    let half = (window / 2) as f64;
    let vander = DMatrix::from_fn(window, order + 1, |i, j| (i as f64 - half).powi(j as i32));
    let normal = vander.transpose() * &vander;
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Numerical("ill-conditioned Savitzky-Golay system".into()))?;
    // First row of (AᵀA)⁻¹Aᵀ.
    let e0 = DVector::from_fn(order + 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
    let z = chol.solve(&e0);
    Ok((vander * z).iter().copied().collect())
}

/// Per-column Savitzky-Golay smoothing with mirror padding at the edges
/// (`x[-k] = x[k]`, `x[T-1+k] = x[T-1-k]`).
pub fn savgol_smooth(track: &Array2<f64>, window: usize, order: usize) -> Result<Array2<f64>> {
    let coeffs = savgol_coefficients(window, order)?;
    let t = track.nrows();
    if t < window {
        return Err(Error::TooShort(format!(
            "track has {t} frames, Savitzky-Golay window is {window}"
        )));
    }
    let half = window / 2;
    let mirror = |i: isize| -> usize {
        let last = t as isize - 1;
        let j = if i < 0 {
            -i
        } else if i > last {
            2 * last - i
        } else {
            i
        };
        j as usize
    };
    let mut out = Array2::zeros(track.dim());
    for c in 0..track.ncols() {
        let col = track.column(c);
        for i in 0..t {
            let mut acc = 0.0;
            for (k, w) in coeffs.iter().enumerate() {
                acc += w * col[mirror(i as isize + k as isize - half as isize)];
            }
            out[[i, c]] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(f: impl Fn(f64) -> f64, t: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, 1), |(i, _)| f(i as f64))
    }

    #[test]
    fn window5_order2_coefficients() {
        // Classic table values: (-3, 12, 17, 12, -3) / 35.
        let c = savgol_coefficients(5, 2).unwrap();
        let expect = [-3.0, 12.0, 17.0, 12.0, -3.0].map(|v| v / 35.0);
        for (a, b) in c.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn quadratics_pass_through_on_interior() {
        let x = column(|t| t * t - 3.0 * t + 0.5, 20);
        let y = savgol_smooth(&x, 5, 2).unwrap();
        for i in 2..18 {
            assert!((y[[i, 0]] - x[[i, 0]]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_track_unchanged() {
        let x = Array2::from_elem((9, 3), 0.42);
        let y = savgol_smooth(&x, 5, 2).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn short_track_rejected() {
        let x = Array2::zeros((4, 2));
        assert!(matches!(savgol_smooth(&x, 5, 2), Err(Error::TooShort(_))));
    }

    #[test]
    fn bad_window_rejected() {
        assert!(savgol_coefficients(4, 2).is_err());
        assert!(savgol_coefficients(5, 5).is_err());
    }

    /// Quadratic least-squares fit of five points at offsets -2..=2, solved
    /// by Cramer's rule, evaluated at offset 0.
    fn fit_center(y: [f64; 5]) -> f64 {
        let xs = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let s = |p: i32| xs.iter().map(|x: &f64| x.powi(p)).sum::<f64>();
        let t = |p: i32| xs.iter().zip(y).map(|(x, v)| x.powi(p) * v).sum::<f64>();
        let m = [[s(0), s(1), s(2)], [s(1), s(2), s(3)], [s(2), s(3), s(4)]];
        let r = [t(0), t(1), t(2)];
        let det3 = |a: [[f64; 3]; 3]| {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        };
        let mut m0 = m;
        for i in 0..3 {
            m0[i][0] = r[i];
        }
        det3(m0) / det3(m)
    }

    #[test]
    fn cubic_interior_matches_per_window_fit() {
        let x = column(|t| t * t * t, 11);
        let y = savgol_smooth(&x, 5, 2).unwrap();
        for i in 2..9 {
            let w = [0, 1, 2, 3, 4].map(|k| x[[i + k - 2, 0]]);
            let expect = fit_center(w);
            assert!((y[[i, 0]] - expect).abs() < 1e-9 * (1.0 + expect.abs()));
            // The odd u³ term projects onto u only, so the center is kept.
            assert!((y[[i, 0]] - x[[i, 0]]).abs() < 1e-9 * x[[i, 0]].abs().max(1.0));
        }
    }
}
