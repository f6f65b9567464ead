use ndarray::Array2;

use crate::error::{Error, Result};

/// Sinusoidal encoding of `t mod period`:
/// `PPE[t,2i] = sin(p / 10000^(2i/d))`, `PPE[t,2i+1] = cos(p / 10000^(2i/d))`.
pub fn periodic_positional_encoding(len: usize, dim: usize, period: usize) -> Result<Array2<f64>> {
    if dim % 2 != 0 || dim == 0 {
        return Err(Error::BadDims(format!(
            "encoding width must be even, got {dim}"
        )));
    }
    if period == 0 {
        return Err(Error::Config("period must be at least 1".into()));
    }
    let mut out = Array2::zeros((len, dim));
    for t in 0..len {
        let pos = (t % period) as f64;
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[[t, 2 * i]] = (pos / freq).sin();
            out[[t, 2 * i + 1]] = (pos / freq).cos();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_rows_repeat_exactly() {
        let ppe = periodic_positional_encoding(95, 16, 30).unwrap();
        for t in 0..65 {
            assert_eq!(ppe.row(t), ppe.row(t + 30));
        }
    }

    #[test]
    fn first_row_is_sin0_cos0() {
        let ppe = periodic_positional_encoding(3, 8, 30).unwrap();
        for i in 0..4 {
            assert_eq!(ppe[[0, 2 * i]], 0.0);
            assert_eq!(ppe[[0, 2 * i + 1]], 1.0);
        }
    }

    #[test]
    fn matches_scalar_formula() {
        let ppe = periodic_positional_encoding(40, 4, 30).unwrap();
        let expect = [
            7f64.sin(),
            7f64.cos(),
            (7.0 / 100.0f64).sin(),
            (7.0 / 100.0f64).cos(),
        ];
        for (c, e) in expect.iter().enumerate() {
            assert!((ppe[[7, c]] - e).abs() < 1e-15);
            assert!((ppe[[37, c]] - e).abs() < 1e-15);
        }
    }

    #[test]
    fn odd_width_rejected() {
        assert!(matches!(
            periodic_positional_encoding(4, 5, 30),
            Err(Error::BadDims(_))
        ));
    }
}
