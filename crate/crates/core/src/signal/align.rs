use ndarray::Array2;

/// T×F linear-interpolation weights mapping F source rows onto T rows.
///
/// Row t samples source position `t·(F-1)/(T-1)`, so the first and last
/// rows reproduce the source endpoints exactly. Every row sums to one.
pub fn interp_matrix(source: usize, target: usize) -> Array2<f64> {
    assert!(
        source >= 1 && target >= 1,
        "interp_matrix needs non-empty sides"
    );
    let mut w = Array2::zeros((target, source));
    if source == 1 || target == 1 {
        w.column_mut(0).fill(1.0);
        return w;
    }
    for t in 0..target {
        let num = t * (source - 1);
        let lo = num / (target - 1);
        let frac = (num % (target - 1)) as f64 / (target - 1) as f64;
        if frac == 0.0 {
            w[[t, lo]] = 1.0;
        } else {
            w[[t, lo]] = 1.0 - frac;
            w[[t, lo + 1]] = frac;
        }
    }
    w
}

/// Resample an F×d feature matrix to T rows by linear interpolation in time.
pub fn align_frames(features: &Array2<f64>, target: usize) -> Array2<f64> {
    if features.nrows() == target {
        return features.clone();
    }
    interp_matrix(features.nrows(), target).dot(features)
}
