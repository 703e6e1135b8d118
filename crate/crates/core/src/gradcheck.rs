//! Central finite differences for checking analytic gradients.

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate.
pub fn central_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Gradient norms below this are compared in absolute terms; central
/// differences cannot resolve them relatively.
pub const SCALE_FLOOR: f64 = 1e-3;

/// `||a - b|| / max(||a||, ||b||, SCALE_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = crate::linalg::norm(a)
        .max(crate::linalg::norm(b))
        .max(SCALE_FLOOR);
    diff / scale
}
