//! Central finite differences, used as independent reference oracles.

use nalgebra::{DMatrix, DVector};

/// Central-difference gradient of a scalar map.
pub fn gradient<F: Fn(&DVector<f64>) -> f64>(f: F, at: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut out = DVector::zeros(at.len());
    let mut probe = at.clone();
    for i in 0..at.len() {
        probe[i] = at[i] + h;
        let plus = f(&probe);
        probe[i] = at[i] - h;
        let minus = f(&probe);
        probe[i] = at[i];
        out[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Central-difference Jacobian of a vector map. Row `i` holds the derivative
/// with respect to input coordinate `i`.
pub fn jacobian_rows<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    at: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    let mut rows = Vec::with_capacity(at.len());
    let mut probe = at.clone();
    for i in 0..at.len() {
        probe[i] = at[i] + h;
        let plus = f(&probe);
        probe[i] = at[i] - h;
        let minus = f(&probe);
        probe[i] = at[i];
        rows.push(((plus - minus) / (2.0 * h)).transpose());
    }
    DMatrix::from_rows(&rows)
}

/// `‖a − b‖ / max(‖b‖, 1)`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

/// `‖a − b‖ / max(‖b‖, 1)` for vectors.
pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}
