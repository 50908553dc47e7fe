//! Stable scalar primitives shared by every module.

/// Logistic sigmoid, evaluated on the branch that never overflows.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` via `max(z, 0) + log1p(exp(-|z|))`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + softplus_excess(z)
}

/// `softplus(z) - max(z, 0)`, kept separate so the strictly positive gap
/// survives even when it is below the ulp of `max(z, 0)`.
pub fn softplus_excess(z: f64) -> f64 {
    (-z.abs()).exp().ln_1p()
}

/// `-log sigmoid(z)`.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    softplus(-z)
}

/// `sigmoid(z) * (1 - sigmoid(z))` without cancellation in either tail.
pub fn logistic_curvature(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Natural log of the sum of exponentials of a row.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax of a row with max subtraction.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-16);
        assert!(softplus_excess(30.0) > 0.0);
    }

    #[test]
    fn curvature_matches_product_form() {
        for z in [-5.0, -0.3, 0.0, 0.7, 4.0] {
            let s = sigmoid(z);
            assert!((logistic_curvature(z) - s * (1.0 - s)).abs() < 1e-15);
        }
        assert_eq!(logistic_curvature(0.0), 0.25);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[1000.0, 0.0, -3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
