//! Central finite differences for verifying backward rules.

/// `∂f/∂x_i ≈ (f(x + h e_i) - f(x - h e_i)) / 2h` for the requested indices.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], indices: &[usize], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Elementwise `|a - n| / max(|a|, |n|, floor)`, maximized.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
