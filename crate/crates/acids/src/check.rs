//! Central finite differences for gradient verification.

/// Central-difference gradient of a scalar function at `point`.
///
/// `step` is the absolute perturbation per coordinate (scaled up for
/// large coordinates). 1e-6 is a good default at double precision.
pub fn finite_difference<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let h = step * point[i].abs().max(1.0);
        probe[i] = point[i] + h;
        let up = f(&probe);
        probe[i] = point[i] - h;
        let down = f(&probe);
        probe[i] = point[i];
        grads.push((up - down) / (2.0 * h));
    }
    grads
}

/// Max over coordinates of `|a - n| / max(|a|, |n|, 1e-3)`.
///
/// The floor keeps near-zero gradient entries from blowing up the ratio;
/// for those the comparison degrades to an absolute check at 1e-3 scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
