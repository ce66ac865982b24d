use super::Vector;
use crate::error::{Error, Result};

/// Central-difference gradient oracle: `(f(x + h e_i) - f(x - h e_i)) / 2h`
/// per dimension. Used to validate every hand-written backward pass in the
/// crate; it must stay independent of the code it checks.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Vector) -> f64,
    x: &Vector,
    h: f64,
) -> Result<Vector> {
    let mut grad = Vec::with_capacity(x.dim());
    let mut probe = x.clone();
    for i in 0..x.dim() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference evaluation at dimension {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(Vector::new(grad))
}

/// Relative L2 error between an analytic gradient and the oracle.
pub fn rel_error(analytic: &[f64], oracle: &[f64]) -> f64 {
    assert_eq!(analytic.len(), oracle.len());
    let diff: f64 = analytic
        .iter()
        .zip(oracle)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = oracle.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}
