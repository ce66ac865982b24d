//! Dense numeric substrate: vectors, matrices, 2-D grids, a seeded PRNG,
//! pooling kernels, and a finite-difference gradient oracle.
//!
//! Everything is `f64` and deterministic: pooling accumulates in row-major
//! order, the PRNG is a fixed documented algorithm, and no operation here
//! depends on thread count.

mod fdiff;
mod grid;
mod pool;
mod rng;
mod vector;

pub use fdiff::{finite_diff_grad, rel_error};
pub use grid::Grid2D;
pub use pool::{avg_pool_2d, max_pool_2d};
pub use rng::Rng;
pub use vector::{Mat, Vector};

/// GELU, tanh approximation — the usual transformer activation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Exact derivative of the tanh-approximation GELU above.
pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// 1-D sinusoidal features for a scalar in `[0, 1]`.
///
/// Entry `i` is `sin(v * w)` for even `i` and `cos(v * w)` for odd `i`, where
/// the angular frequency `w = pi * 2^(i/2)` grows geometrically. The lowest
/// pair has half a period over the unit interval; deeper pairs resolve ever
/// finer offsets.
pub fn sinusoid(v: f64, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let omega = std::f64::consts::PI * f64::powi(2.0, (i / 2) as i32);
        let arg = v * omega;
        out.push(if i % 2 == 0 { arg.sin() } else { arg.cos() });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_zero_input_gives_sin_cos_pattern() {
        let f = sinusoid(0.0, 6);
        assert_eq!(f, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sinusoid_distinguishes_nearby_positions() {
        let a = sinusoid(0.25, 16);
        let b = sinusoid(0.3125, 16); // one cell over on an 8-wide grid
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 0.1, "embeddings too close: {diff}");
    }

    #[test]
    fn gelu_prime_matches_finite_differences() {
        let h = 1e-6;
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.5, 2.0, 4.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(
                (gelu_prime(x) - fd).abs() < 1e-8,
                "x={x}: analytic {} vs fd {fd}",
                gelu_prime(x)
            );
        }
    }
}
