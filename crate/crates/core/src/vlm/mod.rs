//! The language side: fixed synthetic vocabulary, trainable projector, toy
//! autoregressive decoder, two-stage training, and checkpointing.
//!
//! Projector and decoder keep every weight in one flat `Vec<f64>` with a
//! layout struct mapping names to ranges. That buys three things cheaply:
//! finite-difference checks can sweep raw coordinates, the Adam step is a
//! single loop, and checkpoints are a straight dump of the buffer.

mod checkpoint;
mod decoder;
mod projector;
mod train;
mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use decoder::{DecoderConfig, ToyDecoder};
pub use projector::{Activation, Projector};
pub use train::{train_stage1, train_stage2, Example, Stage, TrainConfig, TrainLog};
pub use vocab::Vocab;

/// Flat-buffer linear algebra shared by projector and decoder.
pub(crate) mod flat {
    /// y = W x, with W stored row-major as rows×cols.
    pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(w.len(), rows * cols);
        debug_assert_eq!(x.len(), cols);
        debug_assert_eq!(y.len(), rows);
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            y[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// y += Wᵀ x (x has `rows` entries, y has `cols`).
    pub fn t_matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(w.len(), rows * cols);
        debug_assert_eq!(x.len(), rows);
        debug_assert_eq!(y.len(), cols);
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            let xr = x[r];
            for (yc, wc) in y.iter_mut().zip(row) {
                *yc += xr * wc;
            }
        }
    }

    /// dW += dy xᵀ (outer product accumulate).
    pub fn outer_acc(dw: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
        debug_assert_eq!(dw.len(), rows * cols);
        debug_assert_eq!(dy.len(), rows);
        debug_assert_eq!(x.len(), cols);
        for r in 0..rows {
            let drow = &mut dw[r * cols..(r + 1) * cols];
            let dyr = dy[r];
            for (dc, xc) in drow.iter_mut().zip(x) {
                *dc += dyr * xc;
            }
        }
    }

    /// Numerically stable softmax cross-entropy against one target id.
    /// Returns the loss and writes `softmax − onehot(target)` into `grad`.
    pub fn cross_entropy(logits: &[f64], target: usize, grad: &mut [f64]) -> f64 {
        debug_assert!(target < logits.len());
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (g, &l) in grad.iter_mut().zip(logits) {
            *g = (l - max).exp();
            z += *g;
        }
        let loss = z.ln() + max - logits[target];
        for g in grad.iter_mut() {
            *g /= z;
        }
        grad[target] -= 1.0;
        loss
    }
}

#[cfg(test)]
mod flat_tests {
    use super::flat::*;

    #[test]
    fn matvec_against_hand_example() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let x = [1.0, 0.0, -1.0];
        let mut y = [0.0; 2];
        matvec(&w, 2, 3, &x, &mut y);
        assert_eq!(y, [-2.0, -2.0]);
        let mut back = vec![0.0; 3];
        t_matvec_acc(&w, 2, 3, &[1.0, 1.0], &mut back);
        assert_eq!(back, vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_peaked() {
        let mut grad = vec![0.0; 4];
        let loss = cross_entropy(&[0.0; 4], 2, &mut grad);
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
        assert!((grad[2] - (0.25 - 1.0)).abs() < 1e-12);
        // Strongly correct logits drive the loss to zero.
        let loss = cross_entropy(&[0.0, 50.0, 0.0, 0.0], 1, &mut grad);
        assert!(loss < 1e-12, "peaked loss {loss}");
        // Gradient sums to zero (softmax minus onehot).
        let s: f64 = grad.iter().sum();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        let logits = vec![0.3, -1.2, 0.7, 2.0, -0.5];
        let mut grad = vec![0.0; 5];
        cross_entropy(&logits, 3, &mut grad);
        let h = 1e-6;
        for i in 0..5 {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[i] += h;
            down[i] -= h;
            let mut scratch = vec![0.0; 5];
            let fd = (cross_entropy(&up, 3, &mut scratch)
                - cross_entropy(&down, 3, &mut scratch))
                / (2.0 * h);
            assert!((grad[i] - fd).abs() < 1e-8, "coord {i}: {} vs {fd}", grad[i]);
        }
    }
}
