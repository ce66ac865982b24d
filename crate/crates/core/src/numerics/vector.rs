use crate::error::{Error, Result};

/// Dense `f64` vector. Token embeddings, gradients, and weights rows all use
/// this type; the guts stay public-by-accessor so kernels can loop flat.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Vector {
            data: vec![0.0; dim],
        }
    }

    /// Construction that enforces the all-finite invariant; used on trust
    /// boundaries (deserialization, user input).
    pub fn checked(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector entry {i}")));
        }
        Ok(Vector { data })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Vector {
        Vector::new(self.data.iter().map(|v| v * s).collect())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector::new(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector::new(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Vector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn cosine(&self, other: &Vector) -> f64 {
        self.dot(other) / (self.norm() * other.norm())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Mat::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    /// Gaussian init with standard deviation `std`, drawn from `rng`.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut super::Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `M x`, with `x.dim() == cols`.
    pub fn matvec(&self, x: &Vector) -> Vector {
        debug_assert_eq!(self.cols, x.dim());
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x.as_slice()) {
                acc += w * v;
            }
            out.push(acc);
        }
        Vector::new(out)
    }

    /// `M^T x`, with `x.dim() == rows`.
    pub fn t_matvec(&self, x: &Vector) -> Vector {
        debug_assert_eq!(self.rows, x.dim());
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xv = x[r];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xv * w;
            }
        }
        Vector::new(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_and_norm() {
        let a = Vector::new(vec![3.0, 4.0]);
        assert_eq!(a.norm(), 5.0);
        let b = Vector::new(vec![1.0, -1.0]);
        assert_eq!(a.dot(&b), -1.0);
    }

    #[test]
    fn checked_rejects_nan() {
        assert!(Vector::checked(vec![1.0, f64::NAN]).is_err());
        assert!(Vector::checked(vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn matvec_matches_manual() {
        let m = Mat::from_fn(2, 3, |r, c| (r * 3 + c) as f64); // [[0,1,2],[3,4,5]]
        let x = Vector::new(vec![1.0, 2.0, 3.0]);
        assert_eq!(m.matvec(&x).as_slice(), &[8.0, 26.0]);
        let y = Vector::new(vec![1.0, 1.0]);
        assert_eq!(m.t_matvec(&y).as_slice(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn identity_matvec_is_noop() {
        let m = Mat::identity(4);
        let x = Vector::new(vec![1.0, -2.0, 3.5, 0.0]);
        assert_eq!(m.matvec(&x), x);
    }
}
