use super::{Grid2D, Vector};
use crate::error::{Error, Result};

fn check_kernel(grid: &Grid2D<Vector>, kernel: usize) -> Result<()> {
    if kernel < 1 {
        return Err(Error::Shape(format!("pool kernel {kernel} < 1")));
    }
    if grid.rows() % kernel != 0 || grid.cols() % kernel != 0 {
        return Err(Error::Shape(format!(
            "pool kernel {kernel} does not divide grid {}x{}",
            grid.rows(),
            grid.cols()
        )));
    }
    Ok(())
}

/// Non-overlapping 2-D average pooling over a grid of vectors.
///
/// Each output cell is the arithmetic mean of its `kernel x kernel` input
/// block, accumulated in row-major order so results are reproducible.
pub fn avg_pool_2d(grid: &Grid2D<Vector>, kernel: usize) -> Result<Grid2D<Vector>> {
    check_kernel(grid, kernel)?;
    let dim = grid.as_slice().first().map_or(0, Vector::dim);
    let out_rows = grid.rows() / kernel;
    let out_cols = grid.cols() / kernel;
    let inv = 1.0 / (kernel * kernel) as f64;
    let mut cells = Vec::with_capacity(out_rows * out_cols);
    for or in 0..out_rows {
        for oc in 0..out_cols {
            let mut acc = Vector::zeros(dim);
            for kr in 0..kernel {
                for kc in 0..kernel {
                    acc.axpy(1.0, grid.get(or * kernel + kr, oc * kernel + kc));
                }
            }
            cells.push(acc.scaled(inv));
        }
    }
    Grid2D::from_vec(out_rows, out_cols, cells)
}

/// Non-overlapping 2-D max pooling: per-dimension elementwise maximum over
/// each block.
pub fn max_pool_2d(grid: &Grid2D<Vector>, kernel: usize) -> Result<Grid2D<Vector>> {
    check_kernel(grid, kernel)?;
    let dim = grid.as_slice().first().map_or(0, Vector::dim);
    let out_rows = grid.rows() / kernel;
    let out_cols = grid.cols() / kernel;
    let mut cells = Vec::with_capacity(out_rows * out_cols);
    for or in 0..out_rows {
        for oc in 0..out_cols {
            let mut acc = Vector::new(vec![f64::NEG_INFINITY; dim]);
            for kr in 0..kernel {
                for kc in 0..kernel {
                    let v = grid.get(or * kernel + kr, oc * kernel + kc);
                    for d in 0..dim {
                        if v[d] > acc[d] {
                            acc[d] = v[d];
                        }
                    }
                }
            }
            cells.push(acc);
        }
    }
    Grid2D::from_vec(out_rows, out_cols, cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn scalar_grid(rows: usize, cols: usize, vals: &[f64]) -> Grid2D<Vector> {
        Grid2D::from_vec(
            rows,
            cols,
            vals.iter().map(|&v| Vector::new(vec![v])).collect(),
        )
        .unwrap()
    }

    fn random_grid(rows: usize, cols: usize, dim: usize, rng: &mut Rng) -> Grid2D<Vector> {
        Grid2D::from_fn(rows, cols, |_, _| {
            Vector::new((0..dim).map(|_| rng.normal()).collect())
        })
    }

    #[test]
    fn avg_pool_24_grid_kernel_4_gives_36_tokens() {
        let mut rng = Rng::from_seed(0);
        let g = random_grid(24, 24, 3, &mut rng);
        let p = avg_pool_2d(&g, 4).unwrap();
        assert_eq!((p.rows(), p.cols()), (6, 6));
        assert_eq!(p.len(), 36);
    }

    #[test]
    fn avg_pool_constant_grid_is_identity_on_values() {
        let v = Vector::new(vec![2.5, -1.0]);
        let g = Grid2D::fill(8, 8, v.clone());
        let p = avg_pool_2d(&g, 4).unwrap();
        for cell in p.iter() {
            for d in 0..2 {
                assert!((cell[d] - v[d]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn avg_pool_2x2_scalars() {
        let g = scalar_grid(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let p = avg_pool_2d(&g, 2).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.get(0, 0)[0], 2.5);
    }

    #[test]
    fn max_pool_2x2_scalars() {
        let g = scalar_grid(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let p = max_pool_2d(&g, 2).unwrap();
        assert_eq!(p.get(0, 0)[0], 4.0);
    }

    #[test]
    fn max_pool_24_grid_kernel_8() {
        let mut rng = Rng::from_seed(1);
        let g = random_grid(24, 24, 2, &mut rng);
        let p = max_pool_2d(&g, 8).unwrap();
        assert_eq!((p.rows(), p.cols()), (3, 3));
    }

    #[test]
    fn max_pool_matches_exhaustive_scan() {
        let mut rng = Rng::from_seed(2);
        let g = random_grid(12, 8, 5, &mut rng);
        let k = 4;
        let p = max_pool_2d(&g, k).unwrap();
        for or in 0..p.rows() {
            for oc in 0..p.cols() {
                for d in 0..5 {
                    let mut best = f64::NEG_INFINITY;
                    for kr in 0..k {
                        for kc in 0..k {
                            best = best.max(g.get(or * k + kr, oc * k + kc)[d]);
                        }
                    }
                    assert_eq!(p.get(or, oc)[d], best);
                }
            }
        }
    }

    #[test]
    fn non_divisible_kernel_rejected() {
        let mut rng = Rng::from_seed(3);
        let g = random_grid(6, 6, 1, &mut rng);
        assert!(avg_pool_2d(&g, 4).is_err());
        assert!(max_pool_2d(&g, 5).is_err());
        assert!(avg_pool_2d(&g, 0).is_err());
    }

    #[test]
    fn avg_pool_preserves_global_mean() {
        let mut rng = Rng::from_seed(4);
        let g = random_grid(24, 24, 4, &mut rng);
        let p = avg_pool_2d(&g, 4).unwrap();
        for d in 0..4 {
            let mean_in: f64 = g.iter().map(|v| v[d]).sum::<f64>() / g.len() as f64;
            let mean_out: f64 = p.iter().map(|v| v[d]).sum::<f64>() / p.len() as f64;
            assert!((mean_in - mean_out).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_composition() {
        let mut rng = Rng::from_seed(5);
        let g = random_grid(24, 24, 3, &mut rng);
        let twice = avg_pool_2d(&avg_pool_2d(&g, 2).unwrap(), 3).unwrap();
        let once = avg_pool_2d(&g, 6).unwrap();
        assert_eq!(twice.rows(), once.rows());
        for (a, b) in twice.iter().zip(once.iter()) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-12);
            }
        }
    }
}
