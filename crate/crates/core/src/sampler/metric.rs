//! Euclidean metric that is diagonal except on declared blocks of
//! coordinates, which carry a dense covariance.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
struct DenseBlock {
    range: Range<usize>,
    /// Inverse metric (a covariance) restricted to the block.
    cov: DMatrix<f64>,
    /// Lower Cholesky factor of `cov`.
    chol: DMatrix<f64>,
}

/// Inverse metric: a covariance for the position variables.
#[derive(Debug, Clone, PartialEq)]
pub(super) struct Metric {
    /// Diagonal entries; for dense coordinates, the diagonal of their block.
    diag: Vec<f64>,
    blocks: Vec<DenseBlock>,
}

impl Metric {
    pub fn unit(dim: usize, ranges: &[Range<usize>]) -> Self {
        let mut m = Metric {
            diag: vec![1.0; dim],
            blocks: Vec::new(),
        };
        for r in ranges {
            let n = r.len();
            m.blocks.push(DenseBlock {
                range: r.clone(),
                cov: DMatrix::identity(n, n),
                chol: DMatrix::identity(n, n),
            });
        }
        m
    }

    pub fn block_ranges(&self) -> Vec<Range<usize>> {
        self.blocks.iter().map(|b| b.range.clone()).collect()
    }

    pub fn block_covariances(&self) -> Vec<DMatrix<f64>> {
        self.blocks.iter().map(|b| b.cov.clone()).collect()
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    /// Replace the covariance. `diag` covers every coordinate; `dense[b]` is
    /// the covariance of block `b`. A block that is not positive definite
    /// falls back to its diagonal.
    pub fn set(&mut self, diag: Vec<f64>, dense: Vec<DMatrix<f64>>) {
        self.diag = diag;
        for (block, cov) in self.blocks.iter_mut().zip(dense) {
            let r = block.range.clone();
            let cov = match cov.clone().cholesky() {
                Some(c) => {
                    block.chol = c.l();
                    cov
                }
                None => {
                    let d =
                        DMatrix::from_diagonal(&DVector::from_column_slice(&self.diag[r.clone()]));
                    block.chol = d.map(f64::sqrt);
                    d
                }
            };
            for (i, j) in r.clone().enumerate() {
                self.diag[j] = cov[(i, i)];
            }
            block.cov = cov;
        }
    }

    /// `cov * p`.
    pub fn velocity_into(&self, p: &[f64], out: &mut [f64]) {
        for ((o, m), x) in out.iter_mut().zip(&self.diag).zip(p) {
            *o = m * x;
        }
        for b in &self.blocks {
            let r = b.range.clone();
            let n = r.len();
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += b.cov[(i, j)] * p[r.start + j];
                }
                out[r.start + i] = acc;
            }
        }
    }

    pub fn velocity(&self, p: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; p.len()];
        self.velocity_into(p, &mut v);
        v
    }

    pub fn kinetic(&self, p: &[f64]) -> f64 {
        let v = self.velocity(p);
        0.5 * p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Momentum with covariance `cov^{-1}`.
    pub fn sample_momentum(&self, p: &mut [f64], rng: &mut ChaCha8Rng) {
        for (x, m) in p.iter_mut().zip(&self.diag) {
            let n: f64 = rng.sample(StandardNormal);
            *x = n / m.sqrt();
        }
        for b in &self.blocks {
            let r = b.range.clone();
            // p = L^{-T} xi, reusing the standard normals already drawn
            let xi = DVector::from_iterator(r.len(), r.clone().map(|j| p[j] * self.diag[j].sqrt()));
            let solved = b
                .chol
                .transpose()
                .solve_upper_triangular(&xi)
                .expect("Cholesky factor has a positive diagonal");
            p[r].copy_from_slice(solved.as_slice());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn two_by_two() -> Metric {
        let mut m = Metric::unit(3, &[1..3]);
        m.set(
            vec![2.0, 1.0, 1.0],
            vec![DMatrix::from_row_slice(2, 2, &[4.0, 1.2, 1.2, 1.0])],
        );
        m
    }

    #[test]
    fn velocity_and_kinetic() {
        let m = two_by_two();
        assert_eq!(m.diagonal(), &[2.0, 4.0, 1.0]);
        let v = m.velocity(&[1.0, 1.0, -1.0]);
        for (a, b) in v.iter().zip([2.0, 2.8, 0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((m.kinetic(&[1.0, 1.0, -1.0]) - 0.5 * (2.0 + 2.8 - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn momentum_has_inverse_covariance() {
        let m = two_by_two();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        let mut s = [[0.0; 3]; 3];
        let mut p = vec![0.0; 3];
        for _ in 0..n {
            m.sample_momentum(&mut p, &mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    s[i][j] += p[i] * p[j] / n as f64;
                }
            }
        }
        // inverse of [[4, 1.2], [1.2, 1]] is [[1, -1.2], [-1.2, 4]] / 2.56
        let expect = [
            [0.5, 0.0, 0.0],
            [0.0, 1.0 / 2.56, -1.2 / 2.56],
            [0.0, -1.2 / 2.56, 4.0 / 2.56],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((s[i][j] - expect[i][j]).abs() < 0.02, "{i}{j}: {}", s[i][j]);
            }
        }
    }

    #[test]
    fn indefinite_block_falls_back_to_diagonal() {
        let mut m = Metric::unit(2, &[0..2]);
        m.set(
            vec![3.0, 5.0],
            vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])],
        );
        assert_eq!(m.velocity(&[1.0, 1.0]), vec![3.0, 5.0]);
    }
}
