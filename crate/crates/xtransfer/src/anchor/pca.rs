//! Principal component analysis on MMC vectors.
//!
//! Hand-rolled on purpose: the pipeline needs deterministic output (stable
//! eigenvector signs, reproducible tie handling) and the matrices are tiny
//! (dimension = channel count ≤ 32), so a cyclic Jacobi eigensolver on the
//! sample covariance is both sufficient and auditable.

use crate::error::{Error, Result};

/// Eigenvalues (descending) and matching eigenvectors (rows) of a symmetric
/// matrix, via cyclic Jacobi rotations. Signs follow a fixed convention:
/// each vector's largest-magnitude entry is positive.
pub fn symmetric_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    // Eigenvector accumulator, as columns of v.
    let mut v = vec![vec![0.0; d]; d];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = matrix
        .iter()
        .flat_map(|r| r.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let tau = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..d {
                    let (aip, aiq) = (a[i][p], a[i][q]);
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let (apj, aqj) = (a[p][j], a[q][j]);
                    a[p][j] = c * apj - s * aqj;
                    a[q][j] = s * apj + c * aqj;
                }
                for row in v.iter_mut() {
                    let (vip, viq) = (row[p], row[q]);
                    row[p] = c * vip - s * viq;
                    row[q] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap().then(i.cmp(&j)));

    let mut values = Vec::with_capacity(d);
    let mut vectors = Vec::with_capacity(d);
    for &col in &order {
        values.push(a[col][col]);
        let mut vec_: Vec<f64> = (0..d).map(|i| v[i][col]).collect();
        // Deterministic sign: the entry with the largest magnitude (first on
        // ties) is made positive.
        let mut pivot = 0;
        for (i, x) in vec_.iter().enumerate() {
            if x.abs() > vec_[pivot].abs() {
                pivot = i;
            }
        }
        if vec_[pivot] < 0.0 {
            for x in vec_.iter_mut() {
                *x = -*x;
            }
        }
        vectors.push(vec_);
    }
    (values, vectors)
}

/// A fitted PCA basis: `project(x) = (x - mean) · basisᵀ`.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows of length `dim`.
    pub basis: Vec<Vec<f64>>,
    /// Sample variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Set when the requested component count exceeded the data rank and
    /// `k` was reduced.
    pub k_reduced: bool,
}

impl Pca {
    /// Fit `k` components on the rows of `points` (covariance normalized by
    /// `n - 1`). Rank-deficient data reduces `k` (never below 1) and flags
    /// the result.
    pub fn fit(points: &[Vec<f64>], k: usize) -> Result<Pca> {
        if points.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = points.len();
        let dim = points[0].len();
        if k == 0 {
            return Err(Error::Config("pca needs k >= 1".into()));
        }
        if n <= k {
            return Err(Error::Config(format!("pca needs more than k={k} samples, got {n}")));
        }
        let mut mean = vec![0.0; dim];
        for p in points {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut cov = vec![vec![0.0; dim]; dim];
        for p in points {
            let centered: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..dim {
                for j in i..dim {
                    cov[i][j] += centered[i] * centered[j];
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                cov[i][j] /= (n - 1) as f64;
                cov[j][i] = cov[i][j];
            }
        }
        let (values, vectors) = symmetric_eigen(&cov);
        let top = values.first().copied().unwrap_or(0.0).max(0.0);
        let rank = values.iter().filter(|&&v| v > top * 1e-10 && v > 1e-300).count();
        let k_eff = k.min(dim).min(rank.max(1));
        Ok(Pca {
            mean,
            basis: vectors[..k_eff].to_vec(),
            explained_variance: values[..k_eff].iter().map(|v| v.max(0.0)).collect(),
            k_reduced: k_eff < k.min(dim),
        })
    }

    pub fn k(&self) -> usize {
        self.basis.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Shape {
                expected: format!("{} dims", self.dim()),
                got: format!("{}", x.len()),
            });
        }
        Ok(self
            .basis
            .iter()
            .map(|b| b.iter().zip(x).zip(&self.mean).map(|((bc, xc), mc)| bc * (xc - mc)).sum())
            .collect())
    }

    pub fn project(&self, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        points.iter().map(|p| self.project_one(p)).collect()
    }

    /// Gradient of a scalar loss w.r.t. the input vector, given the loss
    /// gradient at the projection: `g_x = gᵀ · basis`.
    pub fn backward_one(&self, grad_proj: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for (gp, b) in grad_proj.iter().zip(&self.basis) {
            for (gi, bc) in g.iter_mut().zip(b) {
                *gi += gp * bc;
            }
        }
        g
    }
}
