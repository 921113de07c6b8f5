//! Orthogonal Procrustes rotation for paired centroids.
//!
//! Finds the proper rotation R maximizing the mean cosine similarity between
//! source centroids and rotated target centroids. Because rotations preserve
//! norms, maximizing Σ cos(s_i, R·t_i) equals maximizing tr(R·H) with
//! H = Σ t̂_i·ŝ_iᵀ over unit-normalized pairs — the classic Procrustes
//! objective, solved in closed form through the SVD of H with the
//! determinant constrained to +1 (no reflections).

use crate::anchor::pca::symmetric_eigen;
use crate::error::{Error, Result};

pub type Matrix = Vec<Vec<f64>>;

pub fn mat_vec(m: &Matrix, x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn mat_mul(a: &Matrix, b: &Matrix) -> Matrix {
    let k = a.len();
    let mut out = vec![vec![0.0; b[0].len()]; k];
    for i in 0..k {
        for (j, out_ij) in out[i].iter_mut().enumerate() {
            *out_ij = (0..b.len()).map(|l| a[i][l] * b[l][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Matrix) -> Matrix {
    let (r, c) = (m.len(), m[0].len());
    let mut out = vec![vec![0.0; r]; c];
    for i in 0..r {
        for j in 0..c {
            out[j][i] = m[i][j];
        }
    }
    out
}

pub fn identity(k: usize) -> Matrix {
    let mut m = vec![vec![0.0; k]; k];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

/// Determinant via Gaussian elimination with partial pivoting.
pub fn determinant(m: &Matrix) -> f64 {
    let k = m.len();
    let mut a = m.clone();
    let mut det = 1.0;
    for col in 0..k {
        let pivot = (col..k).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for row in (col + 1)..k {
            let f = a[row][col] / a[col][col];
            for j in col..k {
                a[row][j] -= f * a[col][j];
            }
        }
    }
    det
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Mean cosine similarity between paired vectors.
pub fn mean_cosine(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let mut total = 0.0;
    for (a, b) in pairs {
        let na = norm(a);
        let nb = norm(b);
        if na > 0.0 && nb > 0.0 {
            total += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        }
    }
    total / pairs.len() as f64
}

/// SVD of a square matrix via the eigendecomposition of HᵀH; columns of U
/// for near-zero singular values are completed by Gram–Schmidt.
fn svd_square(h: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let k = h.len();
    let hth = mat_mul(&transpose(h), h);
    let (lambda, v_rows) = symmetric_eigen(&hth);
    let sigmas: Vec<f64> = lambda.iter().map(|l| l.max(0.0).sqrt()).collect();
    let scale = sigmas.first().copied().unwrap_or(0.0).max(1e-300);

    // v_rows[i] is the i-th right singular vector; build U column by column.
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for (i, v_i) in v_rows.iter().enumerate() {
        if sigmas[i] > 1e-12 * scale {
            let hv = mat_vec(h, v_i);
            u_cols.push(hv.iter().map(|x| x / sigmas[i]).collect());
        } else {
            // Any unit vector orthogonal to the existing columns works: the
            // zero singular value contributes nothing to the objective.
            let mut cand = vec![0.0; k];
            'basis: for b in 0..k {
                cand = vec![0.0; k];
                cand[b] = 1.0;
                for u in &u_cols {
                    let dot: f64 = u.iter().zip(&cand).map(|(a, c)| a * c).sum();
                    for (cv, uv) in cand.iter_mut().zip(u) {
                        *cv -= dot * uv;
                    }
                }
                let n = norm(&cand);
                if n > 1e-6 {
                    for cv in cand.iter_mut() {
                        *cv /= n;
                    }
                    break 'basis;
                }
            }
            u_cols.push(cand);
        }
    }
    let u: Matrix = (0..k).map(|r| (0..k).map(|c| u_cols[c][r]).collect()).collect();
    let v: Matrix = (0..k).map(|r| (0..k).map(|c| v_rows[c][r]).collect()).collect();
    (u, sigmas, v)
}

/// The proper rotation maximizing mean cosine between `source[i]` and
/// `R · target[i]`. Pairs must have nonzero vectors on both sides.
pub fn best_rotation(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Matrix> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let k = pairs[0].0.len();
    let mut h = vec![vec![0.0; k]; k];
    for (s, t) in pairs {
        let ns = norm(s);
        let nt = norm(t);
        if ns == 0.0 || nt == 0.0 {
            return Err(Error::DegenerateRotation(
                "zero-norm centroid cannot be normalized".into(),
            ));
        }
        // H += t̂ ŝᵀ, so that Σ ŝᵀ R t̂ = tr(R H).
        for i in 0..k {
            for j in 0..k {
                h[i][j] += (t[i] / nt) * (s[j] / ns);
            }
        }
    }
    let (u, _sigma, v) = svd_square(&h);
    // R = V D Uᵀ with D flipping the last singular direction when VUᵀ would
    // be a reflection.
    let det = determinant(&mat_mul(&v, &transpose(&u)));
    let mut d = identity(k);
    d[k - 1][k - 1] = if det < 0.0 { -1.0 } else { 1.0 };
    Ok(mat_mul(&mat_mul(&v, &d), &transpose(&u)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rot2(theta: f64) -> Matrix {
        let (s, c) = theta.sin_cos();
        vec![vec![c, -s], vec![s, c]]
    }

    fn assert_rotation(r: &Matrix, tol: f64) {
        let rtr = mat_mul(&transpose(r), r);
        let k = r.len();
        for i in 0..k {
            for j in 0..k {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((rtr[i][j] - expect).abs() < tol, "RᵀR[{i}][{j}] = {}", rtr[i][j]);
            }
        }
        assert!((determinant(r) - 1.0).abs() < tol, "det = {}", determinant(r));
    }

    fn apply(r: &Matrix, pairs: &[(Vec<f64>, Vec<f64>)]) -> Vec<(Vec<f64>, Vec<f64>)> {
        pairs.iter().map(|(s, t)| (s.clone(), mat_vec(r, t))).collect()
    }

    /// Exhaustive angle grid — the independent oracle for k=2.
    fn grid_best_cosine(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        let steps = (std::f64::consts::TAU / 1e-4) as usize;
        let mut best = f64::NEG_INFINITY;
        for i in 0..steps {
            let r = rot2(i as f64 * 1e-4);
            best = best.max(mean_cosine(&apply(&r, pairs)));
        }
        best
    }

    fn random_pairs(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..n)
            .map(|_| {
                let s: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0_f64)).collect();
                let t: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0_f64)).collect();
                (s, t)
            })
            .filter(|(s, t)| norm(s) > 0.1 && norm(t) > 0.1)
            .collect()
    }

    #[test]
    fn identical_pairs_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let base = random_pairs(&mut rng, 4, 2);
        let pairs: Vec<_> = base.iter().map(|(s, _)| (s.clone(), s.clone())).collect();
        let r = best_rotation(&pairs).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(r[i][j], expect, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn recovers_a_quarter_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let sources = random_pairs(&mut rng, 5, 2);
        let quarter = rot2(std::f64::consts::FRAC_PI_2);
        let pairs: Vec<_> =
            sources.iter().map(|(s, _)| (s.clone(), mat_vec(&quarter, s))).collect();
        let r = best_rotation(&pairs).unwrap();
        assert_rotation(&r, 1e-8);
        // R must undo the quarter turn.
        let aligned = apply(&r, &pairs);
        assert!(mean_cosine(&aligned) >= 0.999, "cos = {}", mean_cosine(&aligned));
        assert_abs_diff_eq!(r[0][1], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(r[1][0], -1.0, epsilon = 1e-6);
    }

    #[test]
    fn beats_angle_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        for _ in 0..10 {
            let pairs = random_pairs(&mut rng, 5, 2);
            if pairs.len() < 2 {
                continue;
            }
            let r = best_rotation(&pairs).unwrap();
            assert_rotation(&r, 1e-8);
            let got = mean_cosine(&apply(&r, &pairs));
            let oracle = grid_best_cosine(&pairs);
            assert!(got >= oracle - 1e-6, "closed form {got} below grid {oracle}");
        }
    }

    #[test]
    fn never_decreases_mean_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        for _ in 0..20 {
            let pairs = random_pairs(&mut rng, 4, 2);
            if pairs.is_empty() {
                continue;
            }
            let before = mean_cosine(&pairs);
            let r = best_rotation(&pairs).unwrap();
            let after = mean_cosine(&apply(&r, &pairs));
            assert!(after >= before - 1e-9, "{after} < {before}");
        }
    }

    #[test]
    fn mirrored_targets_still_yield_proper_rotation() {
        // Reflection would align these exactly; the constraint must refuse it.
        let pairs = vec![
            (vec![1.0, 0.0], vec![1.0, 0.0]),
            (vec![0.0, 1.0], vec![0.0, -1.0]),
        ];
        let r = best_rotation(&pairs).unwrap();
        assert_rotation(&r, 1e-8);
    }

    #[test]
    fn zero_centroid_is_degenerate() {
        let pairs = vec![(vec![0.0, 0.0], vec![1.0, 0.0])];
        assert!(matches!(
            best_rotation(&pairs),
            Err(crate::error::Error::DegenerateRotation(_))
        ));
    }

    #[test]
    fn three_dimensional_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        // Rotation about the z-axis by 0.7 rad.
        let theta: f64 = 0.7;
        let (s, c) = theta.sin_cos();
        let rot = vec![
            vec![c, -s, 0.0],
            vec![s, c, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let sources = random_pairs(&mut rng, 6, 3);
        let pairs: Vec<_> =
            sources.iter().map(|(p, _)| (p.clone(), mat_vec(&rot, p))).collect();
        let r = best_rotation(&pairs).unwrap();
        assert_rotation(&r, 1e-7);
        let after = mean_cosine(&apply(&r, &pairs));
        assert!(after >= 0.999, "cos = {after}");
    }
}
