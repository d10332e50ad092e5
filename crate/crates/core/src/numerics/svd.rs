//! Singular values by one-sided Jacobi.
//!
//! Column pairs are rotated until every pair is orthogonal to a relative
//! tolerance of 1e-12; the singular values are then the column norms. Good
//! to close to machine precision on the sizes handled here (<= 1024 on a
//! side), which is what the condition-number diagnostics need.

use super::{NumericsError, Tensor};

const TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;

/// Singular values of a matrix, descending.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>, NumericsError> {
    if !m.all_finite() {
        return Err(NumericsError::NonFinite {
            what: "singular_values input".to_string(),
        });
    }
    assert!(
        m.shape().len() == 2 && m.rows() >= 1 && m.cols() >= 1,
        "singular_values needs a non-empty matrix, got {:?}",
        m.shape()
    );
    // Work with rows >= cols so the column count (and the pair loop) is small.
    let work = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let rows = work.rows();
    let ncols = work.cols();
    // Column-major copy: rotations touch whole columns.
    let mut col: Vec<Vec<f64>> = (0..ncols)
        .map(|j| (0..rows).map(|i| work.at(i, j)).collect())
        .collect();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..ncols {
            for q in (p + 1)..ncols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    let (x, y) = (col[p][i], col[q][i]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                let denom = (alpha * beta).sqrt();
                if denom == 0.0 || gamma.abs() <= TOL * denom {
                    continue;
                }
                off = off.max(gamma.abs() / denom);
                // Jacobi rotation zeroing the p/q cross term.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (col[p][i], col[q][i]);
                    col[p][i] = c * x - s * y;
                    col[q][i] = s * x + c * y;
                }
            }
        }
        if off <= TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NumericsError::NoConvergence {
            what: "one-sided Jacobi SVD",
            sweeps: MAX_SWEEPS,
        });
    }

    let mut sigma: Vec<f64> = col
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{randn, Rng};

    /// Independent oracle: eigenvalues of a symmetric matrix by classical
    /// two-sided Jacobi. Shares nothing with the one-sided code path above.
    fn symmetric_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a.to_vec();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += m[p][q] * m[p][q];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if m[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = 0.5 * (2.0 * m[p][q]).atan2(m[q][q] - m[p][p]);
                    let (c, s) = (theta.cos(), theta.sin());
                    for i in 0..n {
                        let (x, y) = (m[i][p], m[i][q]);
                        m[i][p] = c * x - s * y;
                        m[i][q] = s * x + c * y;
                    }
                    for j in 0..n {
                        let (x, y) = (m[p][j], m[q][j]);
                        m[p][j] = c * x - s * y;
                        m[q][j] = s * x + c * y;
                    }
                }
            }
        }
        let mut eig: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        eig
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.set(i, i, 1.0);
        }
        let s = singular_values(&eye).unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_matrix() {
        let mut d = Tensor::zeros(&[3, 3]);
        d.set(0, 0, 3.0);
        d.set(1, 1, 2.0);
        d.set(2, 2, 1.0);
        let s = singular_values(&d).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-14);
        assert!((s[1] - 2.0).abs() < 1e-14);
        assert!((s[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn squares_match_gram_eigenvalue_oracle() {
        let mut rng = Rng::new(31);
        let m = randn(&mut rng, &[8, 5], 0.0, 1.0);
        let s = singular_values(&m).unwrap();
        // Gram matrix M^T M, built directly.
        let mut gram = vec![vec![0.0f64; 5]; 5];
        for i in 0..5 {
            for j in 0..5 {
                let mut acc = 0.0;
                for r in 0..8 {
                    acc += m.at(r, i) * m.at(r, j);
                }
                gram[i][j] = acc;
            }
        }
        let eig = symmetric_eigenvalues(&gram);
        for (sv, ev) in s.iter().zip(&eig) {
            assert!(
                (sv * sv - ev).abs() < 1e-9 * ev.abs().max(1.0),
                "sigma^2 {} vs eig {}",
                sv * sv,
                ev
            );
        }
    }

    #[test]
    fn wide_matrix_matches_tall_transpose() {
        let mut rng = Rng::new(8);
        let m = randn(&mut rng, &[3, 9], 0.0, 1.0);
        let a = singular_values(&m).unwrap();
        let b = singular_values(&m.transpose()).unwrap();
        assert_eq!(a.len(), 3); // min(rows, cols) values
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn invariant_under_row_permutation() {
        let mut rng = Rng::new(13);
        let m = randn(&mut rng, &[6, 4], 0.0, 1.0);
        let mut permuted = Tensor::zeros(&[6, 4]);
        let order = [4usize, 0, 5, 2, 1, 3];
        for (dst, &src) in order.iter().enumerate() {
            for j in 0..4 {
                permuted.set(dst, j, m.at(src, j));
            }
        }
        let a = singular_values(&m).unwrap();
        let b = singular_values(&permuted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_input_is_error() {
        let mut m = Tensor::zeros(&[2, 2]);
        m.set(0, 1, f64::NAN);
        assert!(matches!(
            singular_values(&m),
            Err(NumericsError::NonFinite { .. })
        ));
    }
}
