//! Thin SVD by one-sided Jacobi rotations.
//!
//! The rotations orthogonalize the columns of `A` (or of `Aᵀ` when `A` is
//! wide), so the implicit Gram matrix is always the smaller of `AᵀA` and
//! `AAᵀ`.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

const MAX_SWEEPS: usize = 80;

/// `A = U·diag(s)·Vᵀ` with `U: [m,k]`, `V: [n,k]`, `k = min(m,n)` and `s`
/// sorted in non-increasing order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        let (m, k) = (self.u.rows(), self.s.len());
        let n = self.v.rows();
        let mut us = self.u.clone();
        for row in us.data_mut().chunks_exact_mut(k) {
            for (x, s) in row.iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        let data = kernels::matmul_nt(us.data(), self.v.data(), m, k, n);
        Tensor::from_parts(vec![m, n], data)
    }

    /// `‖U Σ Vᵀ - A‖_F / ‖A‖_F` (absolute when `A` is zero).
    pub fn relative_residual(&self, a: &Tensor) -> f64 {
        let r = self.reconstruct();
        let diff: f64 = r
            .data()
            .iter()
            .zip(a.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let scale = a.norm_l2();
        if scale > 0.0 {
            diff / scale
        } else {
            diff
        }
    }
}

pub fn svd(a: &Tensor) -> Result<Svd> {
    if a.rank() != 2 {
        return Err(Error::Domain(format!("svd needs a matrix, got {:?}", a.shape())));
    }
    let (m, n) = (a.rows(), a.cols());
    if m >= n {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose()?)?;
        Ok(Svd { u: t.v, s: t.s, v: t.u })
    }
}

/// Column-major working copy makes column rotations contiguous.
fn jacobi_tall(a: &Tensor) -> Result<Svd> {
    let (m, n) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.data()[i * n + j]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = f64::EPSILON * m as f64;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = kernels::dot(&cols[p], &cols[p]);
                let beta = kernels::dot(&cols[q], &cols[q]);
                let gamma = kernels::dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (kernels::dot(c, c).sqrt(), j))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut u = vec![0.0; m * n];
    let mut vt = vec![0.0; n * n];
    let mut s = Vec::with_capacity(n);
    for (k, &(sigma, j)) in order.iter().enumerate() {
        s.push(sigma);
        for i in 0..m {
            u[i * n + k] = if sigma > 0.0 { cols[j][i] / sigma } else { 0.0 };
        }
        for i in 0..n {
            vt[i * n + k] = v[j][i];
        }
    }
    let out = Svd {
        u: Tensor::from_parts(vec![m, n], u),
        s,
        v: Tensor::from_parts(vec![n, n], vt),
    };
    if !converged {
        return Err(Error::Numeric {
            message: format!("Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"),
            residual: out.relative_residual(a),
        });
    }
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_examples() {
        let s = svd(&Tensor::eye(3)).unwrap();
        assert_eq!(s.s, vec![1.0, 1.0, 1.0]);

        let d = Tensor::from_rows(&[[3.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(svd(&d).unwrap().s, vec![3.0, 1.0]);

        let a = Tensor::from_rows(&[[0.0, 2.0], [1.0, 0.0]]).unwrap();
        let s = svd(&a).unwrap();
        assert!((s.s[0] - 2.0).abs() < 1e-15 && (s.s[1] - 1.0).abs() < 1e-15);
        assert!(s.relative_residual(&a) < 1e-15);
    }

    #[test]
    fn wide_and_rank_deficient() {
        let a = Tensor::from_rows(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]).unwrap();
        let s = svd(&a).unwrap();
        assert_eq!(s.u.shape(), &[2, 2]);
        assert_eq!(s.v.shape(), &[3, 2]);
        assert!(s.s[1].abs() < 1e-12);
        assert!((s.s[0] - 70f64.sqrt()).abs() < 1e-12);
        assert!(s.relative_residual(&a) < 1e-14);
    }

    #[test]
    fn zero_matrix() {
        let s = svd(&Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(s.s, vec![0.0, 0.0]);
        assert_eq!(s.relative_residual(&Tensor::zeros(&[3, 2])), 0.0);
    }
}
