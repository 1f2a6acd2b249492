//! Dense SPD solves, pseudo-inverse solves and conjugate gradients.

use crate::error::{numeric, shape, Result};
use crate::tensor::{axpy, dot, norm, Tensor2};

/// Relative eigenvalue cutoff of [`psd_pinv_solve`].
pub const PINV_RTOL: f64 = 1e-10;

/// Minimum-norm solution `A⁺ B` for symmetric positive-semidefinite `a`.
/// Eigenvalues below `rtol · λ_max` count as zero.
pub fn psd_pinv_solve(a: &Tensor2, b: &Tensor2, rtol: f64) -> Result<Tensor2> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(shape("pseudo-inverse solve needs a square matrix matching the right-hand side"));
    }
    let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_row_slice(n, n, a.data()));
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    if !top.is_finite() {
        return Err(numeric("non-finite eigenvalue in pseudo-inverse solve"));
    }
    let cut = rtol * top;
    let inv = eig.eigenvalues.map(|v| if v > cut { 1.0 / v } else { 0.0 });
    let v = &eig.eigenvectors;
    let rhs = nalgebra::DMatrix::from_row_slice(n, b.cols(), b.data());
    let mut proj = v.transpose() * rhs;
    for (i, s) in inv.iter().enumerate() {
        proj.row_mut(i).scale_mut(*s);
    }
    let x = v * proj;
    Tensor2::new(n, b.cols(), x.transpose().as_slice().to_vec())
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factor `a` (only the lower triangle is read).
    pub fn new(a: &Tensor2) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(shape("Cholesky needs a square matrix"));
        }
        let mut l = a.data().to_vec();
        for j in 0..n {
            let (done, rest) = l.split_at_mut(j * n);
            let row_j = &mut rest[..n];
            for k in 0..j {
                let s = dot(&done[k * n..k * n + k], &row_j[..k]);
                row_j[k] = (row_j[k] - s) / done[k * n + k];
            }
            let d = row_j[j] - dot(&row_j[..j], &row_j[..j]);
            if !(d > 0.0) || !d.is_finite() {
                return Err(numeric(format!(
                    "matrix is not positive definite (pivot {j} = {d:e}); increase the regularizer"
                )));
            }
            row_j[j] = d.sqrt();
            row_j[j + 1..].fill(0.0);
        }
        Ok(Self { n, l })
    }

    /// Solve `A X = B` for every column of `b` (`n × m`).
    pub fn solve(&self, b: &Tensor2) -> Result<Tensor2> {
        let n = self.n;
        if b.rows() != n {
            return Err(shape("right-hand side has the wrong row count"));
        }
        let m = b.cols();
        // Work column-major: each right-hand side is contiguous.
        let mut x = b.transpose().into_data();
        for col in x.chunks_mut(n) {
            for i in 0..n {
                let s = dot(&self.l[i * n..i * n + i], &col[..i]);
                col[i] = (col[i] - s) / self.l[i * n + i];
            }
            for i in (0..n).rev() {
                let mut s = col[i];
                for k in i + 1..n {
                    s -= self.l[k * n + i] * col[k];
                }
                col[i] = s / self.l[i * n + i];
            }
        }
        Tensor2::new(m, n, x).map(|t| t.transpose())
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Norm of the recursively updated residual at exit.
    pub residual_norm: f64,
    pub converged: bool,
}

/// Conjugate gradients for `A x = b` with `A` symmetric positive definite,
/// given only its action. Stops when `‖r‖ ≤ tol · ‖b‖`.
pub fn conjugate_gradient(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<CgOutcome> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let b_norm = norm(b);
    let target = tol * b_norm;
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            residual_norm: 0.0,
            converged: true,
        });
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for it in 0..max_iters {
        let ap = apply(&p)?;
        let curv = dot(&p, &ap);
        if !(curv > 0.0) {
            return Err(numeric(format!(
                "non-positive curvature {curv:e} at CG iteration {it}; increase damping"
            )));
        }
        let alpha = rr / curv;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= target {
            return Ok(CgOutcome {
                x,
                iterations: it + 1,
                residual_norm: rr_new.sqrt(),
                converged: true,
            });
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    Ok(CgOutcome {
        x,
        iterations: max_iters,
        residual_norm: rr.sqrt(),
        converged: false,
    })
}
