//! Conjugate gradient for SPD matrix-free operators, with optional SPD
//! preconditioning. Inner products are area-weighted, consistent with the
//! rest of the crate.

use crate::error::{CoreError, Result};
use crate::grid::Field;
use crate::psido::LinearOperator;

pub const DEFAULT_MAX_ITERS: usize = 500;

/// Solves A x = b to a relative residual `tol`, starting from zero.
pub fn solve(op: &dyn LinearOperator, b: &Field, tol: f64, max_iters: usize) -> Result<Field> {
    solve_preconditioned(op, b, None, tol, max_iters)
}

/// Preconditioned CG: `precond` applies an SPD approximation of A^-1.
pub fn solve_preconditioned(
    op: &dyn LinearOperator,
    b: &Field,
    precond: Option<&dyn LinearOperator>,
    tol: f64,
    max_iters: usize,
) -> Result<Field> {
    let b_norm = b.norm();
    let mut x = Field::zeros(b.grid);
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b.clone();
    let mut z = match precond {
        Some(p) => p.apply(&r),
        None => r.clone(),
    };
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..max_iters {
        let ap = op.apply(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            return Err(CoreError::CgNoConvergence {
                residual: r.norm() / b_norm,
                iters: max_iters,
                target: tol,
            });
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        if r.norm() <= tol * b_norm {
            return Ok(x);
        }
        z = match precond {
            Some(pc) => pc.apply(&r),
            None => r.clone(),
        };
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        let mut p_new = z.clone();
        p_new.axpy(beta, &p);
        p = p_new;
    }
    Err(CoreError::CgNoConvergence {
        residual: r.norm() / b_norm,
        iters: max_iters,
        target: tol,
    })
}
