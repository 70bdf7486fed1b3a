//! Dense convex QP kernel: the inner engine of the distributed solvers
//! and the reference oracle they are tested against.
//!
//! All problems here have the shape
//!
//! ```text
//! min  1/2 v' H v + q' v
//! s.t. D v <= d
//! ```
//!
//! with H symmetric positive definite, solved by a primal active-set
//! method ([`solve_active_set`]). Equality-constrained subsystems go
//! through [`solve_equality_kkt`]. The coupled grid problem is solved
//! by [`solve_centralized`], which exploits the per-household block
//! structure and serves as the optimum oracle for every convergence
//! test, and by [`enumerate`], a brute-force reference for tiny cases.

mod active_set;
mod centralized;
pub mod enumerate;
mod kkt;

pub use active_set::{solve_active_set, DenseQp, QpSolution};
pub use centralized::{solve_centralized, CentralizedSolution};
pub use kkt::{solve_equality_kkt, solve_equality_kkt_refined, spd_solve_refined};

use nalgebra::DMatrix;
use thiserror::Error;

/// Acceptance threshold for KKT residuals of reported solutions.
/// Problem data in this crate is O(1) (kW / kWh scale), so an absolute
/// tolerance is meaningful.
pub const TOL_KKT: f64 = 1e-10;

/// A constraint row counts as active when its slack satisfies
/// `d_j - D_j v <= TOL_ACT * (1 + |d_j|)`. Ties are resolved by
/// including the row: over-reporting an active row only adds a harmless
/// zero-multiplier direction to downstream curvature estimates.
pub const TOL_ACT: f64 = 1e-8;

/// Multipliers down to this value still count as dual feasible; purely
/// roundoff-negative values must not trigger extra pivots.
pub(crate) const TOL_DUAL: f64 = -1e-11;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch in {what}")]
    Dimension { what: &'static str },
    #[error("equality KKT system is singular (n = {n}, working set size {working})")]
    SingularKkt { n: usize, working: usize },
    #[error("constraints infeasible: phase-1 ends with violation {residual:.3e}")]
    Infeasible { residual: f64 },
    #[error(
        "active-set iteration cap {cap} exceeded (last step {last_step:.3e}, working set size {working})"
    )]
    IterationLimit {
        cap: usize,
        last_step: f64,
        working: usize,
    },
}

/// Greedily selects a linearly independent subset of the given rows of
/// `d_mat` (modified Gram-Schmidt, first-come-first-kept), capped at
/// `max_rows`. Used to seed working sets from possibly dependent
/// active-row lists.
pub(crate) fn independent_rows(d_mat: &DMatrix<f64>, rows: &[usize], max_rows: usize) -> Vec<usize> {
    let n = d_mat.ncols();
    let mut basis: Vec<nalgebra::DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for &j in rows {
        if kept.len() >= max_rows.min(n) {
            break;
        }
        let mut v = d_mat.row(j).transpose();
        let scale = v.norm();
        if scale == 0.0 {
            continue;
        }
        for b in &basis {
            let coef = v.dot(b);
            v.axpy(-coef, b, 1.0);
        }
        if v.norm() > 1e-10 * scale {
            v /= v.norm();
            basis.push(v);
            kept.push(j);
        }
    }
    kept
}

/// Checks whether row `j` of `d_mat` is (numerically) dependent on the
/// working rows and, if so, returns the position of the working row to
/// exchange against it: the one carrying the largest coefficient in
/// the dependence.
///
/// Active-set solvers need this when a blocking row turns out to be a
/// combination of rows that are already in the working set, which can
/// happen at degenerate corners where activity is only resolved to
/// rounding precision. Adding such a row would make the pinned KKT
/// system singular; exchanging keeps the working set independent and
/// the iterate feasible.
pub(crate) fn dependent_exchange_pos(
    d_mat: &DMatrix<f64>,
    working: &[usize],
    j: usize,
) -> Option<usize> {
    if working.is_empty() {
        return None;
    }
    let basis = d_mat.select_rows(working.iter()).transpose();
    let target = d_mat.row(j).transpose();
    let scale = target.norm();
    if scale == 0.0 {
        return None;
    }
    let svd = basis.clone().svd(true, true);
    let Ok(coef) = svd.solve(&target, 1e-12) else {
        return None;
    };
    if (&basis * &coef - &target).norm() > 1e-8 * scale {
        return None;
    }
    let mut best = 0;
    for k in 1..coef.len() {
        if coef[k].abs() > coef[best].abs() {
            best = k;
        }
    }
    if coef[best].abs() < 1e-12 {
        return None;
    }
    Some(best)
}
