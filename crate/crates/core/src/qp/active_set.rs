//! Primal active-set method for dense strictly convex QPs.
//!
//! The solver keeps a feasible iterate `x` and a linearly independent
//! working set `W` of constraint rows treated as equalities. Each
//! outer step solves the equality-constrained subproblem pinned to `W`;
//! the iterate either moves to that candidate (adding the first
//! blocking row encountered along the way) or, once the candidate is
//! reached, drops a row with negative multiplier. Strict convexity
//! makes every subproblem uniquely solvable, so the method is fully
//! deterministic: ties in the ratio test and in the drop rule resolve
//! to the smallest row index, and a stall counter switches to
//! Bland-style smallest-index pivoting to break degenerate cycles.
//!
//! Feasible starts come for free in this crate (battery problems admit
//! `u = 0`); generic instances fall back to a big-M phase 1 on an
//! elastic variable.

use nalgebra::{DMatrix, DVector};

use super::{independent_rows, kkt::solve_equality_kkt, QpError, TOL_ACT, TOL_DUAL};

/// `min 1/2 v' hess v + lin' v  s.t.  d_mat v <= d_vec`, `hess` SPD.
#[derive(Debug, Clone)]
pub struct DenseQp {
    pub hess: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub d_mat: DMatrix<f64>,
    pub d_vec: DVector<f64>,
}

impl DenseQp {
    pub fn n(&self) -> usize {
        self.hess.nrows()
    }

    pub fn m(&self) -> usize {
        self.d_mat.nrows()
    }

    pub fn objective(&self, v: &DVector<f64>) -> f64 {
        0.5 * v.dot(&(&self.hess * v)) + self.lin.dot(v)
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        if self.hess.ncols() != n
            || self.lin.len() != n
            || (self.m() > 0 && self.d_mat.ncols() != n)
            || self.d_vec.len() != self.m()
        {
            return Err(QpError::Dimension { what: "DenseQp" });
        }
        Ok(())
    }

    /// Rows active at `v` under the shared activity tolerance,
    /// duplicates and dependent rows included.
    pub fn active_rows(&self, v: &DVector<f64>) -> Vec<usize> {
        let slack = &self.d_vec - &self.d_mat * v;
        (0..self.m())
            .filter(|&j| slack[j] <= TOL_ACT * (1.0 + self.d_vec[j].abs()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Primal minimizer.
    pub v: DVector<f64>,
    /// Multipliers for all rows; zero outside the working set.
    pub kappa: DVector<f64>,
    /// All rows active at `v` (tolerance-based, may be dependent).
    pub active: Vec<usize>,
    /// Final working set (independent subset of `active`).
    pub working: Vec<usize>,
    /// Smallest multiplier over active rows; infinity when none are
    /// active. A comfortably positive value certifies strict
    /// complementarity.
    pub min_active_dual: f64,
    /// Max of stationarity, feasibility, and complementarity residuals.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Consecutive no-movement iterations tolerated before switching to
/// Bland pivoting.
const STALL_LIMIT: usize = 40;

/// Solves the QP, optionally warm-started from a previous active set.
///
/// A usable warm set lets the solver confirm optimality in a single
/// factorization when the active set did not change between calls.
pub fn solve_active_set(qp: &DenseQp, warm: Option<&[usize]>) -> Result<QpSolution, QpError> {
    qp.validate()?;
    let n = qp.n();

    if let Some(rows) = warm {
        let in_range: Vec<usize> = rows.iter().copied().filter(|&j| j < qp.m()).collect();
        let w = independent_rows(&qp.d_mat, &in_range, n);
        if let Ok((cand, kappa_w)) = eqp_candidate(qp, &w) {
            if primal_violation(qp, &cand) <= TOL_ACT {
                return solve_from(qp, cand.clone(), w, Some((cand, kappa_w)));
            }
        }
    }

    let zero = DVector::zeros(n);
    if primal_violation(qp, &zero) <= 0.0 {
        let w = independent_rows(&qp.d_mat, &qp.active_rows(&zero), n);
        return solve_from(qp, zero, w, None);
    }

    let start = phase1_feasible_point(qp)?;
    let w = independent_rows(&qp.d_mat, &qp.active_rows(&start), n);
    solve_from(qp, start, w, None)
}

/// Core loop. `x0` must be feasible and `w0` independent with all rows
/// active at `x0` (or at the preloaded candidate).
fn solve_from(
    qp: &DenseQp,
    mut x: DVector<f64>,
    mut w: Vec<usize>,
    preloaded: Option<(DVector<f64>, DVector<f64>)>,
) -> Result<QpSolution, QpError> {
    let cap = 200 + 40 * (qp.n() + qp.m());
    let mut cached = preloaded;
    let mut iterations = 0;
    let mut stalled = 0;
    let mut bland = false;
    let mut last_step = 0.0;

    loop {
        iterations += 1;
        if iterations > cap {
            return Err(QpError::IterationLimit {
                cap,
                last_step,
                working: w.len(),
            });
        }

        if cached.is_none() {
            cached = Some(eqp_candidate(qp, &w)?);
        }
        let (cand, kappa_w) = cached.as_ref().unwrap();

        let p = cand - &x;
        last_step = p.amax();
        // Once the iteration is grinding at a degenerate corner, a
        // residual distance far below solution accuracy counts as
        // having arrived; the final KKT residual reports any slack
        // this leaves behind.
        let at_cand = if bland { 1e-10 } else { 1e-13 } * (1.0 + x.amax());
        if last_step <= at_cand {
            // At the subproblem optimum: stop or drop.
            let mut drop_pos: Option<usize> = None;
            for (pos, &row) in w.iter().enumerate() {
                if kappa_w[pos] < TOL_DUAL {
                    let better = match drop_pos {
                        None => true,
                        Some(best) => {
                            if bland {
                                row < w[best]
                            } else {
                                kappa_w[pos] < kappa_w[best]
                                    || (kappa_w[pos] == kappa_w[best] && row < w[best])
                            }
                        }
                    };
                    if better {
                        drop_pos = Some(pos);
                    }
                }
            }
            match drop_pos {
                None => {
                    return Ok(finalize(qp, x, &w, kappa_w, iterations));
                }
                Some(pos) => {
                    w.remove(pos);
                    cached = None;
                    stalled += 1;
                    if stalled > STALL_LIMIT {
                        bland = true;
                    }
                }
            }
            continue;
        }

        // Ratio test toward the candidate; smallest index wins ties.
        let mut alpha = 1.0;
        let mut blocker: Option<usize> = None;
        for j in 0..qp.m() {
            if w.contains(&j) {
                continue;
            }
            let dir = qp.d_mat.row(j).transpose().dot(&p);
            if dir <= 1e-12 * (1.0 + p.amax()) {
                continue;
            }
            let slack = (qp.d_vec[j] - qp.d_mat.row(j).transpose().dot(&x)).max(0.0);
            // Feasibility tolerance: a row the full step violates by a
            // hair is treated as satisfied rather than blocking. At
            // degenerate corners with near-parallel rows this is what
            // breaks add/drop cycles.
            if dir - slack <= 1e-11 * (1.0 + qp.d_vec[j].abs()) {
                continue;
            }
            let a_j = slack / dir;
            if a_j < alpha - 1e-15 {
                alpha = a_j;
                blocker = Some(j);
            } else if bland && blocker.is_some_and(|b| j < b) && a_j <= alpha + 1e-12 {
                // anti-cycling mode: least index among near-ties
                blocker = Some(j);
            }
        }

        if let Some(j) = blocker {
            let moved = alpha * last_step;
            x.axpy(alpha, &p, 1.0);
            if let Some(pos) = super::dependent_exchange_pos(&qp.d_mat, &w, j) {
                w.remove(pos);
            }
            let insert_at = w.partition_point(|&r| r < j);
            w.insert(insert_at, j);
            cached = None;
            // Stalling means no meaningful movement, whatever alpha
            // says: a moderate alpha times a microscopic direction is
            // still churn.
            if moved <= 1e-11 * (1.0 + x.amax()) {
                stalled += 1;
                if stalled > STALL_LIMIT {
                    bland = true;
                }
            } else {
                stalled = 0;
                bland = false;
            }
        } else {
            x = cand.clone();
            stalled = 0;
        }
    }
}

/// Optimum of the QP restricted to `d_mat[w] v = d_vec[w]`.
fn eqp_candidate(qp: &DenseQp, w: &[usize]) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    let a = qp.d_mat.select_rows(w.iter());
    let b = DVector::from_iterator(w.len(), w.iter().map(|&j| qp.d_vec[j]));
    solve_equality_kkt(&qp.hess, &qp.lin, &a, &b)
}

fn primal_violation(qp: &DenseQp, v: &DVector<f64>) -> f64 {
    if qp.m() == 0 {
        return 0.0;
    }
    (&qp.d_mat * v - &qp.d_vec).max().max(0.0)
}

/// Big-M phase 1: find any feasible point by minimizing
/// `1/2 |v|^2 + M s + 1/2 s^2` with every row relaxed by the elastic
/// `s >= 0`. The original objective plays no part here, so the
/// subproblem is well scaled no matter how the caller's Hessian looks.
/// Once `M` exceeds the multiplier scale of the minimum-norm feasible
/// point, the penalty is exact and a feasible problem ends at `s = 0`;
/// otherwise `s` reports the violation. Two moderate rungs are tried
/// instead of one huge `M`, because candidates scale with `M` and
/// extreme values wreck the floating-point behavior of the ratio test.
fn phase1_feasible_point(qp: &DenseQp) -> Result<DVector<f64>, QpError> {
    let n = qp.n();
    let m = qp.m();
    let hess = DMatrix::identity(n + 1, n + 1);
    let mut d_mat = DMatrix::zeros(m + 1, n + 1);
    d_mat.view_mut((0, 0), (m, n)).copy_from(&qp.d_mat);
    for j in 0..m {
        d_mat[(j, n)] = -1.0;
    }
    d_mat[(m, n)] = -1.0;
    let mut d_vec = DVector::zeros(m + 1);
    d_vec.rows_mut(0, m).copy_from(&qp.d_vec);

    let s0 = (-qp.d_vec.min()).max(0.0) + 1.0;
    let scale = 1.0 + qp.d_vec.amax();
    let mut best_violation = f64::INFINITY;
    let mut last_err = None;
    for rung in [1e4, 1e7] {
        let mut lin = DVector::zeros(n + 1);
        lin[n] = rung * scale;
        let aug = DenseQp {
            hess: hess.clone(),
            lin,
            d_mat: d_mat.clone(),
            d_vec: d_vec.clone(),
        };
        let mut start = DVector::zeros(n + 1);
        start[n] = s0;
        match solve_from(&aug, start, Vec::new(), None) {
            Ok(sol) => {
                let s = sol.v[n];
                if s <= 1e-9 * scale {
                    return Ok(sol.v.rows(0, n).clone_owned());
                }
                best_violation = best_violation.min(s);
            }
            Err(e) => last_err = Some(e),
        }
    }
    if best_violation.is_finite() {
        Err(QpError::Infeasible {
            residual: best_violation,
        })
    } else {
        Err(last_err.expect("no rung produced a result"))
    }
}

fn finalize(
    qp: &DenseQp,
    v: DVector<f64>,
    w: &[usize],
    kappa_w: &DVector<f64>,
    iterations: usize,
) -> QpSolution {
    let mut kappa = DVector::zeros(qp.m());
    for (pos, &row) in w.iter().enumerate() {
        kappa[row] = kappa_w[pos].max(0.0);
    }
    let active = qp.active_rows(&v);
    let min_active_dual = active
        .iter()
        .map(|&j| kappa[j])
        .fold(f64::INFINITY, f64::min);

    let stationarity = (&qp.hess * &v + &qp.lin + qp.d_mat.transpose() * &kappa).amax();
    let feasibility = primal_violation(qp, &v);
    let slack = &qp.d_vec - &qp.d_mat * &v;
    let complementarity = (0..qp.m())
        .map(|j| (kappa[j] * slack[j]).abs())
        .fold(0.0, f64::max);

    QpSolution {
        v,
        kappa,
        active,
        working: w.to_vec(),
        min_active_dual,
        kkt_residual: stationarity.max(feasibility).max(complementarity),
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{condense_constraints, build_qi, HouseholdParams};
    use crate::qp::enumerate::solve_by_enumeration;
    use crate::qp::TOL_KKT;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_qp() -> DenseQp {
        // min 1/2 v^2 - v  s.t.  v <= 0.5
        DenseQp {
            hess: DMatrix::from_element(1, 1, 1.0),
            lin: DVector::from_element(1, -1.0),
            d_mat: DMatrix::from_element(1, 1, 1.0),
            d_vec: DVector::from_element(1, 0.5),
        }
    }

    #[test]
    fn clipped_scalar_minimum() {
        let sol = solve_active_set(&scalar_qp(), None).unwrap();
        assert!((sol.v[0] - 0.5).abs() < 1e-12);
        assert!((sol.kappa[0] - 0.5).abs() < 1e-12);
        assert_eq!(sol.active, vec![0]);
        assert!(sol.kkt_residual < TOL_KKT);
    }

    #[test]
    fn unconstrained_matches_newton() {
        let qp = DenseQp {
            hess: DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]),
            lin: DVector::from_column_slice(&[-1.0, 4.0]),
            d_mat: DMatrix::zeros(0, 2),
            d_vec: DVector::zeros(0),
        };
        let sol = solve_active_set(&qp, None).unwrap();
        assert!((&qp.hess * &sol.v + &qp.lin).amax() < 1e-12);
        assert!(sol.active.is_empty());
        assert_eq!(sol.min_active_dual, f64::INFINITY);
    }

    #[test]
    fn phase1_reaches_shifted_feasible_region() {
        // v >= 2 makes the origin infeasible; optimum clips to the bound.
        let qp = DenseQp {
            hess: DMatrix::from_element(1, 1, 1.0),
            lin: DVector::zeros(1),
            d_mat: DMatrix::from_element(1, 1, -1.0),
            d_vec: DVector::from_element(1, -2.0),
        };
        let sol = solve_active_set(&qp, None).unwrap();
        assert!((sol.v[0] - 2.0).abs() < 1e-9);
        assert!(sol.kkt_residual < 1e-8);
    }

    #[test]
    fn infeasible_rows_are_detected() {
        // v <= -1 and v >= 1
        let qp = DenseQp {
            hess: DMatrix::from_element(1, 1, 1.0),
            lin: DVector::zeros(1),
            d_mat: DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            d_vec: DVector::from_column_slice(&[-1.0, -1.0]),
        };
        assert!(matches!(
            solve_active_set(&qp, None),
            Err(QpError::Infeasible { .. })
        ));
    }

    #[test]
    fn duplicate_rows_are_reported_active_together() {
        let qp = DenseQp {
            hess: DMatrix::identity(1, 1),
            lin: DVector::from_element(1, -1.0),
            d_mat: DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            d_vec: DVector::from_column_slice(&[0.25, 0.25]),
        };
        let sol = solve_active_set(&qp, None).unwrap();
        assert!((sol.v[0] - 0.25).abs() < 1e-12);
        assert_eq!(sol.active, vec![0, 1]);
        // only one of the two can carry the multiplier
        assert_eq!(sol.working.len(), 1);
        assert_eq!(sol.min_active_dual, 0.0);
    }

    fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DenseQp {
        let l = DMatrix::from_fn(n, n, |r, c| {
            if r >= c {
                rng.random_range(-1.0..1.0)
            } else {
                0.0
            }
        });
        let hess = &l * l.transpose() + DMatrix::identity(n, n) * 0.3;
        let lin = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let d_mat = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let anchor = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
        // Bias bounds around a random anchor so that actives are common;
        // occasional negative shifts exercise phase 1 and infeasibility.
        let d_vec = &d_mat * anchor
            + DVector::from_fn(m, |_, _| rng.random_range(-0.15..0.6));
        DenseQp {
            hess,
            lin,
            d_mat,
            d_vec,
        }
    }

    #[test]
    fn random_instances_match_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut infeasible = 0;
        for trial in 0..250 {
            let n = rng.random_range(1..=4);
            let m = rng.random_range(1..=8);
            let qp = random_qp(&mut rng, n, m);
            let by_as = solve_active_set(&qp, None);
            let by_enum = solve_by_enumeration(&qp);
            match (by_as, by_enum) {
                (Ok(a), Ok(e)) => {
                    assert!(
                        (&a.v - &e.v).amax() < 1e-8,
                        "trial {trial}: primal mismatch {:.3e}",
                        (&a.v - &e.v).amax()
                    );
                    assert!((qp.objective(&a.v) - e.objective).abs() < 1e-9);
                    assert!(a.kkt_residual < 1e-8, "trial {trial}");
                }
                (Err(QpError::Infeasible { .. }), Err(QpError::Infeasible { .. })) => {
                    infeasible += 1;
                }
                (a, e) => panic!("trial {trial}: divergent outcomes {a:?} vs {e:?}"),
            }
        }
        // the generator should produce a healthy feasible majority
        assert!(infeasible < 60, "unexpected infeasible share: {infeasible}");
    }

    #[test]
    fn warm_start_confirms_unchanged_active_set_in_one_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let qp = random_qp(&mut rng, 4, 8);
            let Ok(cold) = solve_active_set(&qp, None) else {
                continue;
            };
            let warm = solve_active_set(&qp, Some(&cold.working)).unwrap();
            assert!((&warm.v - &cold.v).amax() < 1e-9);
            assert!(warm.iterations <= 2, "iterations {}", warm.iterations);
        }
    }

    #[test]
    fn battery_local_qp_solves_clean() {
        let p = HouseholdParams::default();
        let n = 6;
        let (d_mat, d_vec) = condense_constraints(&p, 1.0, n, 0.5).unwrap();
        // pull toward heavy charging; rate bounds must clip
        let lin = DVector::from_fn(2 * n, |i, _| if i % 2 == 0 { -3.0 } else { 0.1 });
        let qp = DenseQp {
            hess: build_qi(&p, n) * 2.0,
            lin,
            d_mat,
            d_vec,
        };
        let sol = solve_active_set(&qp, None).unwrap();
        assert!(sol.kkt_residual < TOL_KKT);
        assert!(!sol.active.is_empty());
        assert!(sol.kappa.min() >= 0.0);
        // feasibility of the reported point
        assert!((&qp.d_mat * &sol.v - &qp.d_vec).max() <= 1e-10);
    }
}
