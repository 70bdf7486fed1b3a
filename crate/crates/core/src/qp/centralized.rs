//! Centralized reference solver for the coupled peak-shaving QP.
//!
//! The coupling equality is eliminated, leaving a strictly convex QP
//! in the stacked battery inputs whose Hessian is block diagonal plus
//! a rank-N aggregate term. The active-set loop below mirrors
//! `solve_active_set` but exploits that structure: each agent carries
//! its own working set and a factorization of its pinned KKT system,
//! expressed as an affine response to the aggregate price
//!
//! ```text
//! u_i(lambda) = u0_i + U_i lambda,    kappa_i(lambda) = k0_i + K_i lambda,
//! ```
//!
//! and the price itself solves the N x N system
//!
//! ```text
//! (I / h0 + sum_i A_i U_i) lambda = zeta - w_bar - sum_i A_i u0_i,
//! ```
//!
//! with `h0` the curvature of the aggregate tracking cost. One step
//! changes a single agent's working set, so only that agent's
//! factorization is rebuilt. Cost per step is O(I N^2) plus one
//! O(N^3) solve instead of the O((2NI)^3) a dense method would pay.

use nalgebra::{DMatrix, DVector};

use super::{independent_rows, DenseQp, QpError, TOL_ACT, TOL_DUAL};
use crate::model::{GridProblem, LocalProblem};

#[derive(Debug, Clone)]
pub struct CentralizedSolution {
    /// Optimal aggregate demand profile.
    pub z_bar: DVector<f64>,
    /// Optimal battery inputs per agent.
    pub u: Vec<DVector<f64>>,
    /// Multiplier of the aggregate coupling constraint.
    pub lambda: DVector<f64>,
    /// Inequality multipliers per agent, zero outside the working set.
    pub kappa: Vec<DVector<f64>>,
    /// Tolerance-active rows per agent.
    pub active: Vec<Vec<usize>>,
    /// Final working sets per agent.
    pub working: Vec<Vec<usize>>,
    /// Smallest multiplier over all active rows; infinity when none.
    pub min_active_dual: f64,
    /// Max KKT residual across stationarity, feasibility,
    /// complementarity, and the eliminated coupling equation.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub objective: f64,
}

struct AgentCache {
    u0: DVector<f64>,
    k0: DVector<f64>,
    u_sens: DMatrix<f64>,
    k_sens: DMatrix<f64>,
    /// `A_i U_i`, the agent's block of the price system.
    m: DMatrix<f64>,
    /// `A_i u0_i`.
    t: DVector<f64>,
}

fn rebuild_cache(lp: &LocalProblem, working: &[usize]) -> Result<AgentCache, QpError> {
    let nu = lp.q.nrows();
    let n = lp.a.nrows();
    let nw = working.len();
    let mut kkt = DMatrix::zeros(nu + nw, nu + nw);
    kkt.view_mut((0, 0), (nu, nu)).copy_from(&lp.q);
    for (pos, &row) in working.iter().enumerate() {
        for c in 0..nu {
            kkt[(nu + pos, c)] = lp.d_mat[(row, c)];
            kkt[(c, nu + pos)] = lp.d_mat[(row, c)];
        }
    }
    let lu = kkt.clone().lu();

    let mut rhs = DMatrix::zeros(nu + nw, 1 + n);
    for (pos, &row) in working.iter().enumerate() {
        rhs[(nu + pos, 0)] = lp.d_vec[row];
    }
    rhs.view_mut((0, 1), (nu, n)).copy_from(&lp.a.transpose());
    let mut sol = lu.solve(&rhs).ok_or(QpError::SingularKkt {
        n: nu,
        working: nw,
    })?;
    // one refinement round to keep degenerate working sets accurate
    if let Some(corr) = lu.solve(&(&rhs - &kkt * &sol)) {
        sol += corr;
    }
    if sol.iter().any(|x| !x.is_finite()) {
        return Err(QpError::SingularKkt {
            n: nu,
            working: nw,
        });
    }

    let u0 = sol.view((0, 0), (nu, 1)).column(0).clone_owned();
    let k0 = sol.view((nu, 0), (nw, 1)).column(0).clone_owned();
    let u_sens = sol.view((0, 1), (nu, n)).clone_owned();
    let k_sens = sol.view((nu, 1), (nw, n)).clone_owned();
    Ok(AgentCache {
        m: &lp.a * &u_sens,
        t: &lp.a * &u0,
        u0,
        k0,
        u_sens,
        k_sens,
    })
}

struct Candidate {
    lambda: DVector<f64>,
    u: Vec<DVector<f64>>,
    kappa_w: Vec<DVector<f64>>,
    /// Residual of the price system, folded into the final KKT check.
    price_residual: f64,
}

fn solve_candidate(grid: &GridProblem, caches: &[AgentCache]) -> Result<Candidate, QpError> {
    let n = grid.n_horizon;
    let h0 = grid.f0_curvature();
    let mut coef = DMatrix::zeros(n, n);
    let mut rhs = &grid.zeta - &grid.w_bar;
    for cache in caches {
        coef += &cache.m;
        rhs -= &cache.t;
    }
    for k in 0..n {
        coef[(k, k)] += 1.0 / h0;
    }
    let chol = coef
        .clone()
        .cholesky()
        .ok_or(QpError::SingularKkt { n, working: 0 })?;
    let mut lambda = chol.solve(&rhs);
    lambda += chol.solve(&(&rhs - &coef * &lambda));
    let price_residual = (&coef * &lambda - &rhs).amax() * h0;

    let u: Vec<DVector<f64>> = caches
        .iter()
        .map(|c| &c.u0 + &c.u_sens * &lambda)
        .collect();
    let kappa_w: Vec<DVector<f64>> = caches
        .iter()
        .map(|c| &c.k0 + &c.k_sens * &lambda)
        .collect();
    Ok(Candidate {
        lambda,
        u,
        kappa_w,
        price_residual,
    })
}

/// Consecutive no-movement iterations before Bland pivoting, matching
/// the dense solver.
const STALL_LIMIT: usize = 40;

/// Solves the coupled problem to optimality; `warm` supplies per-agent
/// working-set guesses (typically from a previous horizon).
pub fn solve_centralized(
    grid: &GridProblem,
    warm: Option<&[Vec<usize>]>,
) -> Result<CentralizedSolution, QpError> {
    let n_agents = grid.n_agents();

    // Warm path: adopt the guessed working sets wholesale if their
    // pinned solution is already primal feasible.
    if let Some(sets) = warm {
        if sets.len() == n_agents {
            if let Some(out) = try_warm(grid, sets)? {
                return Ok(out);
            }
        }
    }

    // Cold path: start from zero input, restoring per-agent
    // feasibility first if a custom problem does not admit it.
    let mut u: Vec<DVector<f64>> = Vec::with_capacity(n_agents);
    let mut working: Vec<Vec<usize>> = Vec::with_capacity(n_agents);
    for lp in &grid.locals {
        let nu = lp.q.nrows();
        let zero = DVector::zeros(nu);
        let start = if (&lp.d_mat * &zero - &lp.d_vec).max().max(0.0) <= 0.0 {
            zero
        } else {
            let restore = DenseQp {
                hess: DMatrix::identity(nu, nu),
                lin: DVector::zeros(nu),
                d_mat: lp.d_mat.clone(),
                d_vec: lp.d_vec.clone(),
            };
            super::solve_active_set(&restore, None)?.v
        };
        let active = active_rows(lp, &start);
        working.push(independent_rows(&lp.d_mat, &active, nu));
        u.push(start);
    }
    solve_from(grid, u, working, None)
}

fn try_warm(
    grid: &GridProblem,
    sets: &[Vec<usize>],
) -> Result<Option<CentralizedSolution>, QpError> {
    let mut working: Vec<Vec<usize>> = Vec::with_capacity(sets.len());
    for (lp, rows) in grid.locals.iter().zip(sets) {
        let in_range: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&j| j < lp.d_mat.nrows())
            .collect();
        working.push(independent_rows(&lp.d_mat, &in_range, lp.q.nrows()));
    }
    let caches: Vec<AgentCache> = match grid
        .locals
        .iter()
        .zip(&working)
        .map(|(lp, w)| rebuild_cache(lp, w))
        .collect::<Result<_, _>>()
    {
        Ok(c) => c,
        Err(_) => return Ok(None),
    };
    let Ok(cand) = solve_candidate(grid, &caches) else {
        return Ok(None);
    };
    let feasible = grid
        .locals
        .iter()
        .zip(&cand.u)
        .all(|(lp, ui)| (&lp.d_mat * ui - &lp.d_vec).max().max(0.0) <= TOL_ACT);
    if !feasible {
        return Ok(None);
    }
    let u = cand.u.clone();
    solve_from(grid, u, working, Some((caches, cand))).map(Some)
}

fn solve_from(
    grid: &GridProblem,
    mut u: Vec<DVector<f64>>,
    mut working: Vec<Vec<usize>>,
    preloaded: Option<(Vec<AgentCache>, Candidate)>,
) -> Result<CentralizedSolution, QpError> {
    let total_rows: usize = grid.locals.iter().map(|lp| lp.d_mat.nrows()).sum();
    let total_vars: usize = grid.locals.iter().map(|lp| lp.q.nrows()).sum();
    let cap = 200 + 40 * (total_vars + total_rows);

    let (mut caches, mut candidate) = match preloaded {
        Some((c, cand)) => (c, Some(cand)),
        None => {
            let caches: Vec<AgentCache> = grid
                .locals
                .iter()
                .zip(&working)
                .map(|(lp, w)| rebuild_cache(lp, w))
                .collect::<Result<_, _>>()?;
            (caches, None)
        }
    };

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
                working: working.iter().map(Vec::len).sum(),
            });
        }

        if candidate.is_none() {
            candidate = Some(solve_candidate(grid, &caches)?);
        }
        let cand = candidate.as_ref().unwrap();

        let mut step = 0.0_f64;
        let mut scale = 1.0_f64;
        for (ui, ci) in u.iter().zip(&cand.u) {
            step = step.max((ci - ui).amax());
            scale = scale.max(ui.amax());
        }
        last_step = step;

        if step <= 1e-13 * scale {
            // At the pinned optimum: finish or drop the worst row.
            let mut drop_at: Option<(usize, usize)> = None; // (agent, pos)
            let mut drop_val = 0.0;
            for (i, kw) in cand.kappa_w.iter().enumerate() {
                for (pos, &val) in kw.iter().enumerate() {
                    if val < TOL_DUAL {
                        let better = match drop_at {
                            None => true,
                            Some((bi, bp)) => {
                                if bland {
                                    (i, working[i][pos]) < (bi, working[bi][bp])
                                } else {
                                    val < drop_val
                                        || (val == drop_val
                                            && (i, working[i][pos]) < (bi, working[bi][bp]))
                                }
                            }
                        };
                        if better {
                            drop_at = Some((i, pos));
                            drop_val = val;
                        }
                    }
                }
            }
            match drop_at {
                None => {
                    let cand = candidate.take().unwrap();
                    return Ok(finalize(grid, cand, &working, iterations));
                }
                Some((i, pos)) => {
                    working[i].remove(pos);
                    caches[i] = rebuild_cache(&grid.locals[i], &working[i])?;
                    candidate = None;
                    stalled += 1;
                    if stalled > STALL_LIMIT {
                        bland = true;
                    }
                }
            }
            continue;
        }

        // Ratio test across every agent's inactive rows.
        let mut alpha = 1.0_f64;
        let mut blocker: Option<(usize, usize)> = None;
        for (i, lp) in grid.locals.iter().enumerate() {
            let p = &cand.u[i] - &u[i];
            let p_inf = p.amax();
            if p_inf <= 1e-15 {
                continue;
            }
            let dir_all = &lp.d_mat * &p;
            let slack_all = &lp.d_vec - &lp.d_mat * &u[i];
            for j in 0..lp.d_mat.nrows() {
                if working[i].contains(&j) {
                    continue;
                }
                let dir = dir_all[j];
                if dir <= 1e-12 * (1.0 + p_inf) {
                    continue;
                }
                let a_j = slack_all[j].max(0.0) / dir;
                if a_j < alpha - 1e-15 {
                    alpha = a_j;
                    blocker = Some((i, j));
                }
            }
        }

        if let Some((i, j)) = blocker {
            for (ui, ci) in u.iter_mut().zip(&cand.u) {
                let p = ci - &*ui;
                ui.axpy(alpha, &p, 1.0);
            }
            if let Some(pos) =
                super::dependent_exchange_pos(&grid.locals[i].d_mat, &working[i], j)
            {
                working[i].remove(pos);
            }
            let insert_at = working[i].partition_point(|&r| r < j);
            working[i].insert(insert_at, j);
            caches[i] = rebuild_cache(&grid.locals[i], &working[i])?;
            candidate = None;
            if alpha <= 1e-14 {
                stalled += 1;
                if stalled > STALL_LIMIT {
                    bland = true;
                }
            } else {
                stalled = 0;
            }
        } else {
            u.clone_from(&cand.u);
            stalled = 0;
        }
    }
}

fn active_rows(lp: &LocalProblem, u: &DVector<f64>) -> Vec<usize> {
    let slack = &lp.d_vec - &lp.d_mat * u;
    (0..lp.d_mat.nrows())
        .filter(|&j| slack[j] <= TOL_ACT * (1.0 + lp.d_vec[j].abs()))
        .collect()
}

fn finalize(
    grid: &GridProblem,
    cand: Candidate,
    working: &[Vec<usize>],
    iterations: usize,
) -> CentralizedSolution {
    let h0 = grid.f0_curvature();
    let z_bar = &grid.zeta - &cand.lambda / h0;

    let mut kappa = Vec::with_capacity(grid.n_agents());
    let mut active = Vec::with_capacity(grid.n_agents());
    let mut min_active_dual = f64::INFINITY;
    let mut residual = cand.price_residual;

    for (i, lp) in grid.locals.iter().enumerate() {
        let mut k_full = DVector::zeros(lp.d_mat.nrows());
        for (pos, &row) in working[i].iter().enumerate() {
            k_full[row] = cand.kappa_w[i][pos].max(0.0);
        }
        let act = active_rows(lp, &cand.u[i]);
        for &j in &act {
            min_active_dual = min_active_dual.min(k_full[j]);
        }

        let stationarity =
            (&lp.q * &cand.u[i] - lp.a.transpose() * &cand.lambda + lp.d_mat.transpose() * &k_full)
                .amax();
        let slack = &lp.d_vec - &lp.d_mat * &cand.u[i];
        let feasibility = (-slack.min()).max(0.0);
        let complementarity = (0..lp.d_mat.nrows())
            .map(|j| (k_full[j] * slack[j]).abs())
            .fold(0.0, f64::max);
        residual = residual.max(stationarity).max(feasibility).max(complementarity);

        kappa.push(k_full);
        active.push(act);
    }

    let coupling = (&z_bar - grid.aggregate_demand(&cand.u)).amax();
    residual = residual.max(coupling);

    let objective = grid.eval_total(&z_bar, &cand.u);
    CentralizedSolution {
        z_bar,
        u: cand.u,
        lambda: cand.lambda,
        kappa,
        active,
        working: working.to_vec(),
        min_active_dual,
        kkt_residual: residual,
        iterations,
        objective,
    }
}
