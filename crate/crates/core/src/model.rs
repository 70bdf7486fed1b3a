//! Household battery model and horizon-condensed problem data.
//!
//! Each household couples a battery to a forecast of its net power
//! consumption `w_i` (load minus local generation, in kW). Splitting the
//! battery input into charging and discharging parts
//! `u_i(n) = (u_i_plus(n), u_i_minus(n))`, the state of charge and the
//! metered demand evolve as
//!
//! ```text
//! x_i(n+1) = alpha_i * x_i(n) + T * (beta_i * u_i_plus(n) + u_i_minus(n))
//! z_i(n)   = w_i(n) + u_i_plus(n) + gamma_i * u_i_minus(n)
//! ```
//!
//! with self-discharge `alpha_i`, charging efficiency `beta_i`, and
//! discharging efficiency `gamma_i`, all in `(0, 1]`. Over a horizon of
//! `N` steps the state recursion eliminates `x_i`, leaving a condensed
//! inequality system `D_i u_i <= d_i` in the stacked input
//! `u_i = (u_plus(0), u_minus(0), ..., u_plus(N-1), u_minus(N-1))`.
//!
//! The coordination objective penalizes the deviation of the aggregate
//! demand `z_bar = w_bar + sum_i A_i u_i` from the moving-average
//! reference `zeta`, plus a small quadratic battery-usage cost per
//! household:
//!
//! ```text
//! f0(z_bar) = sigma0 / (N * I^2) * ||z_bar - zeta||^2
//! f_i(u_i)  = 1/2 * u_i' Q_i u_i
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of condensed constraint rows per horizon step.
pub const ROWS_PER_STEP: usize = 8;

/// Row slots within one horizon step of the condensed constraint system.
///
/// For step `n` (1-based) the block starts at `(n - 1) * ROWS_PER_STEP`
/// and orders rows as: state-of-charge upper/lower bound, charge-rate
/// upper/lower bound, discharge-rate upper/lower bound, and the upper
/// and lower sides of the mixing constraint
/// `0 <= u_minus/u_min + u_plus/u_max <= 1` that prevents simultaneous
/// full-rate charging and discharging.
pub mod row {
    pub const SOC_HI: usize = 0;
    pub const SOC_LO: usize = 1;
    pub const CHG_HI: usize = 2;
    pub const CHG_LO: usize = 3;
    pub const DIS_HI: usize = 4;
    pub const DIS_LO: usize = 5;
    pub const MIX_HI: usize = 6;
    pub const MIX_LO: usize = 7;
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid household parameter {name} = {value}: must satisfy {requirement}")]
    InvalidParam {
        name: &'static str,
        value: f64,
        requirement: &'static str,
    },
    #[error("state of charge {soc} outside [0, {capacity}]")]
    SocOutOfRange { soc: f64, capacity: f64 },
    #[error("prediction horizon must be at least {min}, got {got}")]
    HorizonTooShort { got: usize, min: usize },
    #[error("reference at time {k} with horizon {n} needs series samples {}..={} but only {len} are available", *k as i64 - (*n as i64 - 1), k + n - 1)]
    ReferenceWindow { k: usize, n: usize, len: usize },
    #[error("household {agent}: forecast has {got} samples, expected {expected}")]
    ForecastLength {
        agent: usize,
        got: usize,
        expected: usize,
    },
    #[error("expected {expected} households, got {got} in {what}")]
    CountMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
}

/// Static parameters of one household battery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HouseholdParams {
    /// Self-discharge factor per step, in (0, 1].
    pub alpha: f64,
    /// Charging efficiency, in (0, 1].
    pub beta: f64,
    /// Discharging efficiency, in (0, 1].
    pub gamma: f64,
    /// Usable battery capacity in kWh, nonnegative.
    pub capacity: f64,
    /// Maximum discharge rate in kW, strictly negative.
    pub u_min: f64,
    /// Maximum charge rate in kW, strictly positive.
    pub u_max: f64,
    /// Weight of the household's quadratic input cost, strictly positive.
    pub sigma: f64,
}

impl Default for HouseholdParams {
    /// Benchmark defaults: 2 kWh battery at +-0.5 kW with 99% retention
    /// and 95% conversion efficiency per half-hour step.
    fn default() -> Self {
        Self {
            alpha: 0.99,
            beta: 0.95,
            gamma: 0.95,
            capacity: 2.0,
            u_min: -0.5,
            u_max: 0.5,
            sigma: 1.0,
        }
    }
}

impl HouseholdParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let checks: [(&'static str, f64, bool, &'static str); 7] = [
            ("alpha", self.alpha, self.alpha > 0.0 && self.alpha <= 1.0, "0 < alpha <= 1"),
            ("beta", self.beta, self.beta > 0.0 && self.beta <= 1.0, "0 < beta <= 1"),
            ("gamma", self.gamma, self.gamma > 0.0 && self.gamma <= 1.0, "0 < gamma <= 1"),
            ("capacity", self.capacity, self.capacity >= 0.0, "capacity >= 0"),
            ("u_min", self.u_min, self.u_min < 0.0, "u_min < 0"),
            ("u_max", self.u_max, self.u_max > 0.0, "u_max > 0"),
            ("sigma", self.sigma, self.sigma > 0.0, "sigma > 0"),
        ];
        for (name, value, ok, requirement) in checks {
            if !value.is_finite() {
                return Err(ModelError::NonFinite { what: name });
            }
            if !ok {
                return Err(ModelError::InvalidParam {
                    name,
                    value,
                    requirement,
                });
            }
        }
        Ok(())
    }

    /// One step of the state-of-charge recursion.
    pub fn soc_step(&self, soc: f64, u_plus: f64, u_minus: f64, t_sample: f64) -> f64 {
        self.alpha * soc + t_sample * (self.beta * u_plus + u_minus)
    }

    /// Metered demand of the household at one step.
    pub fn demand(&self, w: f64, u_plus: f64, u_minus: f64) -> f64 {
        w + u_plus + self.gamma * u_minus
    }
}

/// Measured state and consumption data of one household at time `k`.
#[derive(Debug, Clone)]
pub struct HouseholdState {
    /// Current state of charge in kWh.
    pub soc: f64,
    /// Past net consumption `w_i(j)` for `j < k` (most recent last).
    pub history: Vec<f64>,
    /// Predicted net consumption for `j = k, ..., k + N - 1`.
    pub forecast: Vec<f64>,
}

/// Condensed per-household problem data over the horizon.
#[derive(Debug, Clone)]
pub struct LocalProblem {
    /// Input cost Hessian `Q_i`, SPD of size `2N x 2N`.
    pub q: DMatrix<f64>,
    /// Demand coupling map `A_i` of size `N x 2N`.
    pub a: DMatrix<f64>,
    /// Condensed constraint matrix, `8N x 2N`.
    pub d_mat: DMatrix<f64>,
    /// Condensed constraint bounds, `8N`.
    pub d_vec: DVector<f64>,
    /// Forecast net consumption over the horizon, `N`.
    pub w: DVector<f64>,
    /// Cost weight, retained for structure-exploiting formulas.
    pub sigma: f64,
    /// Discharging efficiency, retained for structure-exploiting formulas.
    pub gamma: f64,
}

impl LocalProblem {
    pub fn horizon(&self) -> usize {
        self.a.nrows()
    }

    /// Applies `Q_i` without forming a matrix product.
    pub fn q_apply(&self, u: &DVector<f64>) -> DVector<f64> {
        qi_apply(self.sigma, self.gamma, u)
    }

    /// Applies the closed-form inverse of `Q_i`.
    pub fn q_inv_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        qi_inv_apply(self.sigma, self.gamma, x)
    }

    /// Applies `A_i`.
    pub fn a_apply(&self, u: &DVector<f64>) -> DVector<f64> {
        ai_apply(self.gamma, u)
    }

    /// Applies `A_i'`.
    pub fn a_t_apply(&self, y: &DVector<f64>) -> DVector<f64> {
        ai_t_apply(self.gamma, y)
    }

    /// Scalar `s` with `A_i Q_i^{-1} A_i' = s * I`.
    pub fn aqat_scalar(&self) -> f64 {
        aqat_scalar(self.sigma, self.gamma)
    }

    /// Half of `u' Q_i u`.
    pub fn cost(&self, u: &DVector<f64>) -> f64 {
        eval_fi(u, self.sigma, self.gamma)
    }
}

/// The coupled peak-shaving problem over one horizon:
///
/// ```text
/// min  f0(z_bar) + sum_i f_i(u_i)
/// s.t. z_bar = w_bar + sum_i A_i u_i      (dual: lambda)
///      D_i u_i <= d_i                     (dual: kappa_i)
/// ```
#[derive(Debug, Clone)]
pub struct GridProblem {
    pub n_horizon: usize,
    pub t_sample: f64,
    pub sigma0: f64,
    /// Moving-average reference for the aggregate demand, `N`.
    pub zeta: DVector<f64>,
    /// Aggregate forecast `sum_i w_i`, `N`.
    pub w_bar: DVector<f64>,
    pub locals: Vec<LocalProblem>,
}

impl GridProblem {
    pub fn n_agents(&self) -> usize {
        self.locals.len()
    }

    /// Curvature of `f0`: `2 sigma0 / (N I^2)`.
    pub fn f0_curvature(&self) -> f64 {
        let i = self.n_agents() as f64;
        2.0 * self.sigma0 / (self.n_horizon as f64 * i * i)
    }

    pub fn eval_f0(&self, z_bar: &DVector<f64>) -> f64 {
        let i = self.n_agents() as f64;
        let r = z_bar - &self.zeta;
        self.sigma0 / (self.n_horizon as f64 * i * i) * r.norm_squared()
    }

    /// Total objective at a stacked primal point.
    pub fn eval_total(&self, z_bar: &DVector<f64>, u: &[DVector<f64>]) -> f64 {
        let local: f64 = self
            .locals
            .iter()
            .zip(u)
            .map(|(lp, ui)| lp.cost(ui))
            .sum();
        self.eval_f0(z_bar) + local
    }

    /// Aggregate demand implied by the inputs: `w_bar + sum_i A_i u_i`.
    pub fn aggregate_demand(&self, u: &[DVector<f64>]) -> DVector<f64> {
        let mut z = self.w_bar.clone();
        for (lp, ui) in self.locals.iter().zip(u) {
            z += lp.a_apply(ui);
        }
        z
    }

    /// Assembles the coupled problem from per-household data.
    ///
    /// `zeta` comes from [`build_reference`] (or is supplied externally
    /// when the CE publishes a precomputed reference).
    pub fn assemble(
        params: &[HouseholdParams],
        states: &[HouseholdState],
        n_horizon: usize,
        t_sample: f64,
        sigma0: f64,
        zeta: DVector<f64>,
    ) -> Result<Self, ModelError> {
        if n_horizon < 2 {
            return Err(ModelError::HorizonTooShort {
                got: n_horizon,
                min: 2,
            });
        }
        if params.len() != states.len() {
            return Err(ModelError::CountMismatch {
                what: "states",
                got: states.len(),
                expected: params.len(),
            });
        }
        if !(t_sample > 0.0) {
            return Err(ModelError::InvalidParam {
                name: "t_sample",
                value: t_sample,
                requirement: "t_sample > 0",
            });
        }
        if !(sigma0 > 0.0) {
            return Err(ModelError::InvalidParam {
                name: "sigma0",
                value: sigma0,
                requirement: "sigma0 > 0",
            });
        }
        if zeta.len() != n_horizon {
            return Err(ModelError::CountMismatch {
                what: "zeta",
                got: zeta.len(),
                expected: n_horizon,
            });
        }

        let mut locals = Vec::with_capacity(params.len());
        let mut w_bar = DVector::zeros(n_horizon);
        for (idx, (p, st)) in params.iter().zip(states).enumerate() {
            p.validate()?;
            if st.forecast.len() != n_horizon {
                return Err(ModelError::ForecastLength {
                    agent: idx,
                    got: st.forecast.len(),
                    expected: n_horizon,
                });
            }
            if st.forecast.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { what: "forecast" });
            }
            let (d_mat, d_vec) = condense_constraints(p, st.soc, n_horizon, t_sample)?;
            let w = DVector::from_column_slice(&st.forecast);
            w_bar += &w;
            locals.push(LocalProblem {
                q: build_qi(p, n_horizon),
                a: build_ai(p, n_horizon),
                d_mat,
                d_vec,
                w,
                sigma: p.sigma,
                gamma: p.gamma,
            });
        }

        Ok(Self {
            n_horizon,
            t_sample,
            sigma0,
            zeta,
            w_bar,
            locals,
        })
    }
}

/// Eliminates the state-of-charge recursion over `n_horizon` steps and
/// stacks all input constraints into `D u <= d`.
///
/// Row layout: for step `n` in `1..=n_horizon`, the block
/// `8(n-1)..8n` holds (in [`row`] order) the bounds on `x(k+n)` and on
/// the inputs `u(n-1)`; see the module docs for the recursion.
pub fn condense_constraints(
    params: &HouseholdParams,
    soc: f64,
    n_horizon: usize,
    t_sample: f64,
) -> Result<(DMatrix<f64>, DVector<f64>), ModelError> {
    params.validate()?;
    if !soc.is_finite() || soc < 0.0 || soc > params.capacity {
        return Err(ModelError::SocOutOfRange {
            soc,
            capacity: params.capacity,
        });
    }
    if n_horizon == 0 {
        return Err(ModelError::HorizonTooShort {
            got: n_horizon,
            min: 1,
        });
    }

    let n = n_horizon;
    let mut d_mat = DMatrix::zeros(ROWS_PER_STEP * n, 2 * n);
    let mut d_vec = DVector::zeros(ROWS_PER_STEP * n);

    // alpha_pow[m] = alpha^m
    let mut alpha_pow = vec![1.0; n + 1];
    for m in 1..=n {
        alpha_pow[m] = alpha_pow[m - 1] * params.alpha;
    }

    for step in 1..=n {
        let base = ROWS_PER_STEP * (step - 1);
        let col = 2 * (step - 1);

        // x(k+step) = alpha^step x_hat
        //           + T sum_{l=0}^{step-1} alpha^(step-1-l) (beta u_plus(l) + u_minus(l))
        for l in 0..step {
            let scale = t_sample * alpha_pow[step - 1 - l];
            d_mat[(base + row::SOC_HI, 2 * l)] = scale * params.beta;
            d_mat[(base + row::SOC_HI, 2 * l + 1)] = scale;
            d_mat[(base + row::SOC_LO, 2 * l)] = -scale * params.beta;
            d_mat[(base + row::SOC_LO, 2 * l + 1)] = -scale;
        }
        d_vec[base + row::SOC_HI] = params.capacity - alpha_pow[step] * soc;
        d_vec[base + row::SOC_LO] = alpha_pow[step] * soc;

        d_mat[(base + row::CHG_HI, col)] = 1.0;
        d_vec[base + row::CHG_HI] = params.u_max;
        d_mat[(base + row::CHG_LO, col)] = -1.0;

        d_mat[(base + row::DIS_HI, col + 1)] = 1.0;
        d_mat[(base + row::DIS_LO, col + 1)] = -1.0;
        d_vec[base + row::DIS_LO] = -params.u_min;

        d_mat[(base + row::MIX_HI, col)] = 1.0 / params.u_max;
        d_mat[(base + row::MIX_HI, col + 1)] = 1.0 / params.u_min;
        d_vec[base + row::MIX_HI] = 1.0;
        d_mat[(base + row::MIX_LO, col)] = -1.0 / params.u_max;
        d_mat[(base + row::MIX_LO, col + 1)] = -1.0 / params.u_min;
    }

    Ok((d_mat, d_vec))
}

/// Input cost Hessian `Q_i = sigma (I_2N + I_N (x) [[1, g], [g, g^2]])`.
pub fn build_qi(params: &HouseholdParams, n_horizon: usize) -> DMatrix<f64> {
    let g = params.gamma;
    let s = params.sigma;
    let mut q = DMatrix::zeros(2 * n_horizon, 2 * n_horizon);
    for step in 0..n_horizon {
        let b = 2 * step;
        q[(b, b)] = s * 2.0;
        q[(b, b + 1)] = s * g;
        q[(b + 1, b)] = s * g;
        q[(b + 1, b + 1)] = s * (1.0 + g * g);
    }
    q
}

/// Demand coupling `A_i = I_N (x) (1, gamma)`.
pub fn build_ai(params: &HouseholdParams, n_horizon: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n_horizon, 2 * n_horizon);
    for step in 0..n_horizon {
        a[(step, 2 * step)] = 1.0;
        a[(step, 2 * step + 1)] = params.gamma;
    }
    a
}

/// `Q_i u` via the Kronecker block structure.
pub fn qi_apply(sigma: f64, gamma: f64, u: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(u.len());
    for b in (0..u.len()).step_by(2) {
        let (p, m) = (u[b], u[b + 1]);
        out[b] = sigma * (2.0 * p + gamma * m);
        out[b + 1] = sigma * (gamma * p + (1.0 + gamma * gamma) * m);
    }
    out
}

/// `Q_i^{-1} x` via the closed form
/// `Q_i^{-1} = 1/(sigma (2 + g^2)) I_N (x) [[1 + g^2, -g], [-g, 2]]`.
pub fn qi_inv_apply(sigma: f64, gamma: f64, x: &DVector<f64>) -> DVector<f64> {
    let den = sigma * (2.0 + gamma * gamma);
    let mut out = DVector::zeros(x.len());
    for b in (0..x.len()).step_by(2) {
        let (p, m) = (x[b], x[b + 1]);
        out[b] = ((1.0 + gamma * gamma) * p - gamma * m) / den;
        out[b + 1] = (-gamma * p + 2.0 * m) / den;
    }
    out
}

/// `A_i u` without forming the matrix.
pub fn ai_apply(gamma: f64, u: &DVector<f64>) -> DVector<f64> {
    let n = u.len() / 2;
    DVector::from_fn(n, |step, _| u[2 * step] + gamma * u[2 * step + 1])
}

/// `A_i' y` without forming the matrix.
pub fn ai_t_apply(gamma: f64, y: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(2 * y.len());
    for step in 0..y.len() {
        out[2 * step] = y[step];
        out[2 * step + 1] = gamma * y[step];
    }
    out
}

/// Scalar `s` with `A_i Q_i^{-1} A_i' = s I_N`.
pub fn aqat_scalar(sigma: f64, gamma: f64) -> f64 {
    (1.0 + gamma * gamma) / (sigma * (2.0 + gamma * gamma))
}

/// Household input cost `f_i(u) = 1/2 u' Q_i u`.
pub fn eval_fi(u: &DVector<f64>, sigma: f64, gamma: f64) -> f64 {
    0.5 * u.dot(&qi_apply(sigma, gamma, u))
}

/// Moving-average reference for the aggregate demand.
///
/// Given the aggregate net consumption series `aggregate[j]` (absolute
/// time index `j`), the reference over the horizon starting at `k` is
///
/// ```text
/// zeta(n) = 1/N * sum_{j = n-N+1}^{n} aggregate(j),   n = k, ..., k+N-1
/// ```
///
/// which needs samples `k-N+1 ..= k+N-1`; hence `k >= N-1`.
pub fn build_reference(
    aggregate: &[f64],
    k: usize,
    n_horizon: usize,
) -> Result<DVector<f64>, ModelError> {
    let n = n_horizon;
    if n == 0 || k + 1 < n || k + n > aggregate.len() {
        return Err(ModelError::ReferenceWindow {
            k,
            n,
            len: aggregate.len(),
        });
    }
    let mut zeta = DVector::zeros(n);
    for m in 0..n {
        let hi = k + m; // inclusive
        let lo = hi + 1 - n;
        zeta[m] = aggregate[lo..=hi].iter().sum::<f64>() / n as f64;
    }
    Ok(zeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bench_params() -> HouseholdParams {
        HouseholdParams::default()
    }

    #[test]
    fn soc_recursion_single_step() {
        let p = bench_params();
        // x=1, u_plus=0.2: 0.99 * 1 + 0.5 * 0.95 * 0.2 = 1.085
        assert_eq!(p.soc_step(1.0, 0.2, 0.0, 0.5), 1.085);
    }

    #[test]
    fn condensed_soc_row_single_horizon() {
        let p = bench_params();
        let (d, b) = condense_constraints(&p, 1.0, 1, 0.5).unwrap();
        // SoC upper bound: 0.5 * (0.95, 1.0) u <= 2 - 0.99 * 1
        assert!((d[(row::SOC_HI, 0)] - 0.475).abs() < 1e-15);
        assert!((d[(row::SOC_HI, 1)] - 0.5).abs() < 1e-15);
        assert!((b[row::SOC_HI] - 1.01).abs() < 1e-15);
        // and the mirrored lower bound
        assert!((d[(row::SOC_LO, 0)] + 0.475).abs() < 1e-15);
        assert!((b[row::SOC_LO] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn condensed_mix_row() {
        let p = bench_params();
        let (d, b) = condense_constraints(&p, 1.0, 1, 0.5).unwrap();
        assert_eq!(d[(row::MIX_HI, 0)], 2.0);
        assert_eq!(d[(row::MIX_HI, 1)], -2.0);
        assert_eq!(b[row::MIX_HI], 1.0);
        assert_eq!(d[(row::MIX_LO, 0)], -2.0);
        assert_eq!(d[(row::MIX_LO, 1)], 2.0);
        assert_eq!(b[row::MIX_LO], 0.0);
    }

    #[test]
    fn condensed_rows_match_simulated_trajectories() {
        // D u <= d must agree with running the recursion directly on a
        // batch of random inputs: slack of the SoC rows equals the
        // distance of the simulated x to its bounds.
        let p = HouseholdParams {
            alpha: 0.93,
            beta: 0.9,
            gamma: 0.85,
            capacity: 3.0,
            u_min: -0.7,
            u_max: 0.4,
            sigma: 2.0,
        };
        let n = 5;
        let t = 0.25;
        let soc0 = 1.3;
        let (d_mat, d_vec) = condense_constraints(&p, soc0, n, t).unwrap();

        let mut seed = 0x2545f4914f6cdd1d_u64;
        let mut next = || {
            // xorshift, plenty for test inputs in [-1, 1]
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..50 {
            let u = DVector::from_fn(2 * n, |_, _| next());
            let lhs = &d_mat * &u;
            let mut x = soc0;
            for step in 1..=n {
                x = p.soc_step(x, u[2 * (step - 1)], u[2 * (step - 1) + 1], t);
                let base = ROWS_PER_STEP * (step - 1);
                assert!((lhs[base + row::SOC_HI] - (x - alpha_free(&p, soc0, step))).abs() < 1e-12);
                assert!(
                    (d_vec[base + row::SOC_HI] - lhs[base + row::SOC_HI] - (p.capacity - x)).abs()
                        < 1e-12
                );
                assert!((d_vec[base + row::SOC_LO] - lhs[base + row::SOC_LO] - x).abs() < 1e-12);
            }
        }

        fn alpha_free(p: &HouseholdParams, soc0: f64, step: usize) -> f64 {
            p.alpha.powi(step as i32) * soc0
        }
    }

    #[test]
    fn qi_matches_expected_block() {
        let q = build_qi(&bench_params(), 1);
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, 0.95, 0.95, 1.9025]);
        assert!((q - expect).abs().max() < 1e-15);
    }

    #[test]
    fn ai_matches_expected_layout() {
        let a = build_ai(&bench_params(), 2);
        let expect =
            DMatrix::from_row_slice(2, 4, &[1.0, 0.95, 0.0, 0.0, 0.0, 0.0, 1.0, 0.95]);
        assert_eq!(a, expect);
    }

    #[test]
    fn closed_form_q_inverse_matches_dense_inverse() {
        for (sigma, gamma, n) in [(1.0, 0.95, 3), (2.5, 0.3, 1), (0.7, 1.0, 4)] {
            let p = HouseholdParams {
                sigma,
                gamma,
                ..bench_params()
            };
            let q = build_qi(&p, n);
            let q_inv = q.clone().try_inverse().unwrap();
            for col in 0..2 * n {
                let e = DVector::from_fn(2 * n, |r, _| if r == col { 1.0 } else { 0.0 });
                let by_formula = qi_inv_apply(sigma, gamma, &e);
                let reference = q_inv.column(col).clone_owned();
                assert!((by_formula - reference).abs().max() < 1e-14);
            }
        }
    }

    #[test]
    fn aqat_scalar_matches_dense_product() {
        for (sigma, gamma) in [(1.0, 0.95), (3.0, 0.2), (0.5, 1.0)] {
            let p = HouseholdParams {
                sigma,
                gamma,
                ..bench_params()
            };
            let n = 3;
            let a = build_ai(&p, n);
            let q_inv = build_qi(&p, n).try_inverse().unwrap();
            let prod = &a * q_inv * a.transpose();
            let expect = DMatrix::identity(n, n) * aqat_scalar(sigma, gamma);
            assert!((prod - expect).abs().max() < 1e-14);
        }
    }

    #[test]
    fn apply_helpers_match_dense_products() {
        let p = HouseholdParams {
            sigma: 1.7,
            gamma: 0.6,
            ..bench_params()
        };
        let n = 4;
        let q = build_qi(&p, n);
        let a = build_ai(&p, n);
        let u = DVector::from_fn(2 * n, |i, _| (i as f64 * 0.37).sin());
        let y = DVector::from_fn(n, |i, _| (i as f64 * 1.1).cos());
        assert!((qi_apply(p.sigma, p.gamma, &u) - &q * &u).abs().max() < 1e-14);
        assert!((ai_apply(p.gamma, &u) - &a * &u).abs().max() < 1e-14);
        assert!((ai_t_apply(p.gamma, &y) - a.transpose() * &y).abs().max() < 1e-14);
        assert!(
            (eval_fi(&u, p.sigma, p.gamma) - 0.5 * u.dot(&(&q * &u))).abs() < 1e-14
        );
    }

    #[test]
    fn reference_is_trailing_moving_average() {
        // N=2, one household with w = (1, 3, 5) at j = 0, 1, 2 and k = 1:
        // zeta = ((1+3)/2, (3+5)/2) = (2, 4)
        let zeta = build_reference(&[1.0, 3.0, 5.0], 1, 2).unwrap();
        assert_eq!(zeta, DVector::from_column_slice(&[2.0, 4.0]));
    }

    #[test]
    fn reference_matches_double_sum_oracle() {
        let series: Vec<f64> = (0..40).map(|j| (j as f64 * 0.7).sin() * 3.0 + 1.0).collect();
        for (k, n) in [(4, 5), (7, 8), (20, 12)] {
            let zeta = build_reference(&series, k, n).unwrap();
            for m in 0..n {
                let mut acc = 0.0;
                for j in (k + m + 1 - n)..=(k + m) {
                    acc += series[j];
                }
                assert!((zeta[m] - acc / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_rejects_short_series_and_early_start() {
        assert!(matches!(
            build_reference(&[1.0, 2.0, 3.0], 0, 2),
            Err(ModelError::ReferenceWindow { .. })
        ));
        assert!(matches!(
            build_reference(&[1.0, 2.0, 3.0], 2, 2),
            Err(ModelError::ReferenceWindow { .. })
        ));
    }

    #[test]
    fn f0_scaling_at_unit_residual() {
        // 100 households, horizon 24, sigma0 = 2.4e6: unit residual on
        // every entry gives sigma0 / I^2 = 240.
        let params = vec![bench_params(); 100];
        let states: Vec<HouseholdState> = (0..100)
            .map(|_| HouseholdState {
                soc: 1.0,
                history: vec![],
                forecast: vec![0.0; 24],
            })
            .collect();
        let grid = GridProblem::assemble(
            &params,
            &states,
            24,
            0.5,
            2.4e6,
            DVector::zeros(24),
        )
        .unwrap();
        let z = DVector::from_element(24, 1.0);
        assert!((grid.eval_f0(&z) - 240.0).abs() < 1e-9);
    }

    #[test]
    fn assemble_validates_inputs() {
        let p = vec![bench_params(); 2];
        let good = || HouseholdState {
            soc: 1.0,
            history: vec![],
            forecast: vec![0.0; 4],
        };

        let mut bad_soc = vec![good(), good()];
        bad_soc[1].soc = 2.5;
        assert!(matches!(
            GridProblem::assemble(&p, &bad_soc, 4, 0.5, 1.0, DVector::zeros(4)),
            Err(ModelError::SocOutOfRange { .. })
        ));

        let mut bad_forecast = vec![good(), good()];
        bad_forecast[0].forecast.pop();
        assert!(matches!(
            GridProblem::assemble(&p, &bad_forecast, 4, 0.5, 1.0, DVector::zeros(4)),
            Err(ModelError::ForecastLength { agent: 0, .. })
        ));

        assert!(matches!(
            GridProblem::assemble(&p, &[good(), good()], 1, 0.5, 1.0, DVector::zeros(1)),
            Err(ModelError::HorizonTooShort { .. })
        ));

        let bad_param = vec![
            bench_params(),
            HouseholdParams {
                u_min: 0.1,
                ..bench_params()
            },
        ];
        assert!(matches!(
            GridProblem::assemble(&bad_param, &[good(), good()], 4, 0.5, 1.0, DVector::zeros(4)),
            Err(ModelError::InvalidParam { name: "u_min", .. })
        ));
    }

    #[test]
    fn w_bar_is_elementwise_sum() {
        let p = vec![bench_params(); 3];
        let states: Vec<HouseholdState> = (0..3)
            .map(|i| HouseholdState {
                soc: 0.5,
                history: vec![],
                forecast: (0..4).map(|n| (i * 4 + n) as f64).collect(),
            })
            .collect();
        let grid = GridProblem::assemble(&p, &states, 4, 0.5, 1.0, DVector::zeros(4)).unwrap();
        assert_eq!(
            grid.w_bar,
            DVector::from_column_slice(&[12.0, 15.0, 18.0, 21.0])
        );
    }
}
