//! Maximum-likelihood fitting of the LSD and LSD/OTB models to frequency
//! tables.
//!
//! * [`fit_lsd`] matches the sample mean, which is the LSD maximum
//!   likelihood estimate.
//! * [`fit_lsd_otb_em`] treats the split of the `r = 1` users into one-time
//!   users and LSD users as missing data.
//! * [`fit_lsd_otb_direct`] maximizes the log-likelihood with Nelder-Mead
//!   over `(logit q, logit π)` and serves as a cross-check for EM.

mod simplex;
mod table;

use serde::{Deserialize, Serialize};

pub use table::FrequencyTable;

use crate::distributions::{
    lsd_ln_pmf, lsd_otb_ln_pmf, lsd_otb_pmf, lsd_otb_tail, lsd_pmf, lsd_q_from_mean, lsd_tail,
    LsdOtbParams, LsdParams, Q_MAX, Q_MIN,
};
use crate::error::{Error, Result};

/// Items need more than ten observed users to be fitted.
pub const DEFAULT_MIN_USERS: u64 = 11;

/// Below this one-time-user share the plain LSD describes the data.
pub const PI_BOUNDARY: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lsd,
    LsdOtb,
}

impl ModelKind {
    /// Number of parameters estimated from the data.
    pub fn n_params(self) -> usize {
        match self {
            ModelKind::Lsd => 1,
            ModelKind::LsdOtb => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Lsd => "LSD",
            ModelKind::LsdOtb => "LSD/OTB",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    MeanMatch,
    Em,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Lsd(LsdParams),
    LsdOtb(LsdOtbParams),
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Lsd(_) => ModelKind::Lsd,
            ModelParams::LsdOtb(_) => ModelKind::LsdOtb,
        }
    }

    pub fn q(&self) -> f64 {
        match self {
            ModelParams::Lsd(p) => p.q(),
            ModelParams::LsdOtb(p) => p.q(),
        }
    }

    /// One-time-user share; zero for the plain LSD.
    pub fn pi(&self) -> f64 {
        match self {
            ModelParams::Lsd(_) => 0.0,
            ModelParams::LsdOtb(p) => p.pi(),
        }
    }

    pub fn pmf(&self, r: u64) -> Result<f64> {
        match self {
            ModelParams::Lsd(p) => lsd_pmf(*p, r),
            ModelParams::LsdOtb(p) => lsd_otb_pmf(*p, r),
        }
    }

    pub fn ln_pmf(&self, r: u64) -> Result<f64> {
        match self {
            ModelParams::Lsd(p) => lsd_ln_pmf(*p, r),
            ModelParams::LsdOtb(p) => lsd_otb_ln_pmf(*p, r),
        }
    }

    /// `P(R >= r)`.
    pub fn tail(&self, r: u64) -> f64 {
        match self {
            ModelParams::Lsd(p) => lsd_tail(*p, r),
            ModelParams::LsdOtb(p) => lsd_otb_tail(*p, r),
        }
    }
}

/// Result of fitting one model to one table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub params: ModelParams,
    pub loglik: f64,
    pub n_users: u64,
    pub converged: bool,
    pub iterations: usize,
    pub method: FitMethod,
    /// False when the optimum sits on the edge of the parameter space or the
    /// iteration did not converge.
    pub well_conditioned: bool,
}

impl ModelFit {
    pub fn kind(&self) -> ModelKind {
        self.params.kind()
    }

    pub fn q(&self) -> f64 {
        self.params.q()
    }

    pub fn pi(&self) -> f64 {
        self.params.pi()
    }

    /// The one-time-user share is indistinguishable from zero.
    pub fn lsd_suffices(&self) -> bool {
        self.pi() < PI_BOUNDARY
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Tables with fewer observed users are not estimable.
    pub min_users: u64,
    /// EM stops once the log-likelihood gain per user falls below this.
    pub em_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            min_users: DEFAULT_MIN_USERS,
            em_tolerance: 1e-12,
            max_iterations: 1000,
        }
    }
}

impl FitOptions {
    /// Defaults without the minimum-users gate.
    pub fn ungated() -> Self {
        Self {
            min_users: 1,
            ..Self::default()
        }
    }
}

fn check_users(table: &FrequencyTable, opts: &FitOptions) -> Result<u64> {
    let n = table.n_users();
    if n == 0 {
        return Err(Error::NotEstimable("table has no users".into()));
    }
    if n < opts.min_users {
        return Err(Error::NotEstimable(format!(
            "{n} user(s), at least {} required",
            opts.min_users
        )));
    }
    Ok(n)
}

fn check_repeat_mass(table: &FrequencyTable) -> Result<()> {
    if table.repeat_users() == 0 {
        return Err(Error::NotEstimable(
            "no user with two or more usages; q and pi are not identifiable".into(),
        ));
    }
    Ok(())
}

/// `Σ f_r ln P(r)` under either model.
pub fn loglik(table: &FrequencyTable, params: &ModelParams) -> Result<f64> {
    if table.n_users() == 0 {
        return Err(Error::NotEstimable("table has no users".into()));
    }
    let mut ll = 0.0;
    for (&r, &f) in table.counts() {
        let term = params.ln_pmf(r)?;
        if !term.is_finite() {
            return Err(Error::Numeric(format!("probability of r = {r} underflows")));
        }
        ll += f as f64 * term;
    }
    Ok(ll)
}

pub fn loglik_lsd_otb(table: &FrequencyTable, params: LsdOtbParams) -> Result<f64> {
    loglik(table, &ModelParams::LsdOtb(params))
}

pub fn loglik_lsd(table: &FrequencyTable, params: LsdParams) -> Result<f64> {
    loglik(table, &ModelParams::Lsd(params))
}

fn q_interior(q: f64) -> bool {
    q > 1e3 * Q_MIN && q < 1.0 - 1e-6
}

/// LSD maximum likelihood by matching the sample mean. No minimum-users gate.
pub fn fit_lsd(table: &FrequencyTable) -> Result<ModelFit> {
    fit_lsd_with(table, &FitOptions::ungated())
}

pub fn fit_lsd_with(table: &FrequencyTable, opts: &FitOptions) -> Result<ModelFit> {
    let n = check_users(table, opts)?;
    let params = lsd_q_from_mean(table.mean())?;
    let loglik = loglik_lsd(table, params)?;
    Ok(ModelFit {
        params: ModelParams::Lsd(params),
        loglik,
        n_users: n,
        converged: true,
        iterations: 0,
        method: FitMethod::MeanMatch,
        well_conditioned: q_interior(params.q()),
    })
}

/// Starting point shared by EM and direct maximization.
fn starting_point(table: &FrequencyTable) -> Result<(f64, f64)> {
    let n = table.n_users() as f64;
    let f1 = table.get(1) as f64;
    let q0 = lsd_q_from_mean(table.rows_from(2).mean())?.q();
    let excess = match lsd_q_from_mean(table.mean()) {
        Ok(lsd) => f1 / n - lsd_pmf(lsd, 1)?,
        Err(_) => 0.0,
    };
    Ok((q0, excess.clamp(0.05, 0.95)))
}

/// LSD/OTB fit by EM with the default options and no minimum-users gate.
pub fn fit_lsd_otb_em(table: &FrequencyTable) -> Result<ModelFit> {
    fit_lsd_otb_em_with(table, &FitOptions::ungated()).map(|(fit, _)| fit)
}

/// LSD/OTB fit by EM. Also returns the log-likelihood after every
/// iteration, starting with the value at the initial point.
///
/// E-step: the posterior probability that an `r = 1` user is a one-time
/// user, `τ = π / (π + (1-π) P_LSD(1))`. M-step: `π' = τ f₁ / n` and `q'`
/// matches the mean of the users attributed to the LSD component.
pub fn fit_lsd_otb_em_with(
    table: &FrequencyTable,
    opts: &FitOptions,
) -> Result<(ModelFit, Vec<f64>)> {
    let n_users = check_users(table, opts)?;
    check_repeat_mass(table)?;

    let n = n_users as f64;
    let f1 = table.get(1) as f64;
    let repeat_users = table.repeat_users() as f64;
    let repeat_usages = (table.n_usages() - table.get(1)) as f64;

    let (mut q, mut pi) = starting_point(table)?;
    if f1 == 0.0 {
        pi = 0.0;
    }
    let mut params = LsdOtbParams::new(q, pi)?;
    let mut ll = loglik_lsd_otb(table, params)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let p1 = lsd_pmf(params.lsd(), 1)?;
        let tau = if pi > 0.0 { pi / (pi + (1.0 - pi) * p1) } else { 0.0 };
        pi = tau * f1 / n;
        let lsd_ones = f1 - tau * f1;
        let lsd_mean = (repeat_usages + lsd_ones) / (repeat_users + lsd_ones);
        q = lsd_q_from_mean(lsd_mean)?.q();

        params = LsdOtbParams::new(q, pi)?;
        let next = loglik_lsd_otb(table, params)?;
        let slack = 1e-10_f64.max(1e-13 * ll.abs());
        if next < ll - slack {
            return Err(Error::Numeric(format!(
                "EM log-likelihood decreased from {ll} to {next} at iteration {iterations}"
            )));
        }
        trace.push(next);
        let gain = (next - ll).abs();
        ll = next;
        if gain < opts.em_tolerance * n {
            converged = true;
            break;
        }
    }

    let fit = ModelFit {
        params: ModelParams::LsdOtb(params),
        loglik: ll,
        n_users,
        converged,
        iterations,
        method: FitMethod::Em,
        well_conditioned: converged && interior(q, pi),
    };
    let fit = prefer_boundary(table, fit)?;
    if let Some(&last) = trace.last() {
        if fit.loglik > last {
            trace.push(fit.loglik);
        }
    }
    Ok((fit, trace))
}

fn interior(q: f64, pi: f64) -> bool {
    q_interior(q) && pi > PI_BOUNDARY && pi < 1.0 - PI_BOUNDARY
}

/// Compares an LSD/OTB fit with the `π = 0` edge of the parameter space.
///
/// At the edge the likelihood is the LSD likelihood, maximized by mean
/// matching. The edge is the constrained optimum when raising `π` from zero
/// does not increase the likelihood there: `f₁ ≤ n P_LSD(1 | q̂)`. Iterative
/// fits only approach this edge sublinearly, so it is checked explicitly.
fn prefer_boundary(table: &FrequencyTable, fit: ModelFit) -> Result<ModelFit> {
    let lsd = lsd_q_from_mean(table.mean())?;
    let edge = LsdOtbParams::from(lsd);
    let edge_ll = loglik_lsd_otb(table, edge)?;
    if edge_ll <= fit.loglik {
        return Ok(fit);
    }
    let n = table.n_users() as f64;
    let stationary = table.get(1) as f64 <= n * lsd_pmf(lsd, 1)? * (1.0 + 1e-12);
    Ok(ModelFit {
        params: ModelParams::LsdOtb(edge),
        loglik: edge_ll,
        converged: fit.converged || stationary,
        well_conditioned: false,
        ..fit
    })
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const MAX_PI: f64 = 1.0 - 1e-12;

fn unpack(x: [f64; 2]) -> (f64, f64) {
    (sigmoid(x[0]).clamp(Q_MIN, Q_MAX), sigmoid(x[1]).min(MAX_PI))
}

/// LSD/OTB fit by direct Nelder-Mead maximization, no minimum-users gate.
pub fn fit_lsd_otb_direct(table: &FrequencyTable) -> Result<ModelFit> {
    fit_lsd_otb_direct_with(table, &FitOptions::ungated())
}

pub fn fit_lsd_otb_direct_with(table: &FrequencyTable, opts: &FitOptions) -> Result<ModelFit> {
    let n_users = check_users(table, opts)?;
    check_repeat_mass(table)?;
    let n = n_users as f64;

    let (q0, pi0) = starting_point(table)?;
    let objective = |x: [f64; 2]| {
        let (q, pi) = unpack(x);
        match LsdOtbParams::new(q, pi).and_then(|p| loglik_lsd_otb(table, p)) {
            Ok(ll) => -ll / n,
            Err(_) => f64::INFINITY,
        }
    };
    let settings = simplex::Settings {
        max_iter: 4 * opts.max_iterations,
        f_tol: 1e-15,
        x_tol: 1e-9,
        initial_step: 0.5,
    };

    let mut start = [logit(q0), logit(pi0)];
    let mut iterations = 0;
    let mut best = None;
    // A restart from the reported optimum guards against a collapsed simplex.
    for _ in 0..2 {
        let m = simplex::minimize(objective, start, &settings);
        iterations += m.iterations;
        start = m.point;
        if best.as_ref().is_none_or(|b: &simplex::Minimum| m.value <= b.value) {
            best = Some(m);
        }
    }
    let best = best.expect("at least one pass");

    let (q, mut pi) = unpack(best.point);
    if pi < 1e-12 {
        pi = 0.0;
    }
    let params = LsdOtbParams::new(q, pi)?;
    let loglik = loglik_lsd_otb(table, params)?;
    prefer_boundary(
        table,
        ModelFit {
            params: ModelParams::LsdOtb(params),
            loglik,
            n_users,
            converged: best.converged,
            iterations,
            method: FitMethod::Direct,
            well_conditioned: best.converged && interior(q, pi),
        },
    )
}

/// Fits the requested model with the default method for it (mean matching
/// for the LSD, EM for the LSD/OTB model).
pub fn fit_model(table: &FrequencyTable, kind: ModelKind, opts: &FitOptions) -> Result<ModelFit> {
    match kind {
        ModelKind::Lsd => fit_lsd_with(table, opts),
        ModelKind::LsdOtb => fit_lsd_otb_em_with(table, opts).map(|(fit, _)| fit),
    }
}
