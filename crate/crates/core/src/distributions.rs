//! Probability mass functions and moments for the logarithmic series
//! distribution (LSD), its one-time-buyer extension (LSD/OTB), the negative
//! binomial distribution (NBD) and the zero-truncated NBD.
//!
//! All mass functions are evaluated in log space. The LSD shape `q` is kept
//! inside `[Q_MIN, Q_MAX]` when it enters a logarithm.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Smallest `q` used inside logarithms.
pub const Q_MIN: f64 = 1e-9;
/// Largest `q` used inside logarithms.
pub const Q_MAX: f64 = 1.0 - 1e-9;

/// Mean below which a table carries no repeat-usage signal.
pub const MIN_ESTIMABLE_MEAN: f64 = 1.0 + 1e-9;

const Q_INVERSION_TOL: f64 = 1e-10;
const Q_INVERSION_MAX_ITER: usize = 200;

/// Shape of the logarithmic series distribution, `0 < q < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsdParams {
    q: f64,
}

impl LsdParams {
    pub fn new(q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain(format!("LSD q must lie in (0, 1), got {q}")));
        }
        Ok(Self { q })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    fn q_clamped(&self) -> f64 {
        self.q.clamp(Q_MIN, Q_MAX)
    }

    /// Mean number of usages per observed user, `ω(q)`.
    pub fn mean(&self) -> f64 {
        lsd_mean(*self)
    }
}

/// LSD/OTB mixture: a point mass at `r = 1` with weight `pi` and an LSD with
/// weight `1 - pi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsdOtbParams {
    q: f64,
    pi: f64,
}

impl LsdOtbParams {
    pub fn new(q: f64, pi: f64) -> Result<Self> {
        LsdParams::new(q)?;
        if !(0.0..1.0).contains(&pi) {
            return Err(Error::Domain(format!(
                "one-time-user share pi must lie in [0, 1), got {pi}"
            )));
        }
        Ok(Self { q, pi })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    /// The repeat-usage component.
    pub fn lsd(&self) -> LsdParams {
        LsdParams { q: self.q }
    }
}

impl From<LsdParams> for LsdOtbParams {
    fn from(p: LsdParams) -> Self {
        Self { q: p.q, pi: 0.0 }
    }
}

/// NBD parameterized by the mean `m` and the exponent `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NbdParams {
    m: f64,
    k: f64,
}

impl NbdParams {
    pub fn new(m: f64, k: f64) -> Result<Self> {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::Domain(format!("NBD mean m must be > 0, got {m}")));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::Domain(format!("NBD exponent k must be > 0, got {k}")));
        }
        Ok(Self { m, k })
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// The LSD shape the zero-truncated NBD approaches as `k -> 0`.
    pub fn lsd_limit_q(&self) -> f64 {
        self.m / (self.m + self.k)
    }
}

fn require_positive(r: u64, what: &str) -> Result<()> {
    if r == 0 {
        return Err(Error::Domain(format!("{what} has no mass at r = 0")));
    }
    Ok(())
}

/// `ln P_LSD(R = r) = r ln q - ln r - ln(-ln(1 - q))`.
pub fn lsd_ln_pmf(params: LsdParams, r: u64) -> Result<f64> {
    require_positive(r, "the LSD")?;
    let q = params.q_clamped();
    let rf = r as f64;
    Ok(rf * q.ln() - rf.ln() - (-(-q).ln_1p()).ln())
}

pub fn lsd_pmf(params: LsdParams, r: u64) -> Result<f64> {
    lsd_ln_pmf(params, r).map(f64::exp)
}

/// `P(R >= r)` for the LSD, computed as `1 - sum_{j < r} pmf(j)`.
pub fn lsd_tail(params: LsdParams, r: u64) -> f64 {
    let mut head = 0.0;
    for j in 1..r {
        head += lsd_pmf(params, j).unwrap_or(0.0);
    }
    (1.0 - head).max(0.0)
}

/// `ω = -q / ((1 - q) ln(1 - q))`.
pub fn lsd_mean(params: LsdParams) -> f64 {
    let q = params.q_clamped();
    -q / ((1.0 - q) * (-q).ln_1p())
}

/// `E[R^2] = ω / (1 - q)` for the LSD.
pub fn lsd_second_moment(params: LsdParams) -> f64 {
    lsd_mean(params) / (1.0 - params.q_clamped())
}

/// Inverts `ω(q)` by a safeguarded secant/bisection iteration on
/// `[Q_MIN, Q_MAX]`.
pub fn lsd_q_from_mean(omega: f64) -> Result<LsdParams> {
    if !omega.is_finite() || omega <= MIN_ESTIMABLE_MEAN {
        return Err(Error::NotEstimable(format!(
            "mean usage {omega} shows no repeat usage"
        )));
    }
    let f = |q: f64| lsd_mean(LsdParams { q }) - omega;

    let (mut lo, mut hi) = (Q_MIN, Q_MAX);
    let (mut f_lo, mut f_hi) = (f(lo), f(hi));
    if f_lo >= 0.0 {
        return Ok(LsdParams { q: lo });
    }
    if f_hi <= 0.0 {
        return Ok(LsdParams { q: hi });
    }

    let mut best = if -f_lo < f_hi { lo } else { hi };
    for _ in 0..Q_INVERSION_MAX_ITER {
        let width = hi - lo;
        // Secant on the bracket, falling back to bisection when the step
        // lands near an end point.
        let mut x = lo - f_lo * width / (f_hi - f_lo);
        if !(x > lo + 0.01 * width && x < hi - 0.01 * width) {
            x = 0.5 * (lo + hi);
        }
        let fx = f(x);
        best = x;
        if fx.abs() <= Q_INVERSION_TOL {
            break;
        }
        if fx < 0.0 {
            lo = x;
            f_lo = fx;
        } else {
            hi = x;
            f_hi = fx;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    Ok(LsdParams { q: best })
}

pub fn lsd_otb_ln_pmf(params: LsdOtbParams, r: u64) -> Result<f64> {
    require_positive(r, "the LSD/OTB model")?;
    let lsd = lsd_ln_pmf(params.lsd(), r)?;
    if params.pi == 0.0 {
        return Ok(lsd);
    }
    if r == 1 {
        Ok((params.pi + (1.0 - params.pi) * lsd.exp()).ln())
    } else {
        Ok((-params.pi).ln_1p() + lsd)
    }
}

/// `π δ_{r,1} + (1 - π) P_LSD(r)`.
pub fn lsd_otb_pmf(params: LsdOtbParams, r: u64) -> Result<f64> {
    require_positive(r, "the LSD/OTB model")?;
    let lsd = lsd_pmf(params.lsd(), r)?;
    if params.pi == 0.0 {
        return Ok(lsd);
    }
    let one_time = if r == 1 { params.pi } else { 0.0 };
    Ok(one_time + (1.0 - params.pi) * lsd)
}

/// `P(R >= r)` under the LSD/OTB model.
pub fn lsd_otb_tail(params: LsdOtbParams, r: u64) -> f64 {
    if r <= 1 {
        return 1.0;
    }
    (1.0 - params.pi) * lsd_tail(params.lsd(), r)
}

/// Mean and variance of the LSD/OTB model.
///
/// The variance is evaluated in the expanded form
/// `(1-π)ω/(1-q) + π(1-π)(1-2ω) - (1-π)²ω²`, which is algebraically equal to
/// the usual expression with its `(1-π)/π` factor and stays finite at `π = 0`.
pub fn lsd_otb_moments(params: LsdOtbParams) -> (f64, f64) {
    let pi = params.pi;
    let omega = lsd_mean(params.lsd());
    let second = lsd_second_moment(params.lsd());
    let mean = pi + (1.0 - pi) * omega;
    let variance =
        (1.0 - pi) * second + pi * (1.0 - pi) * (1.0 - 2.0 * omega) - (1.0 - pi).powi(2) * omega.powi(2);
    (mean, variance)
}

pub fn nbd_ln_pmf(params: NbdParams, r: u64) -> f64 {
    let NbdParams { m, k } = params;
    let rf = r as f64;
    let ln_zero = -k * (m / k).ln_1p();
    if r == 0 {
        return ln_zero;
    }
    ln_zero + ln_gamma(k + rf) - ln_gamma(rf + 1.0) - ln_gamma(k) + rf * (m / (m + k)).ln()
}

pub fn nbd_pmf(params: NbdParams, r: u64) -> f64 {
    nbd_ln_pmf(params, r).exp()
}

/// Penetration `b = 1 - P(R = 0)` and the mean per buyer `ω = m / b`.
pub fn nbd_summary(params: NbdParams) -> (f64, f64) {
    let b = -(-params.k * (params.m / params.k).ln_1p()).exp_m1();
    (b, params.m / b)
}

/// `P_NBD(r) / (1 - P_NBD(0))` for `r >= 1`.
pub fn zt_nbd_pmf(params: NbdParams, r: u64) -> Result<f64> {
    require_positive(r, "the zero-truncated NBD")?;
    let (b, _) = nbd_summary(params);
    if !b.is_finite() || b <= 0.0 {
        return Err(Error::Numeric(format!(
            "NBD penetration underflows for m = {}, k = {}",
            params.m, params.k
        )));
    }
    Ok((nbd_ln_pmf(params, r) - b.ln()).exp())
}
