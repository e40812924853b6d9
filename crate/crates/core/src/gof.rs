//! Chi-square goodness of fit for fitted usage models.
//!
//! Cells are `r = 1, 2, ...` followed by one merged right tail. A cell is
//! kept on its own only while its expected count and the expected count of
//! everything after it are both at least [`MIN_EXPECTED`]. The tail's
//! expected count uses the exact tail mass, so expected counts add up to the
//! number of users.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur};

use crate::error::{Error, Result};
use crate::estimation::{FrequencyTable, ModelFit};

pub const MIN_EXPECTED: f64 = 5.0;
pub const MIN_CELLS: usize = 3;
pub const DEFAULT_ALPHA: f64 = 0.05;

/// One cell of the test. `r_max = None` marks the open right tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub r_min: u64,
    pub r_max: Option<u64>,
    pub observed: u64,
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub chi2: f64,
    pub df: u32,
    pub p_value: f64,
    pub alpha: f64,
    pub significant: bool,
    pub bins: Vec<Bin>,
}

/// `P(X <= x)` for a chi-square variable with `df` degrees of freedom.
pub fn chi2_cdf(x: f64, df: u32) -> f64 {
    if x <= 0.0 || df == 0 {
        return 0.0;
    }
    gamma_lr(f64::from(df) / 2.0, x / 2.0)
}

/// Upper tail `P(X > x)`, evaluated directly for accuracy in the far tail.
pub fn chi2_sf(x: f64, df: u32) -> f64 {
    if x <= 0.0 || df == 0 {
        return 1.0;
    }
    gamma_ur(f64::from(df) / 2.0, x / 2.0)
}

/// The p-value of `chi2` at `df` and whether it is significant at `alpha`.
pub fn chi2_verdict(chi2: f64, df: u32, alpha: f64) -> (f64, bool) {
    let p = chi2_sf(chi2, df).clamp(0.0, 1.0);
    (p, p < alpha)
}

/// Tests `fit` against `table`, charging one degree of freedom per fitted
/// parameter.
pub fn chisq_gof(table: &FrequencyTable, fit: &ModelFit, alpha: f64) -> Result<GofResult> {
    let params = fit.params;
    chisq_gof_pmf(
        table,
        |r| params.pmf(r).unwrap_or(0.0),
        fit.kind().n_params(),
        alpha,
    )
}

/// Tests an arbitrary pmf on `r >= 1` against `table`.
pub fn chisq_gof_pmf<F>(
    table: &FrequencyTable,
    pmf: F,
    fitted_params: usize,
    alpha: f64,
) -> Result<GofResult>
where
    F: Fn(u64) -> f64,
{
    let n = table.n_users() as f64;
    let mut bins = Vec::new();
    let mut head = 0.0;
    let mut r = 1u64;
    loop {
        let p = pmf(r);
        let expected = n * p;
        let after = n * (1.0 - head - p);
        if !(expected >= MIN_EXPECTED && after >= MIN_EXPECTED) {
            break;
        }
        bins.push(Bin {
            r_min: r,
            r_max: Some(r),
            observed: table.get(r),
            expected,
        });
        head += p;
        r += 1;
    }
    bins.push(Bin {
        r_min: r,
        r_max: None,
        observed: table.counts().range(r..).map(|(_, f)| f).sum(),
        expected: n * (1.0 - head).max(0.0),
    });

    let cells = bins.len();
    let df = cells as i64 - 1 - fitted_params as i64;
    if cells < MIN_CELLS || df < 1 {
        return Err(Error::NotTestable { cells, df });
    }

    let chi2 = bins
        .iter()
        .map(|b| {
            let d = b.observed as f64 - b.expected;
            d * d / b.expected
        })
        .sum::<f64>();
    let df = df as u32;
    let (p_value, significant) = chi2_verdict(chi2, df, alpha);
    Ok(GofResult {
        chi2,
        df,
        p_value,
        alpha,
        significant,
        bins,
    })
}
