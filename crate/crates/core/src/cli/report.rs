//! Per-item fit reports and the portfolio summary built from them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{repeat_usage_summary, RepeatUsageSummary};
use crate::estimation::{fit_model, FitOptions, FrequencyTable, ModelFit, ModelKind};
use crate::gof::chisq_gof;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelStatus {
    /// No estimate of `q` could be made.
    NoQ,
    /// Fitted, but too few cells for a chi-square test.
    NoTest,
    NotSignificant,
    Significant,
}

/// One model's outcome on one item. `q`, `loglik` and the fit details are
/// present unless the status is `no_q`; `chi2`, `df` and `p_value` are
/// present exactly when the status is a verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub status: ModelStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loglik: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub well_conditioned: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}

impl ModelReport {
    fn no_q(reason: String) -> Self {
        Self {
            status: ModelStatus::NoQ,
            reason: Some(reason),
            q: None,
            pi: None,
            loglik: None,
            converged: None,
            well_conditioned: None,
            chi2: None,
            df: None,
            p_value: None,
        }
    }

    fn from_fit(table: &FrequencyTable, fit: &ModelFit, alpha: f64) -> Self {
        let mut report = Self {
            status: ModelStatus::NoTest,
            reason: None,
            q: Some(fit.q()),
            pi: (fit.kind() == ModelKind::LsdOtb).then(|| fit.pi()),
            loglik: Some(fit.loglik),
            converged: Some(fit.converged),
            well_conditioned: Some(fit.well_conditioned),
            chi2: None,
            df: None,
            p_value: None,
        };
        match chisq_gof(table, fit, alpha) {
            Ok(g) => {
                report.status = if g.significant {
                    ModelStatus::Significant
                } else {
                    ModelStatus::NotSignificant
                };
                report.chi2 = Some(g.chi2);
                report.df = Some(g.df);
                report.p_value = Some(g.p_value);
            }
            Err(e) => report.reason = Some(e.to_string()),
        }
        report
    }

    /// Whether the present fields agree with the status.
    pub fn is_consistent(&self) -> bool {
        let has_fit = self.q.is_some() && self.loglik.is_some();
        let has_test = self.chi2.is_some() && self.df.is_some() && self.p_value.is_some();
        let no_test = self.chi2.is_none() && self.df.is_none() && self.p_value.is_none();
        match self.status {
            ModelStatus::NoQ => self.q.is_none() && self.loglik.is_none() && no_test,
            ModelStatus::NoTest => has_fit && no_test,
            ModelStatus::NotSignificant | ModelStatus::Significant => has_fit && has_test,
        }
    }

    pub fn fitted_q(&self) -> Option<f64> {
        self.q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub item_id: String,
    pub period_id: String,
    pub n_users: u64,
    pub n_usages: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lsd: Option<ModelReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lsd_otb: Option<ModelReport>,
    /// Retention summary from the LSD/OTB `q`, or the LSD `q` when only
    /// that model was fitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<RepeatUsageSummary>,
}

impl ItemReport {
    pub fn model(&self, kind: ModelKind) -> Option<&ModelReport> {
        match kind {
            ModelKind::Lsd => self.lsd.as_ref(),
            ModelKind::LsdOtb => self.lsd_otb.as_ref(),
        }
    }
}

fn fit_one(table: &FrequencyTable, kind: ModelKind, opts: &FitOptions, alpha: f64) -> ModelReport {
    match fit_model(table, kind, opts) {
        Ok(fit) => ModelReport::from_fit(table, &fit, alpha),
        Err(e) => ModelReport::no_q(e.to_string()),
    }
}

/// Fits the requested models to one item. Failures become statuses.
pub fn item_report(
    item_id: &str,
    table: &FrequencyTable,
    kinds: &[ModelKind],
    opts: &FitOptions,
    alpha: f64,
) -> ItemReport {
    let mut report = ItemReport {
        item_id: item_id.to_owned(),
        period_id: table.period_id().to_owned(),
        n_users: table.n_users(),
        n_usages: table.n_usages(),
        lsd: None,
        lsd_otb: None,
        diagnostics: None,
    };
    for &kind in kinds {
        let r = fit_one(table, kind, opts, alpha);
        match kind {
            ModelKind::Lsd => report.lsd = Some(r),
            ModelKind::LsdOtb => report.lsd_otb = Some(r),
        }
    }
    let q = report
        .lsd_otb
        .as_ref()
        .and_then(ModelReport::fitted_q)
        .or_else(|| report.lsd.as_ref().and_then(ModelReport::fitted_q));
    report.diagnostics = q.and_then(|q| repeat_usage_summary(q).ok());
    report
}

/// One row of the portfolio summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortfolioRow {
    pub model: String,
    pub items: u64,
    pub no_q: u64,
    pub no_test: u64,
    pub non_significant: u64,
    pub significant: u64,
}

impl PortfolioRow {
    pub fn empty(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            items: 0,
            no_q: 0,
            no_test: 0,
            non_significant: 0,
            significant: 0,
        }
    }

    fn record(&mut self, status: ModelStatus) {
        self.items += 1;
        match status {
            ModelStatus::NoQ => self.no_q += 1,
            ModelStatus::NoTest => self.no_test += 1,
            ModelStatus::NotSignificant => self.non_significant += 1,
            ModelStatus::Significant => self.significant += 1,
        }
    }

    pub fn tested(&self) -> u64 {
        self.non_significant + self.significant
    }

    /// Share of tested items the model fits, in percent.
    pub fn pct_fitting(&self) -> Option<f64> {
        let tested = self.tested();
        (tested > 0).then(|| 100.0 * self.non_significant as f64 / tested as f64)
    }

    pub fn pct_fitting_text(&self) -> String {
        self.pct_fitting()
            .map_or_else(|| "\u{2013}".to_owned(), |p| format!("{p:.2}%"))
    }
}

/// Tallies statuses per model, one row per model in a fixed order.
pub fn portfolio_summary(reports: &[ItemReport]) -> Vec<PortfolioRow> {
    [ModelKind::Lsd, ModelKind::LsdOtb]
        .into_iter()
        .map(|kind| {
            let mut row = PortfolioRow::empty(kind.label());
            for status in reports.iter().filter_map(|r| r.model(kind)).map(|m| m.status) {
                row.record(status);
            }
            row
        })
        .collect()
}

/// Fixed-width text table.
pub fn render_summary(rows: &[PortfolioRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:>7} {:>7} {:>7} {:>15} {:>11} {:>11}",
        "model", "items", "no_q", "no_test", "non_significant", "significant", "pct_fitting"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<8} {:>7} {:>7} {:>7} {:>15} {:>11} {:>11}",
            r.model,
            r.items,
            r.no_q,
            r.no_test,
            r.non_significant,
            r.significant,
            r.pct_fitting_text()
        );
    }
    out
}
