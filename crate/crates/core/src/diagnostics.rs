//! Retention diagnostics derived from a fitted LSD shape `q`, and trend
//! analysis over consecutive time windows.
//!
//! # Stationary interpretation
//!
//! Take two consecutive periods of equal length in which the aggregate
//! behaviour, and therefore `q`, stays the same while individual users
//! change. Then
//!
//! * *repeat users* use the item in both periods,
//! * *new users* use it in the second period but not in the first,
//! * *lost users* used it in the first period but not in the second.
//!
//! Under the LSD these groups are characterized by `q` alone:
//!
//! | quantity | value |
//! |---|---|
//! | share of repeat users among observed users, `b_R/b` | `ln(1-q²) / ln(1-q)` |
//! | share of usage from repeat users, `m_R/m` | `q` |
//! | mean usage per repeat user, `ω_R` | `-q² / ((1-q) ln(1-q²))` |
//! | mean usage per new or lost user, `ω_N = ω_L` | `q / ln(1+q)` |
//!
//! These satisfy `b_R/b · ω_R = q · ω(q)`: both sides are the repeat users'
//! usage per observed user. For an LSD/OTB fit the LSD component's `q` is
//! used, so shares are relative to the users who are not one-time users.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{fit_model, FitOptions, ModelFit, ModelKind};
use crate::sessionize::{build_sessions, count_frequencies, Period, UsageEvent};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatUsageSummary {
    pub q: f64,
    /// `b_R / b`
    pub repeat_user_share: f64,
    /// `m_R / m`, equal to `q`
    pub repeat_usage_share: f64,
    /// `ω_R`
    pub mean_per_repeat_user: f64,
    /// `ω_L = ω_N`
    pub mean_per_new_or_lost_user: f64,
}

pub fn repeat_usage_summary(q: f64) -> Result<RepeatUsageSummary> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("q must lie in (0, 1), got {q}")));
    }
    let ln_one_minus_q = (-q).ln_1p();
    let ln_one_minus_q2 = (-q * q).ln_1p();
    Ok(RepeatUsageSummary {
        q,
        repeat_user_share: ln_one_minus_q2 / ln_one_minus_q,
        repeat_usage_share: q,
        mean_per_repeat_user: -q * q / ((1.0 - q) * ln_one_minus_q2),
        mean_per_new_or_lost_user: q / q.ln_1p(),
    })
}

/// Ordered, disjoint time windows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    windows: Vec<Period>,
}

impl WindowSpec {
    pub fn new(windows: Vec<Period>) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Config("at least one window is required".into()));
        }
        if let Some(w) = windows.iter().find(|w| w.end <= w.start) {
            return Err(Error::Config(format!("window {} is empty", w.label)));
        }
        if windows.windows(2).any(|p| p[1].start < p[0].end) {
            return Err(Error::Config("windows must be ordered and disjoint".into()));
        }
        Ok(Self { windows })
    }

    /// `n` equal windows starting at `start` that cover `[start, end)`.
    pub fn equal_split(start: i64, end: i64, n: usize) -> Result<Self> {
        if n == 0 || end <= start {
            return Err(Error::Config(format!("cannot split [{start}, {end}) into {n} windows")));
        }
        let n_i = n as i64;
        let len = (end - start + n_i - 1) / n_i;
        Self::new(
            (0..n_i)
                .map(|i| Period::new(format!("W{}", i + 1), start + i * len, start + (i + 1) * len))
                .collect(),
        )
    }

    /// Calendar quarters Q1..Q4 of `year` (UTC).
    pub fn calendar_quarters(year: i32) -> Result<Self> {
        let at = |y: i32, m: u32| -> Result<i64> {
            let date = NaiveDate::from_ymd_opt(y, m, 1)
                .ok_or_else(|| Error::Config(format!("invalid year {y}")))?;
            Ok(Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).expect("midnight")).timestamp())
        };
        let bounds = [at(year, 1)?, at(year, 4)?, at(year, 7)?, at(year, 10)?, at(year + 1, 1)?];
        Self::new(
            (0..4)
                .map(|i| Period::new(format!("Q{}", i + 1), bounds[i], bounds[i + 1]))
                .collect(),
        )
    }

    /// Calendar quarters when `n = 4` and all events fall in one calendar
    /// year, otherwise `n` equal windows over the events' time span.
    pub fn for_events(events: &[UsageEvent], n: usize) -> Result<Self> {
        let (Some(lo), Some(hi)) = (
            events.iter().map(|e| e.timestamp).min(),
            events.iter().map(|e| e.timestamp).max(),
        ) else {
            return Err(Error::Config("no events to derive windows from".into()));
        };
        let year = |t: i64| Utc.timestamp_opt(t, 0).single().map(|d| d.format("%Y").to_string());
        if n == 4 {
            if let (Some(a), Some(b)) = (year(lo), year(hi)) {
                if a == b {
                    if let Ok(y) = a.parse() {
                        return Self::calendar_quarters(y);
                    }
                }
            }
        }
        Self::equal_split(lo, hi + 1, n)
    }

    pub fn windows(&self) -> &[Period] {
        &self.windows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum WindowOutcome {
    Fitted { fit: ModelFit },
    NotEstimable { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedFit {
    pub label: String,
    pub n_users: u64,
    pub outcome: WindowOutcome,
}

impl WindowedFit {
    pub fn fit(&self) -> Option<&ModelFit> {
        match &self.outcome {
            WindowOutcome::Fitted { fit } => Some(fit),
            WindowOutcome::NotEstimable { .. } => None,
        }
    }
}

/// Sessionizes `events` once and fits the LSD/OTB model per item and
/// window. Items that cannot be fitted in a window get a gap marker.
pub fn windowed_fits(
    events: &[UsageEvent],
    spec: &WindowSpec,
    timeout: i64,
    opts: &FitOptions,
) -> BTreeMap<String, Vec<WindowedFit>> {
    let sessions = build_sessions(events, timeout);
    let per_window: Vec<_> = spec
        .windows
        .iter()
        .map(|w| count_frequencies(&sessions, Some(w)))
        .collect();
    let items: BTreeSet<&String> = per_window.iter().flat_map(|t| t.keys()).collect();

    items
        .into_iter()
        .map(|item| {
            let fits = spec
                .windows
                .iter()
                .zip(&per_window)
                .map(|(w, tables)| {
                    let (n_users, outcome) = match tables.get(item) {
                        None => (0, WindowOutcome::NotEstimable {
                            reason: "no users in window".into(),
                        }),
                        Some(t) => (
                            t.n_users(),
                            match fit_model(t, ModelKind::LsdOtb, opts) {
                                Ok(fit) => WindowOutcome::Fitted { fit },
                                Err(e) => WindowOutcome::NotEstimable { reason: e.to_string() },
                            },
                        ),
                    };
                    WindowedFit {
                        label: w.label.clone(),
                        n_users,
                        outcome,
                    }
                })
                .collect();
            (item.clone(), fits)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendThresholds {
    pub q: f64,
    pub pi: f64,
}

impl Default for TrendThresholds {
    fn default() -> Self {
        Self { q: 0.2, pi: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub label: String,
    pub users: u64,
    pub q: Option<f64>,
    pub pi: Option<f64>,
    /// Change from the previous window; absent when either side is a gap.
    pub delta_q: Option<f64>,
    pub delta_pi: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub rows: Vec<TrendRow>,
    /// Some change between consecutive windows exceeded a threshold.
    pub non_stationary: bool,
}

pub fn trend_report(fits: &[WindowedFit], thresholds: TrendThresholds) -> Result<TrendReport> {
    if fits.len() < 2 {
        return Err(Error::Config("trend analysis needs at least two windows".into()));
    }
    let mut rows: Vec<TrendRow> = Vec::with_capacity(fits.len());
    for w in fits {
        let (q, pi) = match w.fit() {
            Some(f) => (Some(f.q()), Some(f.pi())),
            None => (None, None),
        };
        let prev = rows.last();
        let diff = |now: Option<f64>, before: Option<f64>| Some(now? - before?);
        let delta_q = prev.and_then(|p| diff(q, p.q));
        let delta_pi = prev.and_then(|p| diff(pi, p.pi));
        let flagged = delta_q.is_some_and(|d| d.abs() > thresholds.q)
            || delta_pi.is_some_and(|d| d.abs() > thresholds.pi);
        rows.push(TrendRow {
            label: w.label.clone(),
            users: w.n_users,
            q,
            pi,
            delta_q,
            delta_pi,
            flagged,
        });
    }
    let non_stationary = rows.iter().any(|r| r.flagged);
    Ok(TrendReport { rows, non_stationary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{lsd_mean, LsdOtbParams, LsdParams};
    use crate::estimation::{FitMethod, ModelParams};

    #[test]
    fn table_rows_for_low_q() {
        // Rows whose q is far enough from 1 for the printed three decimals.
        let s = repeat_usage_summary(0.717).unwrap();
        assert!((s.mean_per_repeat_user - 2.519).abs() < 0.01);
        assert!((s.repeat_user_share - 0.572).abs() < 0.01);
        assert!((s.repeat_usage_share - 0.717).abs() < 0.01);
        assert!((s.mean_per_new_or_lost_user - 1.327).abs() < 0.01);
        let s = repeat_usage_summary(0.807).unwrap();
        assert!((s.mean_per_repeat_user - 3.205).abs() < 0.01);
        assert!((s.repeat_user_share - 0.640).abs() < 0.01);
        assert!((s.mean_per_new_or_lost_user - 1.364).abs() < 0.01);
    }

    #[test]
    fn formulas_by_direct_arithmetic() {
        let s = repeat_usage_summary(0.916).unwrap();
        let q: f64 = 0.916;
        let share = (1.0 - q * q).ln() / (1.0 - q).ln();
        assert!((s.repeat_user_share - share).abs() < 1e-12);
        assert!((s.mean_per_repeat_user - 5.468_204_118_563_4).abs() < 1e-9);
        assert!((s.mean_per_new_or_lost_user - 1.408_711_324_162_49).abs() < 1e-9);
    }

    #[test]
    fn identity_on_grid() {
        for i in 1..1000 {
            let q = i as f64 / 1000.0;
            let s = repeat_usage_summary(q).unwrap();
            let rhs = q * lsd_mean(LsdParams::new(q).unwrap());
            assert!((s.repeat_user_share * s.mean_per_repeat_user - rhs).abs() < 1e-9 * rhs.max(1.0));
            assert!(s.repeat_user_share > 0.0 && s.repeat_user_share < 1.0);
            assert!(s.mean_per_repeat_user > s.mean_per_new_or_lost_user);
            assert!(s.mean_per_new_or_lost_user > 1.0);
        }
    }

    #[test]
    fn limits() {
        let s = repeat_usage_summary(1e-8).unwrap();
        assert!(s.repeat_user_share < 1e-7);
        assert!((s.mean_per_new_or_lost_user - 1.0).abs() < 1e-7);
        let s = repeat_usage_summary(1.0 - 1e-12).unwrap();
        assert!(s.repeat_user_share > 0.97);
        assert!(repeat_usage_summary(0.0).is_err());
        assert!(repeat_usage_summary(1.0).is_err());
    }

    fn fixed(label: &str, users: u64, q: f64, pi: f64) -> WindowedFit {
        WindowedFit {
            label: label.into(),
            n_users: users,
            outcome: WindowOutcome::Fitted {
                fit: ModelFit {
                    params: ModelParams::LsdOtb(LsdOtbParams::new(q, pi).unwrap()),
                    loglik: -1.0,
                    n_users: users,
                    converged: true,
                    iterations: 1,
                    method: FitMethod::Em,
                    well_conditioned: true,
                },
            },
        }
    }

    #[test]
    fn enrolment_trend_is_flagged_at_fourth_quarter() {
        let fits = [
            fixed("Q1", 67, 0.72, 0.79),
            fixed("Q2", 20, 0.87, 0.91),
            fixed("Q3", 46, 0.70, 0.79),
            fixed("Q4", 27, 0.96, 0.95),
        ];
        let report = trend_report(&fits, TrendThresholds::default()).unwrap();
        let users: Vec<u64> = report.rows.iter().map(|r| r.users).collect();
        assert_eq!(users, [67, 20, 46, 27]);
        assert_eq!(report.rows[3].q, Some(0.96));
        assert_eq!(report.rows[2].pi, Some(0.79));
        assert!((report.rows[3].delta_q.unwrap() - 0.26).abs() < 1e-12);
        let flagged: Vec<bool> = report.rows.iter().map(|r| r.flagged).collect();
        assert_eq!(flagged, [false, false, false, true]);
        assert!(report.non_stationary);
    }

    #[test]
    fn constant_trend_and_errors() {
        let fits = [fixed("a", 10, 0.8, 0.3), fixed("b", 12, 0.8, 0.3)];
        assert!(!trend_report(&fits, TrendThresholds::default()).unwrap().non_stationary);
        assert!(trend_report(&fits[..1], TrendThresholds::default()).is_err());
        let gap = WindowedFit {
            label: "c".into(),
            n_users: 0,
            outcome: WindowOutcome::NotEstimable { reason: "none".into() },
        };
        let r = trend_report(&[fits[0].clone(), gap], TrendThresholds::default()).unwrap();
        assert_eq!(r.rows[1].delta_q, None);
    }

    #[test]
    fn window_specs() {
        let q = WindowSpec::calendar_quarters(2001).unwrap();
        assert_eq!(q.windows()[0].start, 978_307_200);
        assert_eq!(q.windows()[3].end, 1_009_843_200);
        let e = WindowSpec::equal_split(0, 10, 4).unwrap();
        assert!(e.windows().iter().all(|w| w.end - w.start == 3));
        assert!(WindowSpec::equal_split(0, 10, 0).is_err());
        assert!(WindowSpec::new(vec![Period::new("a", 0, 10), Period::new("b", 5, 20)]).is_err());
        let events = [UsageEvent::new(978_400_000, "u", "i"), UsageEvent::new(1_000_000_000, "u", "i")];
        assert_eq!(WindowSpec::for_events(&events, 4).unwrap(), q);
        assert_eq!(WindowSpec::for_events(&events, 3).unwrap().windows().len(), 3);
    }

    #[test]
    fn item_only_in_first_window() {
        let spec = WindowSpec::equal_split(0, 400_000, 4).unwrap();
        let mut events = Vec::new();
        for u in 0..30 {
            for s in 0..(1 + u % 3) {
                events.push(UsageEvent::new(s * 5000, format!("u{u}"), "only-q1"));
            }
        }
        let fits = windowed_fits(&events, &spec, 1200, &FitOptions::default());
        let w = &fits["only-q1"];
        assert_eq!(w.len(), 4);
        assert!(w[0].fit().is_some());
        assert!(w[1..].iter().all(|f| f.fit().is_none() && f.n_users == 0));
    }
}
