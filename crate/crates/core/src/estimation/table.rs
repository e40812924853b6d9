use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-item usage frequencies for one period: `f_r` is the number of
/// distinct users who used the item in exactly `r` sessions.
///
/// The zero class is never stored and neither are rows with `f_r = 0`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTable", into = "RawTable")]
pub struct FrequencyTable {
    period_id: String,
    counts: BTreeMap<u64, u64>,
}

#[derive(Serialize, Deserialize)]
struct RawTable {
    #[serde(default)]
    period_id: String,
    counts: BTreeMap<u64, u64>,
}

impl TryFrom<RawTable> for FrequencyTable {
    type Error = Error;

    fn try_from(raw: RawTable) -> Result<Self> {
        FrequencyTable::from_counts(raw.period_id, raw.counts)
    }
}

impl From<FrequencyTable> for RawTable {
    fn from(t: FrequencyTable) -> Self {
        RawTable {
            period_id: t.period_id,
            counts: t.counts,
        }
    }
}

impl FrequencyTable {
    pub fn new(period_id: impl Into<String>) -> Self {
        Self {
            period_id: period_id.into(),
            counts: BTreeMap::new(),
        }
    }

    pub fn from_counts<I>(period_id: impl Into<String>, counts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, u64)>,
    {
        let mut table = Self::new(period_id);
        for (r, f) in counts {
            if r == 0 {
                return Err(Error::Domain("frequency tables start at r = 1".into()));
            }
            table.add(r, f);
        }
        Ok(table)
    }

    /// Adds `f` users with exactly `r` usages.
    pub fn add(&mut self, r: u64, f: u64) {
        debug_assert!(r >= 1);
        if f > 0 {
            *self.counts.entry(r).or_insert(0) += f;
        }
    }

    pub fn period_id(&self) -> &str {
        &self.period_id
    }

    pub fn counts(&self) -> &BTreeMap<u64, u64> {
        &self.counts
    }

    pub fn get(&self, r: u64) -> u64 {
        self.counts.get(&r).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn n_users(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn n_usages(&self) -> u64 {
        self.counts.iter().map(|(r, f)| r * f).sum()
    }

    /// Sample mean `ω̂ = n_usages / n_users`.
    pub fn mean(&self) -> f64 {
        self.n_usages() as f64 / self.n_users() as f64
    }

    pub fn max_r(&self) -> Option<u64> {
        self.counts.keys().next_back().copied()
    }

    /// Users with at least two usages.
    pub fn repeat_users(&self) -> u64 {
        self.n_users() - self.get(1)
    }

    /// Every `f_r` multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        Self {
            period_id: self.period_id.clone(),
            counts: self
                .counts
                .iter()
                .filter(|_| factor > 0)
                .map(|(&r, &f)| (r, f * factor))
                .collect(),
        }
    }

    /// Row-wise sum of two tables; keeps this table's period label.
    pub fn merged(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (&r, &f) in &other.counts {
            out.add(r, f);
        }
        out
    }

    /// Only the rows with `r >= min_r`.
    pub fn rows_from(&self, min_r: u64) -> Self {
        Self {
            period_id: self.period_id.clone(),
            counts: self.counts.range(min_r..).map(|(&r, &f)| (r, f)).collect(),
        }
    }
}
