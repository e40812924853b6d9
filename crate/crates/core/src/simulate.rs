//! Seeded synthetic usage data.
//!
//! Two generators are available:
//!
//! * [`PopulationSpec`]: every potential user has a Poisson usage rate drawn
//!   from a Gamma distribution (shape `k`, mean `m`), so counts follow the
//!   NBD. Zero counts are unobservable and dropped. One-time users are added
//!   so that each observed user is one with probability `π`.
//! * [`sample_lsd_otb`]: draws observed users straight from the LSD/OTB
//!   model.
//!
//! All randomness comes from ChaCha8 streams derived from the seed, so equal
//! seeds give equal output.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::distributions::LsdOtbParams;
use crate::error::{Error, Result};
use crate::estimation::FrequencyTable;
use crate::sessionize::{UsageEvent, DEFAULT_TIMEOUT_SECS};

const COUNT_STREAM: u64 = 0;
const TIME_STREAM: u64 = 1;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    /// Potential users, including those who end up with zero usages.
    pub n_users: u64,
    /// The NBD exponent `k`.
    pub gamma_shape: f64,
    /// Mean usages per user and period, the NBD `m`.
    pub mean_rate: f64,
    /// Probability that an observed user is a one-time user.
    pub otb_fraction: f64,
    pub period_length: i64,
    pub seed: u64,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(Error::Domain("population needs at least one user".into()));
        }
        if !(self.gamma_shape > 0.0 && self.gamma_shape.is_finite()) {
            return Err(Error::Domain(format!("gamma shape must be > 0, got {}", self.gamma_shape)));
        }
        if !(self.mean_rate > 0.0 && self.mean_rate.is_finite()) {
            return Err(Error::Domain(format!("mean rate must be > 0, got {}", self.mean_rate)));
        }
        if !(0.0..1.0).contains(&self.otb_fraction) {
            return Err(Error::Domain(format!(
                "one-time-user fraction must lie in [0, 1), got {}",
                self.otb_fraction
            )));
        }
        Ok(())
    }
}

/// Logarithmic series variates by Kemp's LK algorithm.
#[derive(Debug, Clone, Copy)]
pub struct LogSeries {
    q: f64,
    ln_one_minus_q: f64,
}

impl LogSeries {
    pub fn new(q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain(format!("LSD q must lie in (0, 1), got {q}")));
        }
        Ok(Self {
            q,
            ln_one_minus_q: (-q).ln_1p(),
        })
    }
}

impl Distribution<u64> for LogSeries {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        loop {
            let v: f64 = rng.random();
            if v >= self.q {
                return 1;
            }
            let u: f64 = rng.random();
            let h = -(self.ln_one_minus_q * u).exp_m1();
            if v <= h * h {
                let r = (1.0 + v.ln() / h.ln()).floor();
                if r < 1.0 || v == 0.0 || !r.is_finite() {
                    continue;
                }
                return r as u64;
            }
            return if v > h { 1 } else { 2 };
        }
    }
}

/// Per observed user usage counts from the Gamma-Poisson population.
fn population_counts(spec: &PopulationSpec) -> Result<Vec<u64>> {
    spec.validate()?;
    let mut rng = rng(spec.seed, COUNT_STREAM);
    let rates = Gamma::new(spec.gamma_shape, spec.mean_rate / spec.gamma_shape)
        .map_err(|e| Error::Domain(e.to_string()))?;

    let mut counts = Vec::new();
    for _ in 0..spec.n_users {
        let mu: f64 = rates.sample(&mut rng);
        if mu > 0.0 && mu.is_finite() {
            let r: f64 = Poisson::new(mu)
                .map_err(|e| Error::Numeric(e.to_string()))?
                .sample(&mut rng);
            if r >= 1.0 {
                counts.push(r as u64);
            }
        }
    }

    // Each observed user is a one-time user with probability π, so the
    // number of them beside `n` repeat-process users is negative binomial,
    // drawn here as a Gamma-Poisson mixture.
    let pi = spec.otb_fraction;
    if pi > 0.0 && !counts.is_empty() {
        let lambda: f64 = Gamma::new(counts.len() as f64, pi / (1.0 - pi))
            .map_err(|e| Error::Domain(e.to_string()))?
            .sample(&mut rng);
        if lambda > 0.0 {
            let extra: f64 = Poisson::new(lambda)
                .map_err(|e| Error::Numeric(e.to_string()))?
                .sample(&mut rng);
            counts.extend(std::iter::repeat_n(1, extra as usize));
        }
    }
    Ok(counts)
}

fn table_from_counts(counts: &[u64], period_id: &str) -> FrequencyTable {
    let mut table = FrequencyTable::new(period_id);
    for &r in counts {
        table.add(r, 1);
    }
    table
}

/// Frequency table of the observed (non-zero) users of a Gamma-Poisson
/// population.
pub fn sample_counts(spec: &PopulationSpec) -> Result<FrequencyTable> {
    Ok(table_from_counts(&population_counts(spec)?, "simulated"))
}

fn lsd_otb_counts(params: LsdOtbParams, n_users: u64, seed: u64) -> Result<Vec<u64>> {
    let mut rng = rng(seed, COUNT_STREAM);
    let lsd = LogSeries::new(params.q())?;
    Ok((0..n_users)
        .map(|_| {
            if rng.random::<f64>() < params.pi() {
                1
            } else {
                lsd.sample(&mut rng)
            }
        })
        .collect())
}

/// `n_users` observed users drawn from the LSD/OTB model.
pub fn sample_lsd_otb(params: LsdOtbParams, n_users: u64, seed: u64) -> Result<FrequencyTable> {
    Ok(table_from_counts(&lsd_otb_counts(params, n_users, seed)?, "simulated"))
}

/// Places each user's usages in distinct sessions inside `[start, end)`.
///
/// The range is cut into slots of twice the session timeout; a user's `r`
/// usages go to `r` distinct slots at a random offset below the timeout, so
/// consecutive usages of one user are always more than a timeout apart.
/// Users with more usages than there are slots get one usage per slot.
pub fn events_from_counts(
    counts: &[u64],
    item_id: &str,
    start: i64,
    end: i64,
    timeout: i64,
    seed: u64,
) -> Vec<UsageEvent> {
    let timeout = timeout.max(1);
    let slot = 2 * timeout;
    let n_slots = if end > start { ((end - start) / slot) as usize } else { 0 };
    if n_slots == 0 {
        return Vec::new();
    }
    let mut rng = rng(seed, TIME_STREAM);
    let mut events = Vec::new();
    for (user, &r) in counts.iter().enumerate() {
        let user_key = format!("{item_id}-u{user}");
        let amount = (r as usize).min(n_slots);
        for s in index::sample(&mut rng, n_slots, amount) {
            let offset = rng.random_range(0..timeout);
            events.push(UsageEvent::new(
                start + s as i64 * slot + offset,
                user_key.clone(),
                item_id,
            ));
        }
    }
    events.sort();
    events
}

/// Event log whose sessionized frequency table equals
/// [`sample_counts`]`(spec)` for the same seed.
pub fn sample_events(spec: &PopulationSpec, item_id: &str, start: i64, end: i64) -> Result<Vec<UsageEvent>> {
    let counts = population_counts(spec)?;
    Ok(events_from_counts(&counts, item_id, start, end, DEFAULT_TIMEOUT_SECS, spec.seed))
}

/// Event log for `n_users` observed users drawn from the LSD/OTB model.
pub fn sample_lsd_otb_events(
    params: LsdOtbParams,
    n_users: u64,
    seed: u64,
    item_id: &str,
    start: i64,
    end: i64,
) -> Result<Vec<UsageEvent>> {
    let counts = lsd_otb_counts(params, n_users, seed)?;
    Ok(events_from_counts(&counts, item_id, start, end, DEFAULT_TIMEOUT_SECS, seed))
}

/// How one simulated item generates its users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Gamma-Poisson population with one-time users.
    Population {
        n_users: u64,
        gamma_shape: f64,
        mean_rate: f64,
        #[serde(default)]
        otb_fraction: f64,
    },
    /// Observed users drawn directly from the LSD/OTB model.
    LsdOtb {
        q: f64,
        #[serde(default)]
        pi: f64,
        n_users: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub item_id: String,
    pub generator: Generator,
    /// Defaults to the simulation seed mixed with the item's position.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Input of `repeat-usage simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub seed: u64,
    /// Start of the simulated period, epoch seconds.
    pub start: i64,
    pub period_secs: i64,
    pub items: Vec<ItemSpec>,
}

fn item_seed(base: u64, position: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ (position as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SimulationSpec {
    fn item_counts(&self) -> Result<Vec<(&ItemSpec, u64, Vec<u64>)>> {
        if self.period_secs <= 0 {
            return Err(Error::Config("period_secs must be positive".into()));
        }
        self.items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let seed = item.seed.unwrap_or_else(|| item_seed(self.seed, i));
                let counts = match item.generator {
                    Generator::Population {
                        n_users,
                        gamma_shape,
                        mean_rate,
                        otb_fraction,
                    } => population_counts(&PopulationSpec {
                        n_users,
                        gamma_shape,
                        mean_rate,
                        otb_fraction,
                        period_length: self.period_secs,
                        seed,
                    })?,
                    Generator::LsdOtb { q, pi, n_users } => {
                        lsd_otb_counts(LsdOtbParams::new(q, pi)?, n_users, seed)?
                    }
                };
                Ok((item, seed, counts))
            })
            .collect()
    }

    /// Frequency tables keyed by item id.
    pub fn tables(&self) -> Result<BTreeMap<String, FrequencyTable>> {
        Ok(self
            .item_counts()?
            .into_iter()
            .map(|(item, _, counts)| (item.item_id.clone(), table_from_counts(&counts, "simulated")))
            .collect())
    }

    /// A time-ordered event log for all items.
    pub fn events(&self) -> Result<Vec<UsageEvent>> {
        let end = self.start + self.period_secs;
        let mut events: Vec<UsageEvent> = self
            .item_counts()?
            .into_iter()
            .flat_map(|(item, seed, counts)| {
                events_from_counts(&counts, &item.item_id, self.start, end, DEFAULT_TIMEOUT_SECS, seed)
            })
            .collect();
        events.sort();
        Ok(events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{lsd_mean, lsd_pmf, nbd_summary, LsdParams, NbdParams};
    use crate::gof::chisq_gof_pmf;
    use crate::sessionize::{build_sessions, count_frequencies};

    fn spec(n_users: u64, k: f64, m: f64, pi: f64, seed: u64) -> PopulationSpec {
        PopulationSpec {
            n_users,
            gamma_shape: k,
            mean_rate: m,
            otb_fraction: pi,
            period_length: 365 * 86_400,
            seed,
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let s = spec(5000, 0.5, 1.0, 0.2, 42);
        assert_eq!(sample_counts(&s).unwrap(), sample_counts(&s).unwrap());
        let other = PopulationSpec { seed: 43, ..s };
        assert_ne!(sample_counts(&s).unwrap(), sample_counts(&other).unwrap());
        let p = LsdOtbParams::new(0.8, 0.3).unwrap();
        assert_eq!(sample_lsd_otb(p, 1000, 1).unwrap(), sample_lsd_otb(p, 1000, 1).unwrap());
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(sample_counts(&spec(0, 1.0, 1.0, 0.0, 1)).is_err());
        assert!(sample_counts(&spec(10, 0.0, 1.0, 0.0, 1)).is_err());
        assert!(sample_counts(&spec(10, 1.0, -1.0, 0.0, 1)).is_err());
        assert!(sample_counts(&spec(10, 1.0, 1.0, 1.0, 1)).is_err());
    }

    #[test]
    fn small_k_population_looks_like_lsd() {
        // k = 0.01, q = m/(m+k) = 0.95, penetration well below 0.2
        let k = 0.01;
        let m = 0.95 * k / 0.05;
        let (b, _) = nbd_summary(NbdParams::new(m, k).unwrap());
        assert!(b < 0.2);
        let table = sample_counts(&spec(100_000, k, m, 0.0, 7)).unwrap();
        let target = LsdParams::new(m / (m + k)).unwrap();
        let g = chisq_gof_pmf(&table, |r| lsd_pmf(target, r).unwrap(), 0, 0.01).unwrap();
        assert!(!g.significant, "chi2 {} df {} p {}", g.chi2, g.df, g.p_value);
    }

    #[test]
    fn one_time_users_raise_r1_share() {
        let share = |t: &FrequencyTable| t.get(1) as f64 / t.n_users() as f64;
        let without = sample_counts(&spec(20_000, 0.5, 1.0, 0.0, 3)).unwrap();
        let with = sample_counts(&spec(20_000, 0.5, 1.0, 0.4, 3)).unwrap();
        assert!(share(&with) > share(&without));
    }

    #[test]
    fn positive_mean_matches_nbd() {
        let (m, k) = (0.8, 0.5);
        let (_, omega) = nbd_summary(NbdParams::new(m, k).unwrap());
        for seed in 0..3 {
            let t = sample_counts(&spec(100_000, k, m, 0.0, seed)).unwrap();
            assert!((t.mean() / omega - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn log_series_sampler_matches_pmf() {
        for &q in &[0.3, 0.9, 0.99] {
            let p = LsdOtbParams::new(q, 0.0).unwrap();
            let t = sample_lsd_otb(p, 50_000, 11).unwrap();
            let g = chisq_gof_pmf(&t, |r| lsd_pmf(p.lsd(), r).unwrap(), 0, 0.001).unwrap();
            assert!(!g.significant, "q={q}: chi2 {} df {}", g.chi2, g.df);
            assert!((t.mean() / lsd_mean(p.lsd()) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn events_reproduce_counts() {
        let s = spec(20_000, 0.3, 0.6, 0.25, 5);
        let events = sample_events(&s, "item", 0, s.period_length).unwrap();
        let tables = count_frequencies(&build_sessions(&events, DEFAULT_TIMEOUT_SECS), None);
        let mut got = tables["item"].clone();
        let want = sample_counts(&s).unwrap();
        assert_eq!(got.counts(), want.counts());
        got = got.rows_from(1);
        assert_eq!(got.n_users(), want.n_users());
    }

    #[test]
    fn empty_range_and_single_user() {
        let s = spec(100, 1.0, 2.0, 0.0, 1);
        assert!(sample_events(&s, "i", 10, 10).unwrap().is_empty());
        let one = spec(1, 1.0, 50.0, 0.0, 2);
        let events = sample_events(&one, "i", 0, 86_400 * 30).unwrap();
        assert!(!events.is_empty());
        assert!(events.iter().all(|e| e.user_key == events[0].user_key));
    }

    #[test]
    fn simulation_spec_json() {
        let json = r#"{"seed": 9, "start": 978307200, "period_secs": 7776000,
            "items": [{"item_id": "a", "generator": {"kind": "lsd_otb", "q": 0.9, "pi": 0.4, "n_users": 300}},
                      {"item_id": "b", "generator": {"kind": "population", "n_users": 2000, "gamma_shape": 0.2, "mean_rate": 0.5}}]}"#;
        let sim: SimulationSpec = serde_json::from_str(json).unwrap();
        let tables = sim.tables().unwrap();
        assert_eq!(tables["a"].n_users(), 300);
        let events = sim.events().unwrap();
        let counted = count_frequencies(&build_sessions(&events, DEFAULT_TIMEOUT_SECS), None);
        for (item, t) in &tables {
            assert_eq!(counted[item].counts(), t.counts());
        }
        assert_eq!(sim.events().unwrap(), events);
    }
}
