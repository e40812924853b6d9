//! Access logs to per-item frequency tables.
//!
//! Log lines are delimiter-separated. Without a header the columns are
//! `timestamp, user_key, item_id[, user_agent]`. With a header, columns are
//! found by name and the user key may instead be given as a `cookie` column
//! with a `client` (address) fallback. Timestamps are integer epoch seconds
//! or ISO-8601.
//!
//! A user's events form one session until the gap to the previous event
//! reaches the timeout. Within a session an item counts once, and each
//! session belongs to the period containing its start.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::FrequencyTable;

/// Twenty minutes.
pub const DEFAULT_TIMEOUT_SECS: i64 = 1200;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UsageEvent {
    pub timestamp: i64,
    pub user_key: String,
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_agent: Option<String>,
}

impl UsageEvent {
    pub fn new(timestamp: i64, user_key: impl Into<String>, item_id: impl Into<String>) -> Self {
        Self {
            timestamp,
            user_key: user_key.into(),
            item_id: item_id.into(),
            user_agent: None,
        }
    }

    pub fn with_agent(mut self, agent: impl Into<String>) -> Self {
        self.user_agent = Some(agent.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeaderMode {
    /// Treat the first line as a header when it names a timestamp column.
    Auto,
    Present,
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogFormat {
    /// A single ASCII byte.
    pub delimiter: u8,
    pub header: HeaderMode,
}

impl LogFormat {
    pub fn csv() -> Self {
        Self {
            delimiter: b',',
            header: HeaderMode::Auto,
        }
    }

    pub fn tsv() -> Self {
        Self {
            delimiter: b'\t',
            header: HeaderMode::Auto,
        }
    }
}

impl Default for LogFormat {
    fn default() -> Self {
        Self::csv()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum UserColumns {
    Key(usize),
    CookieOrClient {
        cookie: Option<usize>,
        client: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Columns {
    timestamp: usize,
    user: UserColumns,
    item: usize,
    user_agent: Option<usize>,
}

impl Columns {
    fn positional() -> Self {
        Self {
            timestamp: 0,
            user: UserColumns::Key(1),
            item: 2,
            user_agent: Some(3),
        }
    }

    fn is_header(fields: &[&str]) -> bool {
        fields
            .iter()
            .any(|f| matches!(f.trim().to_ascii_lowercase().as_str(), "timestamp" | "time" | "ts"))
    }

    fn from_header(fields: &[&str]) -> Result<Self> {
        let find = |names: &[&str]| {
            fields
                .iter()
                .position(|f| names.contains(&f.trim().to_ascii_lowercase().as_str()))
        };
        let timestamp = find(&["timestamp", "time", "ts"])
            .ok_or_else(|| Error::Config("header has no timestamp column".into()))?;
        let item = find(&["item_id", "item"])
            .ok_or_else(|| Error::Config("header has no item_id column".into()))?;
        let user = match find(&["user_key", "user"]) {
            Some(i) => UserColumns::Key(i),
            None => {
                let cookie = find(&["cookie", "cookie_id"]);
                let client = find(&["client", "client_ip", "ip", "address"]);
                if cookie.is_none() && client.is_none() {
                    return Err(Error::Config(
                        "header has no user_key, cookie or client column".into(),
                    ));
                }
                UserColumns::CookieOrClient { cookie, client }
            }
        };
        Ok(Self {
            timestamp,
            user,
            item,
            user_agent: find(&["user_agent", "agent", "ua"]),
        })
    }
}

/// Parses an epoch-seconds integer or an ISO-8601 instant (UTC when no
/// offset is given).
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(secs) = s.parse::<i64>() {
        return Some(secs);
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        .map(|t| t.and_utc().timestamp())
}

fn non_empty(s: Option<&&str>) -> Option<String> {
    s.map(|v| v.trim())
        .filter(|v| !v.is_empty() && *v != "-")
        .map(str::to_owned)
}

fn event_from_fields(fields: &[&str], columns: &Columns, delimiter: u8) -> Option<UsageEvent> {
    let timestamp = parse_timestamp(fields.get(columns.timestamp)?)?;
    if timestamp < 0 {
        return None;
    }
    let user_key = match &columns.user {
        UserColumns::Key(i) => non_empty(fields.get(*i))?,
        UserColumns::CookieOrClient { cookie, client } => cookie
            .and_then(|i| non_empty(fields.get(i)))
            .or_else(|| client.and_then(|i| non_empty(fields.get(i))))?,
    };
    let item_id = non_empty(fields.get(columns.item))?;
    let user_agent = match columns.user_agent {
        // Without a header, everything past the item column is the agent.
        Some(i) if columns == &Columns::positional() && fields.len() > i => {
            Some(fields[i..].join(&char::from(delimiter).to_string()))
        }
        Some(i) => fields.get(i).map(|s| s.to_string()),
        None => None,
    }
    .filter(|s| !s.is_empty());
    Some(UsageEvent {
        timestamp,
        user_key,
        item_id,
        user_agent,
    })
}

/// Streams events out of a log. Fields may be quoted. Malformed lines are
/// counted and skipped; only an inconsistent header or an I/O failure is an
/// error.
pub struct EventReader<R> {
    records: csv::StringRecordsIntoIter<R>,
    format: LogFormat,
    columns: Option<Columns>,
    malformed: usize,
    failed: bool,
}

impl<R: Read> EventReader<R> {
    pub fn new(reader: R, format: LogFormat) -> Self {
        let columns = match format.header {
            HeaderMode::Absent => Some(Columns::positional()),
            _ => None,
        };
        let records = csv::ReaderBuilder::new()
            .delimiter(format.delimiter)
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'#'))
            .from_reader(reader)
            .into_records();
        Self {
            records,
            format,
            columns,
            malformed: 0,
            failed: false,
        }
    }

    pub fn malformed(&self) -> usize {
        self.malformed
    }
}

impl<R: Read> Iterator for EventReader<R> {
    type Item = Result<UsageEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        for record in self.records.by_ref() {
            let record = match record {
                Ok(r) => r,
                Err(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => {
                    self.failed = true;
                    return Some(Err(Error::Config(format!("unreadable log: {e}"))));
                }
                Err(_) => {
                    self.malformed += 1;
                    continue;
                }
            };
            let fields: Vec<&str> = record.iter().collect();
            if fields.iter().all(|f| f.trim().is_empty()) {
                continue;
            }
            let columns = match &self.columns {
                Some(c) => c,
                None => {
                    let header = match self.format.header {
                        HeaderMode::Present => true,
                        _ => Columns::is_header(&fields),
                    };
                    let columns = if header {
                        Columns::from_header(&fields)
                    } else {
                        Ok(Columns::positional())
                    };
                    match columns {
                        Ok(c) => self.columns = Some(c),
                        Err(e) => {
                            self.failed = true;
                            return Some(Err(e));
                        }
                    }
                    if header {
                        continue;
                    }
                    self.columns.as_ref().expect("columns just set")
                }
            };
            match event_from_fields(&fields, columns, self.format.delimiter) {
                Some(ev) => return Some(Ok(ev)),
                None => self.malformed += 1,
            }
        }
        None
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedLog {
    pub events: Vec<UsageEvent>,
    pub malformed: usize,
}

/// Reads a whole log, keeping events in input order.
pub fn parse_log<R: Read>(reader: R, format: LogFormat) -> Result<ParsedLog> {
    let mut events_in = EventReader::new(reader, format);
    let mut events = Vec::new();
    for ev in events_in.by_ref() {
        events.push(ev?);
    }
    Ok(ParsedLog {
        events,
        malformed: events_in.malformed(),
    })
}

/// Writes events in the format [`parse_log`] reads, with a header line.
/// Fields containing the delimiter are quoted.
pub fn write_log<W: std::io::Write>(out: W, events: &[UsageEvent], delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(out);
    let io = |e: csv::Error| Error::Config(format!("cannot write log: {e}"));
    w.write_record(["timestamp", "user_key", "item_id", "user_agent"]).map_err(io)?;
    for ev in events {
        let ts = ev.timestamp.to_string();
        let agent = ev.user_agent.as_deref().unwrap_or("");
        w.write_record([ts.as_str(), &ev.user_key, &ev.item_id, agent]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Config(format!("cannot write log: {e}")))
}

/// Substrings (matched case-insensitively) that mark crawler user agents.
pub const DEFAULT_ROBOT_TOKENS: &[&str] = &[
    "bot", "crawl", "spider", "slurp", "archiver", "wget", "curl", "libwww", "python-requests",
];

/// Drops robot traffic by user-agent substring and by request rate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RobotFilter {
    pub agent_tokens: Vec<String>,
    /// Users exceeding this many events in any clock hour are dropped
    /// entirely.
    pub max_events_per_hour: Option<usize>,
}

impl Default for RobotFilter {
    fn default() -> Self {
        Self {
            agent_tokens: DEFAULT_ROBOT_TOKENS.iter().map(|s| s.to_string()).collect(),
            max_events_per_hour: None,
        }
    }
}

impl RobotFilter {
    /// A filter that keeps everything.
    pub fn none() -> Self {
        Self {
            agent_tokens: Vec::new(),
            max_events_per_hour: None,
        }
    }

    /// One token per line; `max-events-per-hour = N` sets the rate cap and
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut filter = Self::none();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("max-events-per-hour") {
                let value = rest.trim_start().trim_start_matches('=').trim();
                let cap = value.parse().map_err(|_| {
                    Error::Config(format!("bad max-events-per-hour value {value:?}"))
                })?;
                filter.max_events_per_hour = Some(cap);
            } else {
                filter.agent_tokens.push(line.to_ascii_lowercase());
            }
        }
        Ok(filter)
    }

    fn is_robot_agent(&self, agent: Option<&str>) -> bool {
        let Some(agent) = agent else { return false };
        let agent = agent.to_ascii_lowercase();
        self.agent_tokens.iter().any(|t| agent.contains(t.as_str()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub kept: usize,
    pub dropped_agent: usize,
    pub dropped_rate: usize,
}

pub fn filter_robots(events: Vec<UsageEvent>, filter: &RobotFilter) -> (Vec<UsageEvent>, FilterStats) {
    let mut stats = FilterStats::default();
    let mut kept: Vec<UsageEvent> = events
        .into_iter()
        .filter(|ev| {
            let robot = filter.is_robot_agent(ev.user_agent.as_deref());
            stats.dropped_agent += usize::from(robot);
            !robot
        })
        .collect();

    if let Some(cap) = filter.max_events_per_hour {
        let mut per_hour: HashMap<(&str, i64), usize> = HashMap::new();
        for ev in &kept {
            *per_hour
                .entry((ev.user_key.as_str(), ev.timestamp.div_euclid(3600)))
                .or_insert(0) += 1;
        }
        let heavy: BTreeSet<String> = per_hour
            .into_iter()
            .filter(|&(_, n)| n > cap)
            .map(|((user, _), _)| user.to_owned())
            .collect();
        let before = kept.len();
        kept.retain(|ev| !heavy.contains(&ev.user_key));
        stats.dropped_rate = before - kept.len();
    }
    stats.kept = kept.len();
    (kept, stats)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub user_key: String,
    pub start: i64,
    pub end: i64,
    pub item_ids: BTreeSet<String>,
}

/// Splits each user's events into sessions. A gap of at least `timeout`
/// seconds starts a new session. The result is ordered by user, then start,
/// and does not depend on the input order.
pub fn build_sessions(events: &[UsageEvent], timeout: i64) -> Vec<Session> {
    let mut by_user: BTreeMap<&str, Vec<(i64, &str)>> = BTreeMap::new();
    for ev in events {
        by_user
            .entry(ev.user_key.as_str())
            .or_default()
            .push((ev.timestamp, ev.item_id.as_str()));
    }

    let mut sessions = Vec::new();
    for (user, mut hits) in by_user {
        hits.sort_unstable();
        let mut current: Option<Session> = None;
        for (t, item) in hits {
            match current.as_mut() {
                Some(s) if t - s.end < timeout => {
                    s.end = t;
                    s.item_ids.insert(item.to_owned());
                }
                _ => {
                    sessions.extend(current.take());
                    current = Some(Session {
                        user_key: user.to_owned(),
                        start: t,
                        end: t,
                        item_ids: BTreeSet::from([item.to_owned()]),
                    });
                }
            }
        }
        sessions.extend(current);
    }
    sessions
}

/// Half-open time range `[start, end)` with a label used as the table's
/// period id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub label: String,
    pub start: i64,
    pub end: i64,
}

impl Period {
    pub fn new(label: impl Into<String>, start: i64, end: i64) -> Self {
        Self {
            label: label.into(),
            start,
            end,
        }
    }

    pub fn contains(&self, t: i64) -> bool {
        t >= self.start && t < self.end
    }
}

/// Period id of tables counted without a period filter.
pub const ALL_PERIODS: &str = "all";

/// Per item, the number of distinct users with exactly `r` sessions touching
/// it. Only sessions starting inside `period` count.
pub fn count_frequencies(
    sessions: &[Session],
    period: Option<&Period>,
) -> BTreeMap<String, FrequencyTable> {
    let mut incidences: BTreeMap<&str, BTreeMap<&str, u64>> = BTreeMap::new();
    for s in sessions {
        if period.is_some_and(|p| !p.contains(s.start)) {
            continue;
        }
        for item in &s.item_ids {
            *incidences
                .entry(item.as_str())
                .or_default()
                .entry(s.user_key.as_str())
                .or_insert(0) += 1;
        }
    }

    let label = period.map_or(ALL_PERIODS, |p| p.label.as_str());
    incidences
        .into_iter()
        .map(|(item, users)| {
            let mut table = FrequencyTable::new(label);
            for r in users.into_values() {
                table.add(r, 1);
            }
            (item.to_owned(), table)
        })
        .collect()
}
