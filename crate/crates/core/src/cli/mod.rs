//! The `repeat-usage` command-line tool.
//!
//! Stages exchange JSON lines: `sessionize` and `simulate --emit tables`
//! write [`TableRecord`]s, `fit` turns them into [`ItemReport`]s, and
//! `report` and `curve` read those back. Output order is fixed (item id,
//! then period id), so identical inputs give byte-identical outputs.

mod report;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{trend_report, windowed_fits, TrendRow, TrendThresholds, WindowSpec};
use crate::estimation::{FitOptions, FrequencyTable, ModelKind, ModelParams};
use crate::distributions::{LsdOtbParams, LsdParams};
use crate::gof::DEFAULT_ALPHA;
use crate::sessionize::{
    build_sessions, count_frequencies, filter_robots, parse_log, write_log, LogFormat,
    RobotFilter, UsageEvent, DEFAULT_TIMEOUT_SECS,
};
use crate::simulate::SimulationSpec;

pub use report::{
    item_report, portfolio_summary, render_summary, ItemReport, ModelReport, ModelStatus,
    PortfolioRow,
};

/// An input file that could not be opened or read. The binary exits with
/// status 2 on this error.
#[derive(Debug, thiserror::Error)]
#[error("cannot read {}", path.display())]
pub struct InputError {
    pub path: PathBuf,
    #[source]
    pub source: io::Error,
}

#[derive(Debug, Parser)]
#[command(name = "repeat-usage", version)]
#[command(about = "Repeat-usage models (LSD, LSD/OTB) for web access logs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Tsv,
}

impl Format {
    fn log_format(self) -> LogFormat {
        match self {
            Format::Csv => LogFormat::csv(),
            Format::Tsv => LogFormat::tsv(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Lsd,
    LsdOtb,
    Both,
}

impl ModelChoice {
    fn kinds(self) -> &'static [ModelKind] {
        match self {
            ModelChoice::Lsd => &[ModelKind::Lsd],
            ModelChoice::LsdOtb => &[ModelKind::LsdOtb],
            ModelChoice::Both => &[ModelKind::Lsd, ModelKind::LsdOtb],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Log,
    Tables,
}

#[derive(Debug, clap::Args)]
pub struct LogArgs {
    /// Access log to read
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Gap that ends a session
    #[arg(long, default_value_t = DEFAULT_TIMEOUT_SECS)]
    pub timeout_secs: i64,
    /// Robot user-agent tokens, one per line (built-in list when absent)
    #[arg(long)]
    pub robots_file: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn an access log into per-item frequency tables
    Sessionize {
        #[command(flatten)]
        log: LogArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit models to frequency tables and test them
    Fit {
        #[arg(long)]
        tables: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        model: ModelChoice,
        #[arg(long, default_value_t = crate::estimation::DEFAULT_MIN_USERS)]
        min_users: u64,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize item reports per model
    Report {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Observed and expected frequencies of one item as CSV
    Curve {
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        item: String,
        /// Item reports from `fit`
        #[arg(long)]
        fit: PathBuf,
        /// Needed when the item has tables for several periods
        #[arg(long)]
        period: Option<String>,
        #[arg(long, default_value_t = 30)]
        max_r: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit each item per time window and flag changes
    Trend {
        #[command(flatten)]
        log: LogArgs,
        /// Number of windows; 4 uses calendar quarters when the log spans one year
        #[arg(long, default_value_t = 4)]
        windows: usize,
        /// Use the calendar quarters of this year
        #[arg(long)]
        year: Option<i32>,
        #[arg(long, default_value_t = crate::estimation::DEFAULT_MIN_USERS)]
        min_users: u64,
        #[arg(long, default_value_t = 0.2)]
        q_threshold: f64,
        #[arg(long, default_value_t = 0.2)]
        pi_threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic logs or tables from a JSON spec
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_enum, default_value = "log")]
        emit: Emit,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// One line of a tables file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRecord {
    pub item_id: String,
    pub period_id: String,
    pub counts: BTreeMap<u64, u64>,
}

impl TableRecord {
    pub fn new(item_id: &str, table: &FrequencyTable) -> Self {
        Self {
            item_id: item_id.to_owned(),
            period_id: table.period_id().to_owned(),
            counts: table.counts().clone(),
        }
    }

    pub fn table(&self) -> crate::Result<FrequencyTable> {
        FrequencyTable::from_counts(self.period_id.clone(), self.counts.iter().map(|(&r, &f)| (r, f)))
    }
}

/// One line of `trend` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRecord {
    pub item_id: String,
    pub non_stationary: bool,
    pub rows: Vec<TrendRow>,
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| {
        InputError {
            path: path.to_owned(),
            source,
        }
        .into()
    })
}

fn read_to_string(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).map_err(|source| {
        InputError {
            path: path.to_owned(),
            source,
        }
        .into()
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| InputError {
            path: path.to_owned(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}:{}: invalid record", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_jsonl<T: Serialize>(out: &mut dyn Write, records: &[T]) -> anyhow::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn read_events(log: &LogArgs) -> anyhow::Result<Vec<UsageEvent>> {
    if log.timeout_secs <= 0 {
        bail!("--timeout-secs must be positive");
    }
    let filter = match &log.robots_file {
        Some(p) => RobotFilter::parse(&read_to_string(p)?)?,
        None => RobotFilter::default(),
    };
    let parsed = parse_log(open(&log.input)?, log.format.log_format())
        .with_context(|| format!("reading {}", log.input.display()))?;
    let read = parsed.events.len();
    let (events, stats) = filter_robots(parsed.events, &filter);
    eprintln!(
        "events: {read} read, {} malformed line(s) skipped, {} robot-agent and {} rate-limited dropped, {} kept",
        parsed.malformed, stats.dropped_agent, stats.dropped_rate, stats.kept
    );
    Ok(events)
}

fn load_tables(path: &Path) -> anyhow::Result<Vec<(String, FrequencyTable)>> {
    let mut tables = Vec::new();
    for rec in read_jsonl::<TableRecord>(path)? {
        let table = rec
            .table()
            .with_context(|| format!("table for item {}", rec.item_id))?;
        tables.push((rec.item_id, table));
    }
    tables.sort_by(|a, b| (&a.0, a.1.period_id()).cmp(&(&b.0, b.1.period_id())));
    Ok(tables)
}

fn sessionize(log: &LogArgs, out: Option<&Path>) -> anyhow::Result<()> {
    let events = read_events(log)?;
    let sessions = build_sessions(&events, log.timeout_secs);
    let tables = count_frequencies(&sessions, None);
    eprintln!("sessions: {}, items: {}", sessions.len(), tables.len());
    let records: Vec<_> = tables.iter().map(|(item, t)| TableRecord::new(item, t)).collect();
    let mut w = output(out)?;
    write_jsonl(&mut *w, &records)?;
    w.flush()?;
    Ok(())
}

fn fit(
    tables: &Path,
    model: ModelChoice,
    min_users: u64,
    alpha: f64,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        bail!("--alpha must lie in (0, 1)");
    }
    let opts = FitOptions {
        min_users,
        ..FitOptions::default()
    };
    let reports: Vec<ItemReport> = load_tables(tables)?
        .iter()
        .map(|(item, t)| item_report(item, t, model.kinds(), &opts, alpha))
        .collect();
    let mut w = output(out)?;
    write_jsonl(&mut *w, &reports)?;
    w.flush()?;
    Ok(())
}

fn report(reports: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let reports: Vec<ItemReport> = read_jsonl(reports)?;
    let mut w = output(out)?;
    w.write_all(render_summary(&portfolio_summary(&reports)).as_bytes())?;
    w.flush()?;
    Ok(())
}

fn fitted_params(report: &ModelReport, kind: ModelKind) -> Option<ModelParams> {
    let q = report.q?;
    match kind {
        ModelKind::Lsd => LsdParams::new(q).ok().map(ModelParams::Lsd),
        ModelKind::LsdOtb => LsdOtbParams::new(q, report.pi.unwrap_or(0.0))
            .ok()
            .map(ModelParams::LsdOtb),
    }
}

fn fmt_expected(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

fn curve(
    tables: &Path,
    item: &str,
    fit: &Path,
    period: Option<&str>,
    max_r: u64,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    if max_r == 0 {
        bail!("--max-r must be at least 1");
    }
    let pick = |id: &str, p: &str| id == item && period.is_none_or(|want| want == p);
    let candidates: Vec<_> = load_tables(tables)?
        .into_iter()
        .filter(|(id, t)| pick(id, t.period_id()))
        .collect();
    let table = match candidates.as_slice() {
        [] => bail!("unknown item {item:?} in {}", tables.display()),
        [(_, t)] => t.clone(),
        _ => bail!("item {item:?} has several periods; choose one with --period"),
    };
    let reports: Vec<ItemReport> = read_jsonl(fit)?;
    let report = reports
        .iter()
        .find(|r| pick(&r.item_id, &r.period_id))
        .ok_or_else(|| anyhow!("no report for item {item:?} in {}", fit.display()))?;
    let models: Vec<Option<ModelParams>> = [ModelKind::Lsd, ModelKind::LsdOtb]
        .into_iter()
        .map(|k| report.model(k).and_then(|m| fitted_params(m, k)))
        .collect();

    let n = table.n_users() as f64;
    let mut w = output(out)?;
    writeln!(w, "r,observed,expected_lsd,expected_lsd_otb")?;
    for r in 1..=max_r {
        let e: Vec<String> = models
            .iter()
            .map(|m| fmt_expected(m.and_then(|p| p.pmf(r).ok()).map(|p| n * p)))
            .collect();
        writeln!(w, "{r},{},{},{}", table.get(r), e[0], e[1])?;
    }
    let tail_obs: u64 = table.counts().range(max_r + 1..).map(|(_, f)| f).sum();
    let e: Vec<String> = models
        .iter()
        .map(|m| fmt_expected(m.map(|p| n * p.tail(max_r + 1))))
        .collect();
    writeln!(w, ">{max_r},{tail_obs},{},{}", e[0], e[1])?;
    w.flush()?;
    Ok(())
}

fn trend(
    log: &LogArgs,
    windows: usize,
    year: Option<i32>,
    min_users: u64,
    thresholds: TrendThresholds,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let events = read_events(log)?;
    let spec = match year {
        Some(y) => WindowSpec::calendar_quarters(y)?,
        None => WindowSpec::for_events(&events, windows)?,
    };
    let opts = FitOptions {
        min_users,
        ..FitOptions::default()
    };
    let mut records = Vec::new();
    for (item, fits) in windowed_fits(&events, &spec, log.timeout_secs, &opts) {
        let report = trend_report(&fits, thresholds)?;
        records.push(TrendRecord {
            item_id: item,
            non_stationary: report.non_stationary,
            rows: report.rows,
        });
    }
    let mut w = output(out)?;
    write_jsonl(&mut *w, &records)?;
    w.flush()?;
    Ok(())
}

fn simulate(spec: &Path, emit: Emit, out: Option<&Path>) -> anyhow::Result<()> {
    let spec: SimulationSpec = serde_json::from_str(&read_to_string(spec)?)
        .with_context(|| format!("invalid simulation spec {}", spec.display()))?;
    let mut w = output(out)?;
    match emit {
        Emit::Log => write_log(&mut w, &spec.events()?, b',')?,
        Emit::Tables => {
            let records: Vec<_> = spec
                .tables()?
                .iter()
                .map(|(item, t)| TableRecord::new(item, t))
                .collect();
            write_jsonl(&mut *w, &records)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Sessionize { log, out } => sessionize(&log, out.as_deref()),
        Command::Fit {
            tables,
            model,
            min_users,
            alpha,
            out,
        } => fit(&tables, model, min_users, alpha, out.as_deref()),
        Command::Report { reports, out } => report(&reports, out.as_deref()),
        Command::Curve {
            tables,
            item,
            fit,
            period,
            max_r,
            out,
        } => curve(&tables, &item, &fit, period.as_deref(), max_r, out.as_deref()),
        Command::Trend {
            log,
            windows,
            year,
            min_users,
            q_threshold,
            pi_threshold,
            out,
        } => trend(
            &log,
            windows,
            year,
            min_users,
            TrendThresholds {
                q: q_threshold,
                pi: pi_threshold,
            },
            out.as_deref(),
        ),
        Command::Simulate { spec, emit, out } => simulate(&spec, emit, out.as_deref()),
    }
}

/// Process exit status for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<InputError>()) {
        2
    } else {
        1
    }
}
