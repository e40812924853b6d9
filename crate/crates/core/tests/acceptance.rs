//! Acceptance suite. Every criterion prints one PASS or FAIL line; the
//! process exits with status 1 when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use repeat_usage::cli::ItemReport;
use repeat_usage::diagnostics::repeat_usage_summary;
use repeat_usage::distributions::{
    lsd_otb_moments, lsd_otb_pmf, lsd_pmf, zt_nbd_pmf, LsdOtbParams, LsdParams, NbdParams,
};
use repeat_usage::estimation::{
    fit_lsd, fit_lsd_otb_direct, fit_lsd_otb_em, fit_lsd_otb_em_with, FitOptions, FrequencyTable,
};
use repeat_usage::gof::{chi2_verdict, chisq_gof};
use repeat_usage::sessionize::{build_sessions, count_frequencies, UsageEvent};
use repeat_usage::simulate::sample_lsd_otb;

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const BIN: &str = env!("CARGO_BIN_EXE_repeat-usage");

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("run binary")
}

fn criterion_1() -> Outcome {
    let table = [
        (0.717, [2.519, 0.572, 0.717, 1.327]),
        (0.807, [3.205, 0.640, 0.807, 1.364]),
        (0.916, [5.456, 0.737, 0.916, 1.409]),
    ];
    let names = ["omega_R", "b_R/b", "m_R/m", "omega_L"];
    let mut misses = Vec::new();
    for (q, expected) in table {
        let s = repeat_usage_summary(q).expect("q in range");
        let got = [
            s.mean_per_repeat_user,
            s.repeat_user_share,
            s.repeat_usage_share,
            s.mean_per_new_or_lost_user,
        ];
        for ((name, g), e) in names.iter().zip(got).zip(expected) {
            if (g - e).abs() > 0.01 {
                misses.push(format!("{name}(q={q}) = {g:.4}, table {e}"));
            }
        }
    }
    // q is printed to three decimals; the unrounded value is unknown.
    let s = repeat_usage_summary(0.91572).expect("q in range");
    let note = format!(
        "; at q=0.91572 (rounds to 0.916) omega_R = {:.4}",
        s.mean_per_repeat_user
    );
    if misses.is_empty() {
        outcome(true, "12/12 values within 0.01")
    } else {
        outcome(
            false,
            format!("{}/12 within 0.01; off: {}{note}", 12 - misses.len(), misses.join(", ")),
        )
    }
}

fn criterion_2() -> Outcome {
    let (p1, sig1) = chi2_verdict(1.922, 5, 0.05);
    let (p2, sig2) = chi2_verdict(15.134, 6, 0.05);
    outcome(
        !sig1 && sig2,
        format!("(1.922, 5): p={p1:.4} significant={sig1}; (15.134, 6): p={p2:.4} significant={sig2}"),
    )
}

fn report_line(i: usize, lsd: &str, otb: &str) -> String {
    let model = |status: &str| match status {
        "no_q" => r#"{"status":"no_q"}"#.to_owned(),
        "no_test" => r#"{"status":"no_test","q":0.5,"loglik":-1.0}"#.to_owned(),
        s => format!(r#"{{"status":"{s}","q":0.5,"loglik":-1.0,"chi2":1.0,"df":3,"p_value":0.5}}"#),
    };
    format!(
        r#"{{"item_id":"item{i:04}","period_id":"all","n_users":0,"n_usages":0,"lsd":{},"lsd_otb":{}}}"#,
        model(lsd),
        model(otb)
    )
}

fn statuses(counts: [usize; 4]) -> Vec<&'static str> {
    let names = ["no_q", "no_test", "not_significant", "significant"];
    names
        .iter()
        .zip(counts)
        .flat_map(|(&s, c)| std::iter::repeat_n(s, c))
        .collect()
}

fn criterion_3(dir: &Path) -> Outcome {
    let lsd = statuses([713, 786, 475, 252]);
    let otb = statuses([834, 838, 516, 38]);
    let lines: Vec<String> = lsd
        .iter()
        .zip(&otb)
        .enumerate()
        .map(|(i, (a, b))| report_line(i, a, b))
        .collect();
    let path = dir.join("table2.jsonl");
    std::fs::write(&path, lines.join("\n") + "\n").expect("write reports");
    let out = cli(&["report", "--reports", path.to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let row = |label: &str| {
        text.lines()
            .find(|l| l.split_whitespace().next() == Some(label))
            .unwrap_or("")
            .to_owned()
    };
    let (lsd_row, otb_row) = (row("LSD"), row("LSD/OTB"));
    let pass = out.status.success()
        && lsd_row.contains("2226")
        && lsd_row.ends_with("65.34%")
        && otb_row.ends_with("93.14%");
    outcome(
        pass,
        format!(
            "LSD {}, LSD/OTB {}",
            lsd_row.split_whitespace().last().unwrap_or("?"),
            otb_row.split_whitespace().last().unwrap_or("?")
        ),
    )
}

fn recovery_cases() -> Vec<(f64, f64, u64)> {
    let mut cases = Vec::new();
    for &q in &[0.7, 0.9] {
        for &pi in &[0.2, 0.5] {
            for rep in 0..5u64 {
                cases.push((q, pi, 1000 + rep));
            }
        }
    }
    cases
}

fn criterion_4a() -> Outcome {
    let start = Instant::now();
    let (mut err_q, mut err_pi, mut max_gap) = (0.0, 0.0, 0.0f64);
    let cases = recovery_cases();
    for &(q, pi, seed) in &cases {
        let t = sample_lsd_otb(LsdOtbParams::new(q, pi).unwrap(), 5000, seed).unwrap();
        let em = fit_lsd_otb_em(&t).unwrap();
        let direct = fit_lsd_otb_direct(&t).unwrap();
        err_q += (em.q() - q).abs();
        err_pi += (em.pi() - pi).abs();
        max_gap = max_gap
            .max((em.q() - direct.q()).abs())
            .max((em.pi() - direct.pi()).abs());
    }
    let n = cases.len() as f64;
    let (mae_q, mae_pi) = (err_q / n, err_pi / n);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mae_q < 0.02 && mae_pi < 0.03 && max_gap < 1e-3 && secs < 10.0,
        format!(
            "MAE q {mae_q:.4}, MAE pi {mae_pi:.4}, max |EM - direct| {max_gap:.1e}, {secs:.1}s"
        ),
    )
}

fn criterion_4b() -> Outcome {
    let start = Instant::now();
    let fitted = LsdOtbParams::new(0.954, 0.39).unwrap();
    let replicates = 500;
    let mut rejected = 0;
    let mut untestable = 0;
    for seed in 0..replicates {
        let t = sample_lsd_otb(fitted, 2000, 50_000 + seed).unwrap();
        let fit = fit_lsd_otb_em(&t).unwrap();
        match chisq_gof(&t, &fit, 0.05) {
            Ok(g) => rejected += usize::from(g.significant),
            Err(_) => untestable += 1,
        }
    }
    let rate = rejected as f64 / replicates as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        (0.02..=0.09).contains(&rate) && untestable == 0 && secs < 60.0,
        format!("rejection rate {:.1}% ({rejected}/{replicates}), {secs:.1}s", 100.0 * rate),
    )
}

fn criterion_4c() -> Outcome {
    let mut worst = 0.0f64;
    for &m in &[0.1, 0.5, 1.0, 5.0, 20.0, 100.0] {
        let nbd = NbdParams::new(m, 0.01).unwrap();
        let lsd = LsdParams::new(nbd.lsd_limit_q()).unwrap();
        for r in 1..=200 {
            let d = (zt_nbd_pmf(nbd, r).unwrap() - lsd_pmf(lsd, r).unwrap()).abs();
            worst = worst.max(d);
        }
    }
    outcome(worst < 0.01, format!("sup-norm {worst:.2e} over m in [0.1, 100], r <= 200"))
}

fn criterion_4d() -> Outcome {
    let mut worst = 0.0f64;
    for qi in 1..=99 {
        let q = qi as f64 / 100.0;
        for pii in 0..=9 {
            let pi = pii as f64 / 10.0;
            let p = LsdOtbParams::new(q, pi).unwrap();
            let (mut s1, mut s2) = (0.0, 0.0);
            for r in 1..=20_000u64 {
                let w = lsd_otb_pmf(p, r).unwrap();
                if w == 0.0 {
                    break;
                }
                s1 += r as f64 * w;
                s2 += (r * r) as f64 * w;
            }
            let (mean, var) = lsd_otb_moments(p);
            worst = worst.max((var - (s2 - s1 * s1)).abs()).max((mean - s1).abs());
        }
    }
    outcome(worst < 1e-6, format!("max |analytic - summed| {worst:.2e} over 990 grid points"))
}

fn random_table(rng: &mut ChaCha8Rng) -> FrequencyTable {
    let rows = rng.random_range(2..15);
    let mut t = FrequencyTable::new("random");
    t.add(rng.random_range(2..40), rng.random_range(1..50));
    for _ in 0..rows {
        t.add(rng.random_range(1..60), rng.random_range(1..300));
    }
    t
}

fn criterion_4e() -> Outcome {
    let mut tables: Vec<FrequencyTable> = vec![
        FrequencyTable::from_counts("f", [(1, 100), (2, 1)]).unwrap(),
        FrequencyTable::from_counts("f", [(1, 2), (2, 3), (5, 1)]).unwrap(),
        FrequencyTable::from_counts("f", [(2, 10), (3, 4)]).unwrap(),
        FrequencyTable::from_counts("f", [(1, 40), (2, 9), (3, 4), (4, 2), (6, 1)]).unwrap(),
    ];
    for &(q, pi, seed) in &recovery_cases() {
        tables.push(sample_lsd_otb(LsdOtbParams::new(q, pi).unwrap(), 5000, seed).unwrap());
    }
    for seed in 0..50 {
        tables.push(sample_lsd_otb(LsdOtbParams::new(0.954, 0.39).unwrap(), 2000, 50_000 + seed).unwrap());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    tables.extend((0..300).map(|_| random_table(&mut rng)));

    let mut failures = Vec::new();
    for (i, t) in tables.iter().enumerate() {
        let (em, trace) = fit_lsd_otb_em_with(t, &FitOptions::ungated()).unwrap();
        let lsd = fit_lsd(t).unwrap();
        let slack = |v: f64| 1e-9 * v.abs().max(1.0);
        if trace.windows(2).any(|w| w[1] < w[0] - slack(w[0])) {
            failures.push(format!("table {i}: EM log-likelihood decreased"));
        }
        if em.loglik < lsd.loglik - slack(lsd.loglik) {
            failures.push(format!("table {i}: LL_otb {} < LL_lsd {}", em.loglik, lsd.loglik));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} tables, EM monotone and LL_otb >= LL_lsd on all", tables.len())
        } else {
            failures.join("; ")
        },
    )
}

fn check_fixture_sessions() -> Result<(), String> {
    let events = [
        UsageEvent::new(0, "u", "a"),
        UsageEvent::new(1199, "u", "a"),
        UsageEvent::new(1199, "u", "b"),
        UsageEvent::new(2399, "u", "a"),
    ];
    let sessions = build_sessions(&events, 1200);
    let tables = count_frequencies(&sessions, None);
    if sessions.len() != 2 {
        return Err(format!("boundary: {} sessions, expected 2", sessions.len()));
    }
    if tables["a"].counts() != &[(2, 1)].into_iter().collect() {
        return Err("deduplication: item a should count twice".into());
    }
    Ok(())
}

fn criterion_5(dir: &Path) -> Outcome {
    let start = Instant::now();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let golden = std::fs::read_to_string(fixtures.join("access_log.tables.jsonl")).unwrap_or_default();
    let out = cli(&["sessionize", "--input", fixtures.join("access_log.csv").to_str().unwrap()]);
    if !out.status.success() || String::from_utf8_lossy(&out.stdout) != golden {
        return outcome(false, "sessionizer fixture does not match its golden tables");
    }
    if let Err(e) = check_fixture_sessions() {
        return outcome(false, e);
    }

    let mut items = Vec::new();
    let mut truth = Vec::new();
    for &q in &[0.7, 0.9] {
        for &pi in &[0.2, 0.5] {
            for rep in 0..2 {
                let id = format!("q{q}-pi{pi}-{rep}");
                items.push(format!(
                    r#"{{"item_id":"{id}","generator":{{"kind":"lsd_otb","q":{q},"pi":{pi},"n_users":5000}}}}"#
                ));
                truth.push((id, q, pi));
            }
        }
    }
    let spec = format!(
        r#"{{"seed":2001,"start":978307200,"period_secs":31536000,"items":[{}]}}"#,
        items.join(",")
    );
    let p = |name: &str| dir.join(name).to_str().unwrap().to_owned();
    std::fs::write(p("spec.json"), spec).unwrap();
    let steps: [&[&str]; 4] = [
        &["simulate", "--spec", &p("spec.json"), "--out", &p("log.csv")],
        &["sessionize", "--input", &p("log.csv"), "--out", &p("tables.jsonl")],
        &["fit", "--tables", &p("tables.jsonl"), "--model", "both", "--out", &p("reports.jsonl")],
        &["report", "--reports", &p("reports.jsonl"), "--out", &p("summary.txt")],
    ];
    for step in steps {
        let out = cli(step);
        if !out.status.success() {
            return outcome(
                false,
                format!("{} failed: {}", step[0], String::from_utf8_lossy(&out.stderr)),
            );
        }
    }
    let reports: Vec<ItemReport> = std::fs::read_to_string(p("reports.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let (mut err_q, mut err_pi) = (0.0, 0.0);
    for (id, q, pi) in &truth {
        let Some(m) = reports.iter().find(|r| &r.item_id == id).and_then(|r| r.lsd_otb.as_ref()) else {
            return outcome(false, format!("no LSD/OTB report for {id}"));
        };
        err_q += (m.q.unwrap_or(f64::NAN) - q).abs();
        err_pi += (m.pi.unwrap_or(f64::NAN) - pi).abs();
    }
    let n = truth.len() as f64;
    let (mae_q, mae_pi) = (err_q / n, err_pi / n);
    let summary = std::fs::read_to_string(p("summary.txt")).unwrap_or_default();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mae_q < 0.02 && mae_pi < 0.03 && summary.contains("LSD/OTB") && secs < 30.0,
        format!(
            "fixture exact; {} items: MAE q {mae_q:.4}, MAE pi {mae_pi:.4}, {secs:.1}s",
            truth.len()
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        ("1  retention table reproduction", Box::new(criterion_1)),
        ("2  significance verdicts", Box::new(criterion_2)),
        ("3  portfolio summary arithmetic", Box::new(|| criterion_3(dir.path()))),
        ("4a estimator recovery", Box::new(criterion_4a)),
        ("4b GoF calibration", Box::new(criterion_4b)),
        ("4c LSD limit of the NBD", Box::new(criterion_4c)),
        ("4d LSD/OTB variance", Box::new(criterion_4d)),
        ("4e EM monotonicity and nesting", Box::new(criterion_4e)),
        ("5  end-to-end pipeline", Box::new(|| criterion_5(dir.path()))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let o = run();
        failed += usize::from(!o.pass);
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
