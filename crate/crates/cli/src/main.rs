use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use tap_core::attack::{AttackConfig, AttackKind, Origin};
use tap_core::btca::{best_clock, clk_addr, format_addr, parse_cidr, ClockDataset, Selection, Tolerances};
use tap_core::clock::{allan_curve, octave_tau_grid, read_offset_csv, snap_to_grid, AllanError};
use tap_core::sim::{run, summarize, write_outputs, Scenario, SimError, Trace};
use tap_core::ue::calibrate_t0;
use tap_core::{Duration, TimePoint};

#[derive(Parser)]
#[command(name = "tapsim", version, about = "Over-the-air absolute time sync simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ScenarioArgs {
    scenario: PathBuf,
    /// dot-path override, e.g. ues.0.config.mode=kalman
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario; prints the summary JSON
    Run {
        #[command(flatten)]
        sc: ScenarioArgs,
        /// directory for per-UE CSV traces and summary.json
        #[arg(long)]
        out: Option<PathBuf>,
        /// run N consecutive seeds in parallel
        #[arg(long)]
        batch: Option<u64>,
    },
    /// Estimate t0 from a log of processing-delay errors
    Calibrate { log: PathBuf },
    /// Allan curve of an offset log
    Allan {
        log: PathBuf,
        /// averaging times in seconds, comma separated (default: octave grid)
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
        /// sample spacing in ms (default: median interval)
        #[arg(long)]
        spacing_ms: Option<f64>,
        #[arg(long)]
        accepted_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Best-clock selection over a JSON list of datasets, or address derivation
    Btca {
        datasets: Option<PathBuf>,
        /// derive a clock address: UE id in hex, then a.b.c.d/mask
        #[arg(long, num_args = 2, value_names = ["UE_ID", "CIDR"])]
        addr: Option<Vec<String>>,
    },
    /// Run a scenario under attack and report what the UE accepted
    Attack {
        #[command(flatten)]
        sc: ScenarioArgs,
        #[arg(long, value_parser = ["forwarding", "replay"])]
        kind: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write figure-ready CSVs (errors, Allan curve, boxplot) for a scenario
    Export {
        #[command(flatten)]
        sc: ScenarioArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Missing(String),
    Invalid(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Missing(_) => 2,
            Failure::Invalid(_) => 3,
            Failure::Internal(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            Failure::Missing(m) | Failure::Invalid(m) | Failure::Internal(m) => m,
        }
    }
}

type Res<T> = Result<T, Failure>;

fn read_input(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Failure::Missing(format!("{}: file not found", path.display())),
        _ => Failure::Missing(format!("{}: {e}", path.display())),
    })
}

fn invalid(path: &Path) -> impl Fn(SimError) -> Failure + '_ {
    move |e| match e {
        SimError::Io(e) => Failure::Internal(e.to_string()),
        e => Failure::Invalid(format!("{}: {e}", path.display())),
    }
}

fn written(e: impl std::fmt::Display) -> Failure {
    Failure::Internal(format!("write failed: {e}"))
}

fn load_scenario(args: &ScenarioArgs) -> Res<Scenario> {
    let text = read_input(&args.scenario)?;
    let mut sc = Scenario::parse(&text, &args.set).map_err(invalid(&args.scenario))?;
    if let Some(s) = args.seed {
        sc.seed = s;
    }
    sc.validate().map_err(invalid(&args.scenario))?;
    Ok(sc)
}

fn simulate(sc: &Scenario, path: &Path) -> Res<Trace> {
    run(sc).map_err(invalid(path))
}

fn print_json(v: &impl serde::Serialize) -> Res<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).map_err(written)?;
    writeln!(out).map_err(written)
}

fn cmd_run(args: &ScenarioArgs, out: Option<&Path>, batch: Option<u64>) -> Res<()> {
    let sc = load_scenario(args)?;
    let Some(n) = batch else {
        let trace = simulate(&sc, &args.scenario)?;
        let summary = summarize(&trace);
        if let Some(dir) = out {
            write_outputs(dir, &trace, &summary).map_err(written)?;
        }
        return print_json(&summary);
    };
    let seeds: Vec<u64> = (0..n).map(|i| sc.seed + i).collect();
    let results: Vec<Res<_>> = seeds
        .par_iter()
        .map(|&seed| {
            let sc = Scenario { seed, ..sc.clone() };
            let trace = simulate(&sc, &args.scenario)?;
            let summary = summarize(&trace);
            if let Some(dir) = out {
                write_outputs(dir.join(format!("seed_{seed}")), &trace, &summary).map_err(written)?;
            }
            Ok(summary)
        })
        .collect();
    let summaries = results.into_iter().collect::<Res<Vec<_>>>()?;
    let runs: Vec<_> = summaries
        .iter()
        .map(|s| json!({"seed": s.seed, "mean_abs_error_ns": s.ues.iter().map(|u| u.mean_abs_error_ns).collect::<Vec<_>>()}))
        .collect();
    let (sum, count) = summaries
        .iter()
        .flat_map(|s| &s.ues)
        .fold((0.0, 0usize), |(a, n), u| (a + u.mean_abs_error_ns * u.samples as f64, n + u.samples));
    print_json(&json!({"name": sc.name, "runs": runs, "pooled_mean_abs_error_ns": sum / count as f64}))
}

/// Error samples: an `error_ps` or `error_ns` column, else the first column in ns.
fn read_errors(path: &Path) -> Res<Vec<Duration>> {
    let text = read_input(path)?;
    let bad = |m: String| Failure::Invalid(format!("{}: {m}", path.display()));
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = rdr.records();
    let Some(first) = rows.next() else { return Ok(vec![]) };
    let first = first.map_err(|e| bad(e.to_string()))?;
    let (col, scale, header) = match first.iter().position(|h| h == "error_ps") {
        Some(i) => (i, 1e-3, true),
        None => match first.iter().position(|h| h == "error_ns") {
            Some(i) => (i, 1.0, true),
            None => (0, 1.0, first.get(0).is_some_and(|c| c.parse::<f64>().is_err())),
        },
    };
    let parse = |rec: &csv::StringRecord| -> Res<Duration> {
        let cell = rec.get(col).ok_or_else(|| bad("short row".into()))?;
        let v: f64 = cell.parse().map_err(|_| bad(format!("{cell:?} is not a number")))?;
        Ok(Duration::from_ns_f64(v * scale))
    };
    let mut out = Vec::new();
    if !header {
        out.push(parse(&first)?);
    }
    for rec in rows {
        out.push(parse(&rec.map_err(|e| bad(e.to_string()))?)?);
    }
    Ok(out)
}

fn cmd_calibrate(log: &Path) -> Res<()> {
    let errors = read_errors(log)?;
    let t0 = calibrate_t0(&errors).map_err(|e| Failure::Invalid(format!("{}: {e}", log.display())))?;
    let residual: Vec<Duration> = errors.iter().map(|&e| e - t0).collect();
    let median = calibrate_t0(&residual).expect("non-empty");
    let lo = residual.iter().min().unwrap();
    let hi = residual.iter().max().unwrap();
    println!("t0 = {t0}");
    println!("residual median = {median}");
    println!("residual range = [{:.1}, {:.1}] ns", lo.as_ns_f64(), hi.as_ns_f64());
    Ok(())
}

fn cmd_allan(log: &Path, tau: &[f64], spacing_ms: Option<f64>, accepted_only: bool, out: Option<&Path>) -> Res<()> {
    let text = read_input(log)?;
    let bad = |m: String| Failure::Invalid(format!("{}: {m}", log.display()));
    let records = read_offset_csv(text.as_bytes()).map_err(|e| bad(e.to_string()))?;
    let raw: Vec<(TimePoint, Duration)> = records
        .iter()
        .filter(|r| !accepted_only || r.accepted)
        .map(|r| (TimePoint::from_ps(r.t_master_ps), Duration::from_ps(r.offset_ps)))
        .collect();
    let spacing = spacing_ms.map(|ms| Duration::from_secs_f64(ms / 1e3));
    let series = snap_to_grid(&raw, spacing).map_err(|e| bad(e.to_string()))?;
    let step = series[1].0 - series[0].0;
    let grid: Vec<Duration> = if tau.is_empty() {
        octave_tau_grid(step, series.len())
    } else {
        tau.iter().map(|&s| Duration::from_secs_f64(s)).collect()
    };
    let curve = allan_curve(&series, &grid);
    if let Some(e) = curve.skipped.first() {
        if curve.points.is_empty() || !matches!(e, AllanError::TooShort { .. }) {
            return Err(bad(e.to_string()));
        }
    }
    if curve.points.is_empty() {
        return Err(bad(format!("series of {} samples is too short", series.len())));
    }
    let best = curve.argmin().map(|p| p.tau);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tau_s", "adev_variance", "n", "argmin"]).map_err(written)?;
    for p in &curve.points {
        let flag = if Some(p.tau) == best { "*" } else { "" };
        w.write_record([p.tau.as_secs_f64().to_string(), format!("{:e}", p.variance), p.sample_count.to_string(), flag.into()])
            .map_err(written)?;
    }
    let bytes = w.into_inner().map_err(written)?;
    match out {
        Some(path) => fs::write(path, bytes).map_err(written),
        None => io::stdout().lock().write_all(&bytes).map_err(written),
    }
}

fn cmd_btca(datasets: Option<&Path>, addr: Option<&[String]>) -> Res<()> {
    if let Some([id, cidr]) = addr {
        let bytes = hex::decode(id).map_err(|e| Failure::Invalid(format!("UE id {id:?}: {e}")))?;
        let (seg, mask) = parse_cidr(cidr).map_err(|e| Failure::Invalid(e.to_string()))?;
        let a = clk_addr(&bytes, seg, mask).map_err(|e| Failure::Invalid(e.to_string()))?;
        println!("{}", format_addr(a));
        return Ok(());
    }
    let Some(path) = datasets else {
        return Err(Failure::Invalid("btca needs a datasets file or --addr".into()));
    };
    let text = read_input(path)?;
    let sets: Vec<ClockDataset> =
        serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let result = best_clock(&sets, &Tolerances::default()).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let mut v = serde_json::to_value(&result).map_err(written)?;
    if let Selection::TieSet(ids) = &result.selection {
        v["coordination"] = json!(format!("outputs of the {} tied clocks are averaged", ids.len()));
    }
    print_json(&v)
}

fn cmd_attack(args: &ScenarioArgs, kind: Option<&str>, out: Option<&Path>) -> Res<()> {
    let mut sc = load_scenario(args)?;
    if let Some(k) = kind {
        let kind = if k == "replay" { AttackKind::Replay } else { AttackKind::Forwarding };
        let base = sc.attack.take().unwrap_or_default();
        sc.attack = Some(AttackConfig { kind, ..base });
    }
    let Some(attack) = sc.attack.clone() else {
        return Err(Failure::Invalid(format!("{}: scenario has no attack block", args.scenario.display())));
    };
    let trace = simulate(&sc, &args.scenario)?;
    let summary = summarize(&trace);
    if let Some(dir) = out {
        write_outputs(dir, &trace, &summary).map_err(written)?;
    }
    let ues: Vec<_> = trace
        .ues
        .iter()
        .map(|u| {
            let hit: Vec<_> = u.records.iter().filter(|r| r.origin == Origin::Attacker).collect();
            let mut reasons = std::collections::BTreeMap::<&str, usize>::new();
            for r in &hit {
                *reasons.entry(r.obs.reject_reason.as_str()).or_default() += 1;
            }
            let last = u.records.last();
            json!({
                "rnti": u.rnti,
                "attacked_frames": hit.len(),
                "attacked_accepted": hit.iter().filter(|r| r.obs.accepted).count(),
                "attacked_outcomes": reasons,
                "max_injected_delay_ns": hit.iter().map(|r| r.extra_delay.as_ns_f64()).fold(0.0, f64::max),
                "final_phase": last.map(|r| format!("{:?}", r.phase)),
                "final_error_ns": last.map(|r| r.error.as_ns_f64()),
            })
        })
        .collect();
    print_json(&json!({"name": sc.name, "seed": sc.seed, "attack": attack, "ues": ues}))
}

fn cmd_export(args: &ScenarioArgs, out: &Path) -> Res<()> {
    let sc = load_scenario(args)?;
    let trace = simulate(&sc, &args.scenario)?;
    let summary = summarize(&trace);
    fs::create_dir_all(out).map_err(written)?;
    let csv_file = |name: &str| csv::Writer::from_path(out.join(name)).map_err(written);

    let mut w = csv_file("errors.csv")?;
    w.write_record(["rnti", "t_s", "error_ns", "e_total_ns", "accepted", "phase"]).map_err(written)?;
    for u in &trace.ues {
        for r in &u.records {
            let total = r.budget.map(|b| format!("{:.3}", b.e_total.as_ns_f64())).unwrap_or_default();
            w.write_record([
                format!("{:#06x}", u.rnti),
                format!("{:.6}", r.obs.t_master.as_secs_f64()),
                format!("{:.3}", r.error.as_ns_f64()),
                total,
                r.obs.accepted.to_string(),
                format!("{:?}", r.phase),
            ])
            .map_err(written)?;
        }
    }
    w.flush().map_err(written)?;

    let mut w = csv_file("allan.csv")?;
    w.write_record(["rnti", "tau_s", "adev_variance", "n"]).map_err(written)?;
    for s in &summary.ues {
        for p in &s.allan {
            w.write_record([format!("{:#06x}", s.rnti), p.tau.as_secs_f64().to_string(), format!("{:e}", p.variance), p.sample_count.to_string()])
                .map_err(written)?;
        }
    }
    w.flush().map_err(written)?;

    let mut w = csv_file("boxplot.csv")?;
    w.write_record(["rnti", "low_ns", "q1_ns", "median_ns", "q3_ns", "high_ns", "outliers", "mean_abs_ns", "p99_9_abs_ns"])
        .map_err(written)?;
    for s in &summary.ues {
        let b = &s.boxplot_ns;
        let cells = [b.low, b.q1, b.median, b.q3, b.high];
        let mut row = vec![format!("{:#06x}", s.rnti)];
        row.extend(cells.iter().map(|v| format!("{v:.3}")));
        row.push(b.outliers.len().to_string());
        row.push(format!("{:.3}", s.mean_abs_error_ns));
        row.push(format!("{:.3}", s.abs_percentiles_ns.p99_9));
        w.write_record(&row).map_err(written)?;
    }
    w.flush().map_err(written)?;
    eprintln!("wrote errors.csv, allan.csv, boxplot.csv to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(3),
            };
        }
    };
    let result = match &cli.cmd {
        Cmd::Run { sc, out, batch } => cmd_run(sc, out.as_deref(), *batch),
        Cmd::Calibrate { log } => cmd_calibrate(log),
        Cmd::Allan { log, tau, spacing_ms, accepted_only, out } => cmd_allan(log, tau, *spacing_ms, *accepted_only, out.as_deref()),
        Cmd::Btca { datasets, addr } => cmd_btca(datasets.as_deref(), addr.as_deref()),
        Cmd::Attack { sc, kind, out } => cmd_attack(sc, kind.as_deref(), out.as_deref()),
        Cmd::Export { sc, out } => cmd_export(sc, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("tapsim: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
