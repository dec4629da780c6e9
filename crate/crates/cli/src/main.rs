//! `nilm`: synthetic traces, state detection, disaggregation runs and
//! evaluation from the command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data or parse error, 3 internal
//! invariant violation.

mod artifacts;
mod inputs;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nilm_core::edge_detect::{write_edges_csv, write_pairs_csv};
use nilm_core::evaluation::{
    daily_state_counts, evaluate, read_reference_states, write_daily_counts_csv, write_shares_csv, EstimateAccumulator,
};
use nilm_core::export::{for_each_estimate, read_reports_jsonl, write_reports_csv, write_reports_jsonl, EstimateWriter, Format};
use nilm_core::pipeline::{detect_states, run_online_with};
use nilm_core::trace_io::{write_trace_csv, SECONDS_PER_DAY};
use nilm_core::{generate_synthetic, watt_seconds_to_kwh, ApplianceDatabase, Error, StateHistogram, WindowReport};

use artifacts::{finish, Staging};
use inputs::{load_config, load_specs, load_trace};

#[derive(Parser)]
#[command(name = "nilm", version, about = "Unsupervised online load disaggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic aggregate trace and its per-appliance ground truth.
    Synth(SynthArgs),
    /// Learn power states and the appliance database without disaggregating.
    DetectStates(RunArgs),
    /// Run the online pipeline and write per-second estimates.
    Run(RunArgs),
    /// Score an estimate stream against ground truth.
    Evaluate(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Jsonl => Format::Jsonl,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Appliance spec file: TOML with `[[appliance]]` tables, or a JSON array.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    days: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Trace CSV, or one or more channel files summed into the aggregate.
    #[arg(long, num_args = 1.., required_unless_present = "channels")]
    input: Vec<PathBuf>,
    /// Channel-selection TOML used instead of `--input`.
    #[arg(long, conflicts_with = "input")]
    channels: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `pf.rng_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Appliance database to start from.
    #[arg(long)]
    initial_db: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimate stream written by `run` (CSV or jsonl).
    #[arg(long)]
    input: PathBuf,
    /// Ground-truth trace CSV with per-appliance columns, or channel files.
    #[arg(long, num_args = 1.., required_unless_present = "channels")]
    ground_truth: Vec<PathBuf>,
    #[arg(long, conflicts_with = "ground_truth")]
    channels: Option<PathBuf>,
    /// Reference power states (`label,power_w` CSV or one wattage per line).
    #[arg(long)]
    reference_states: PathBuf,
    /// Update reports from `run`; defaults to `update_reports.jsonl` next to the input.
    #[arg(long)]
    reports: Option<PathBuf>,
    /// Leading days excluded from scoring.
    #[arg(long, default_value_t = 0)]
    skip_days: u32,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Integrity(_) | Error::InvalidState(_) | Error::Ordering { .. } | Error::Capability { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::DetectStates(a) => detect(a),
        Command::Run(a) => run(a),
        Command::Evaluate(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("nilm: usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Core(e)) => {
            eprintln!("nilm: error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn synth(a: SynthArgs) -> CliResult<()> {
    if a.days == 0 {
        return Err(CliError::Usage("--days must be at least 1".into()));
    }
    let specs = load_specs(&a.input)?;
    let trace = generate_synthetic(&specs, a.days, a.seed)?;
    let mut out = Staging::new(&a.out)?;
    let mut w = out.create("aggregate.csv")?;
    write_trace_csv(&trace, false, &mut w)?;
    finish(w, &a.out.join("aggregate.csv"))?;
    let mut w = out.create("ground_truth.csv")?;
    write_trace_csv(&trace, true, &mut w)?;
    finish(w, &a.out.join("ground_truth.csv"))?;
    out.commit()?;
    println!("samples: {}", trace.len());
    println!("appliances: {}", trace.per_appliance.len());
    Ok(())
}

fn prepare(a: &RunArgs) -> CliResult<(nilm_core::GroundTruthTrace, nilm_core::PipelineConfig, Option<ApplianceDatabase>)> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.pf.rng_seed = seed;
    }
    let trace = load_trace(&a.input, a.channels.as_deref())?;
    if trace.is_empty() {
        return Err(Error::Input("trace has no samples".into()).into());
    }
    let db = a.initial_db.as_deref().map(ApplianceDatabase::load).transpose()?;
    Ok((trace, config, db))
}

fn write_reports(out: &mut Staging, dir: &Path, reports: &[WindowReport]) -> CliResult<()> {
    let mut w = out.create("update_reports.jsonl")?;
    write_reports_jsonl(reports, &mut w)?;
    finish(w, &dir.join("update_reports.jsonl"))?;
    let mut w = out.create("windows.csv")?;
    write_reports_csv(reports, &mut w)?;
    finish(w, &dir.join("windows.csv"))?;
    Ok(())
}

fn detect(a: RunArgs) -> CliResult<()> {
    let (trace, config, db) = prepare(&a)?;
    let format: Format = a.format.into();
    let mut edges = Vec::new();
    let mut pairs = Vec::new();
    let mut histogram = StateHistogram::default();
    let (db, reports) = detect_states(&trace.samples, &config, db, |_, l| {
        edges.extend_from_slice(&l.edges);
        pairs.extend_from_slice(&l.pairs);
        histogram.accumulate(&l.histogram);
        Ok(())
    })?;

    let mut out = Staging::new(&a.out)?;
    let mut w = out.create("edges.csv")?;
    write_edges_csv(&edges, &mut w)?;
    finish(w, &a.out.join("edges.csv"))?;
    let mut w = out.create("pairs.csv")?;
    write_pairs_csv(&pairs, &mut w)?;
    finish(w, &a.out.join("pairs.csv"))?;
    let mut w = out.create("histogram.csv")?;
    histogram.write_csv(&mut w)?;
    finish(w, &a.out.join("histogram.csv"))?;
    let states = match format {
        Format::Csv => {
            let mut s = String::from("window,day,nominal_power_w,support\n");
            for r in &reports {
                for st in &r.states {
                    s += &format!("{},{},{},{}\n", r.window, r.day, st.nominal_power, st.support);
                }
            }
            ("states.csv", s)
        }
        Format::Jsonl => {
            let mut s = String::new();
            for r in &reports {
                for st in &r.states {
                    let rec = serde_json::json!({
                        "type": "power_state",
                        "window": r.window,
                        "day": r.day,
                        "nominal_power_w": st.nominal_power,
                        "support": st.support,
                    });
                    s += &rec.to_string();
                    s.push('\n');
                }
            }
            ("states.jsonl", s)
        }
    };
    out.write(states.0, states.1.as_bytes())?;
    write_reports(&mut out, &a.out, &reports)?;
    out.write("database.json", db.to_json()?.as_bytes())?;
    out.commit()?;
    println!("windows: {}", reports.len());
    println!("edges: {}", edges.len());
    println!("pairs: {}", pairs.len());
    println!("models: {}", db.len());
    for m in db.models() {
        println!("  model {} on_power_w {:.1}", m.id, m.on_power);
    }
    Ok(())
}

fn run(a: RunArgs) -> CliResult<()> {
    let (trace, config, db) = prepare(&a)?;
    let format: Format = a.format.into();
    let name = match format {
        Format::Csv => "estimates.csv",
        Format::Jsonl => "estimates.jsonl",
    };
    let mut out = Staging::new(&a.out)?;
    let mut writer = EstimateWriter::new(out.create(name)?, format)?;
    let mut total_ws = 0.0;
    let (db, reports) = run_online_with(&trace.samples, &config, db, |e| {
        total_ws += e.total_estimated_power;
        writer.write(e)
    })?;
    finish(writer.finish()?, &a.out.join(name))?;
    write_reports(&mut out, &a.out, &reports)?;
    out.write("database.json", db.to_json()?.as_bytes())?;
    out.commit()?;
    println!("samples: {}", trace.len());
    println!("windows: {}", reports.len());
    println!("models: {}", db.len());
    println!("total_estimated_energy_kwh: {:.6}", watt_seconds_to_kwh(total_ws));
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let config = load_config(a.config.as_deref())?;
    let references = match read_reference_states(&a.reference_states) {
        Err(Error::Config(msg)) => return Err(CliError::Usage(msg)),
        other => other?,
    };
    let reference_powers: Vec<f64> = references.iter().map(|(_, p)| *p).collect();
    let truth = load_trace(&a.ground_truth, a.channels.as_deref())?;
    if truth.per_appliance.is_empty() {
        return Err(Error::EmptyReport("ground truth has no per-appliance columns".into()).into());
    }
    let t0 = truth.samples.first().map_or(0, |s| s.timestamp);
    let cutoff = t0 + i64::from(a.skip_days) * SECONDS_PER_DAY;
    let first = truth.samples.partition_point(|s| s.timestamp < cutoff);
    let timestamps: Vec<i64> = truth.samples[first..].iter().map(|s| s.timestamp).collect();
    let scored: BTreeMap<String, Vec<f64>> =
        truth.per_appliance.iter().map(|(k, v)| (k.clone(), v[first..].to_vec())).collect();

    let mut acc = EstimateAccumulator::new(&timestamps);
    for_each_estimate(&a.input, |r| acc.add(r.timestamp, r.appliance_id, r.estimated_power_w))?;
    let (mut report, virtuals) = evaluate(&scored, &acc.finish(), &config.evaluation)?;

    let reports_path = a
        .reports
        .clone()
        .or_else(|| Some(a.input.parent()?.join("update_reports.jsonl")).filter(|p| p.exists()));
    if let Some(path) = &reports_path {
        let mut per_day: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in read_reports_jsonl(path)? {
            if let Some(u) = r.update {
                per_day.insert(r.day, u.models.iter().map(|(_, p)| *p).collect());
            }
        }
        let (assignable, unassignable) =
            daily_state_counts(&per_day, &reference_powers, config.evaluation.distance_threshold)?;
        report.states_assignable_per_day = assignable;
        report.states_unassignable_per_day = unassignable;
    }

    let mut out = Staging::new(&a.out)?;
    let mut summary = report.summary();
    for v in &virtuals {
        summary += &format!("virtual_appliance[{}] = {:.1} W ({})\n", v.label, v.nominal_power, v.members.join(", "));
    }
    for (day, n) in &report.states_assignable_per_day {
        let u = report.states_unassignable_per_day.get(day).copied().unwrap_or(0);
        summary += &format!("states_day[{day}] = {n} assignable, {u} unassignable\n");
    }
    out.write("report.txt", summary.as_bytes())?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
    out.write("report.json", json.as_bytes())?;
    let mut w = out.create("daily_states.csv")?;
    write_daily_counts_csv(&report, &mut w)?;
    finish(w, &a.out.join("daily_states.csv"))?;
    let mut w = out.create("shares.csv")?;
    write_shares_csv(&report, &mut w)?;
    finish(w, &a.out.join("shares.csv"))?;
    out.commit()?;
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(summary.as_bytes());
    Ok(())
}
