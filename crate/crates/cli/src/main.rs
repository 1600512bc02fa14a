//! `streamcausal` command-line front end.
//!
//! Exit codes: 0 success (and CONTINUE for `monitor`), 2 REJECT,
//! 3 COMPLETE_ACCEPT, 4 update refused on a terminated monitor, 10 and
//! above for errors, which are also written to stderr as one JSON object.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use streamcausal::ingest::read_batch_for;
use streamcausal::persist::{StateFile, StateLock};
use streamcausal::sim::{self, report, ScenarioOptions, SimConfig};
use streamcausal::{
    init_state, solve_offline, Decision, Error, Family, ModelSpec, MonitorConfig, MonitorState,
    OutcomeType, SolverOptions, Spending,
};

use crate::output::{Format, Report};

#[derive(Parser, Debug)]
#[command(
    name = "streamcausal",
    version,
    about = "Online estimation and monitoring of average treatment effects"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the first batch and write a new state file.
    Init {
        #[arg(long)]
        family: Family,
        #[arg(long, default_value = "continuous")]
        outcome: OutcomeType,
        #[arg(long)]
        batch: PathBuf,
        #[arg(long)]
        state: PathBuf,
        /// Group-sequential plan as `T,alpha,spending`, e.g. `10,0.05,pocock`.
        #[arg(long)]
        monitor: Option<String>,
        /// Null value of the monitored effect.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        null_delta: f64,
        /// Overwrite an existing state file.
        #[arg(long)]
        force: bool,
    },
    /// Renew the state with one more batch, in place.
    Update {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        batch: PathBuf,
    },
    /// Print the current estimate.
    Report {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Run one interim analysis on the current estimate.
    Monitor {
        #[arg(long)]
        state: PathBuf,
    },
    /// Run a simulation scenario and write its tables.
    Simulate {
        #[arg(long, value_enum)]
        scenario: Scenario,
        /// Configuration override `key=value` (repeatable), e.g. `replications=50`.
        #[arg(long = "set", visible_alias = "overrides", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated subset of families.
        #[arg(long, value_delimiter = ',')]
        families: Vec<Family>,
        /// Run replications on one thread (steadier timings).
        #[arg(long)]
        serial: bool,
    },
    /// Offline pooled fit over several batch files.
    Oracle {
        #[arg(long, num_args = 1.., required = true)]
        batches: Vec<PathBuf>,
        #[arg(long)]
        family: Family,
        #[arg(long, default_value = "continuous")]
        outcome: OutcomeType,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Scenario {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    Biased,
}

/// A failed command: machine-readable kind, message and exit code.
#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            kind: "usage",
            message: message.into(),
            code: 10,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::MonitorTerminated(_) => 4,
            Error::Parse { .. }
            | Error::Csv(_)
            | Error::InvalidObservation(_)
            | Error::Dimension { .. } => 11,
            Error::Checksum { .. } | Error::Format(_) | Error::Json(_) => 12,
            Error::Positivity { .. }
            | Error::NonFinite(_)
            | Error::Singular { .. }
            | Error::NonConvergence { .. }
            | Error::ZeroVariance => 13,
            Error::Config(_) => 14,
            Error::Io(_) => 15,
        };
        Failure {
            kind: e.kind(),
            message: e.to_string(),
            code,
        }
    }
}

type CmdResult = std::result::Result<u8, Failure>;

fn parse_monitor(text: &str, null_delta: f64) -> Result<MonitorConfig, Failure> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [t, alpha, spending] = parts[..] else {
        return Err(Failure::usage(format!(
            "--monitor expects T,alpha,spending, got `{text}`"
        )));
    };
    let t: usize = t
        .parse()
        .map_err(|_| Failure::usage(format!("number of analyses `{t}` is not an integer")))?;
    let alpha: f64 = alpha
        .parse()
        .map_err(|_| Failure::usage(format!("alpha `{alpha}` is not a number")))?;
    let spending: Spending = spending.parse()?;
    Ok(MonitorConfig::new(t, alpha, spending)?.with_null(null_delta))
}

fn load(path: &Path) -> Result<StateFile, Failure> {
    StateFile::load(path).map_err(|e| match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Failure {
            kind: "io",
            message: format!("state file {} does not exist", path.display()),
            code: 15,
        },
        other => other.into(),
    })
}

fn init(
    family: Family,
    outcome: OutcomeType,
    batch: &Path,
    state: &Path,
    monitor: Option<&str>,
    null_delta: f64,
    force: bool,
) -> CmdResult {
    if state.exists() && !force {
        return Err(Failure::usage(format!(
            "{} already exists (use --force to overwrite)",
            state.display()
        )));
    }
    let monitor = monitor
        .map(|m| parse_monitor(m, null_delta).and_then(|c| Ok(MonitorState::new(c)?)))
        .transpose()?;
    let data = streamcausal::ingest::read_batch_csv(batch, 1, Some(outcome))?;
    let spec = ModelSpec::new(family, outcome, data.p())?;
    let s = init_state(&data, spec, &SolverOptions::default())?;
    info!(
        "initialized {family} state from {} observations",
        data.len()
    );
    let _lock = StateLock::acquire(state)?;
    StateFile::new(s, monitor).save(state)?;
    Ok(0)
}

fn update(state: &Path, batch: &Path) -> CmdResult {
    let _lock = StateLock::acquire(state)?;
    let mut file = load(state)?;
    if let Some(m) = &file.monitor {
        if m.decision != Decision::Continue {
            return Err(Error::MonitorTerminated(m.decision).into());
        }
    }
    let index = file.state.batch_count() + 1;
    let data = read_batch_for(batch, index, file.state.spec())?;
    file.state.update(&data, &SolverOptions::default())?;
    file.save(state)?;
    Ok(0)
}

fn monitor(state: &Path) -> CmdResult {
    let _lock = StateLock::acquire(state)?;
    let mut file = load(state)?;
    let Some(m) = &file.monitor else {
        return Err(
            Error::Config("state file has no monitoring plan (use init --monitor)".into()).into(),
        );
    };
    if m.decision == Decision::Continue && m.analyses_done as u64 >= file.state.batch_count() {
        return Err(Error::Config(format!(
            "{} analyses already done on {} batches; update with a new batch first",
            m.analyses_done,
            file.state.batch_count()
        ))
        .into());
    }
    let next = m.step(&file.state)?;
    let z = next.z_history.last().copied().unwrap_or(f64::NAN);
    let bound = next.boundaries[next.analyses_done - 1];
    println!(
        "analysis {}/{}  Z = {z:.6}  boundary = {bound:.6}  decision = {}",
        next.analyses_done,
        next.config.total_analyses,
        output::decision_name(next.decision)
    );
    let code = match next.decision {
        Decision::Continue => 0,
        Decision::Reject => 2,
        Decision::CompleteAccept => 3,
    };
    file.monitor = Some(next);
    file.save(state)?;
    Ok(code)
}

fn apply_overrides(config: &SimConfig, overrides: &[String]) -> Result<SimConfig, Failure> {
    let mut value = serde_json::to_value(config).map_err(|e| Failure::usage(e.to_string()))?;
    for o in overrides {
        let Some((key, raw)) = o.split_once('=') else {
            return Err(Failure::usage(format!(
                "override `{o}` is not of the form key=value"
            )));
        };
        let obj = value
            .as_object_mut()
            .expect("config serializes to an object");
        if !obj.contains_key(key) {
            let keys: Vec<&String> = obj.keys().collect();
            return Err(Failure::usage(format!(
                "unknown setting `{key}`; known: {keys:?}"
            )));
        }
        let parsed = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        obj.insert(key.to_string(), parsed);
    }
    serde_json::from_value(value).map_err(|e| Failure::usage(format!("invalid override: {e}")))
}

fn create(path: &Path) -> Result<std::fs::File, Failure> {
    Ok(std::fs::File::create(path).map_err(Error::from)?)
}

fn simulate(
    scenario: Scenario,
    overrides: &[String],
    out: &Path,
    seed: Option<u64>,
    families: &[Family],
    serial: bool,
) -> CmdResult {
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let mut options = ScenarioOptions {
        parallel: !serial,
        ..ScenarioOptions::default()
    };
    if !families.is_empty() {
        options.families = families.to_vec();
    }
    let with_seed = |c: SimConfig| SimConfig {
        seed: seed.unwrap_or(c.seed),
        ..c
    };

    if scenario == Scenario::Three {
        let (config, monitor, grid) = sim::scenario_three(&SimConfig::default());
        let config = with_seed(apply_overrides(&config, overrides)?);
        let monitor = MonitorConfig::new(config.n_batches, monitor.alpha, monitor.spending)?;
        let table = sim::run_sequential_experiment(&config, &monitor, &grid, &options)?;
        report::write_rejection_csv(&table, create(&out.join("rejection.csv"))?)?;
        report::write_json(&table, &out.join("summary.json"))?;
        for r in &table.rows {
            println!(
                "{:<6} delta {:.2}  rejection rate {:.3}",
                r.family, r.delta, r.rejection_rate
            );
        }
        return Ok(0);
    }

    let configs = match scenario {
        Scenario::One => sim::scenario_one(&sim::preset_base()),
        Scenario::Two => sim::scenario_two(&sim::preset_base()),
        Scenario::Biased => vec![sim::scenario_biased(&sim::preset_base())],
        Scenario::Three => unreachable!(),
    };
    options.record_trajectory = true;
    let mut tables = Vec::new();
    let mut trajectories = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        let config = with_seed(apply_overrides(c, overrides)?);
        info!(
            "running b={} n={} with {} replications",
            config.n_batches, config.batch_size, config.replications
        );
        let rep = sim::run_scenario(&config, &options)?;
        tables.push(rep.table);
        trajectories.push((i, rep.trajectory));
    }
    report::write_metrics_csv(&tables, create(&out.join("metrics.csv"))?)?;
    let points: Vec<(usize, &[sim::TrajectoryPoint])> =
        trajectories.iter().map(|(i, t)| (*i, &t[..])).collect();
    report::write_trajectory_csv(&points, create(&out.join("trajectory.csv"))?)?;
    report::write_json(&tables, &out.join("summary.json"))?;
    for t in &tables {
        for r in &t.rows {
            println!(
                "{:>4} x {:<5} {:<6} {:<8} bias {:+.3e}  ASE {:.4}  ESE {:.4}  CP {:.3}  run {:.4}s  failures {}",
                r.n_batches,
                r.batch_size,
                r.family,
                r.mode.as_str(),
                r.bias,
                r.ase,
                r.ese,
                r.coverage,
                r.run_time,
                r.failures
            );
        }
    }
    Ok(0)
}

fn oracle(batches: &[PathBuf], family: Family, outcome: OutcomeType, format: Format) -> CmdResult {
    let first = streamcausal::ingest::read_batch_csv(&batches[0], 1, Some(outcome))?;
    let spec = ModelSpec::new(family, outcome, first.p())?;
    let mut data = vec![first];
    for (i, path) in batches.iter().enumerate().skip(1) {
        data.push(read_batch_for(path, i as u64 + 1, &spec)?);
    }
    let fit = solve_offline(&data, spec, &SolverOptions::default())?;
    let report = Report::offline(&fit, data.len() as u64)?;
    print!("{}", report.render(format).map_err(Failure::from)?);
    Ok(0)
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Init {
            family,
            outcome,
            batch,
            state,
            monitor,
            null_delta,
            force,
        } => init(
            family,
            outcome,
            &batch,
            &state,
            monitor.as_deref(),
            null_delta,
            force,
        ),
        Command::Update { state, batch } => update(&state, &batch),
        Command::Report { state, format } => {
            let file = load(&state)?;
            print!("{}", Report::online(&file)?.render(format)?);
            Ok(0)
        }
        Command::Monitor { state } => monitor(&state),
        Command::Simulate {
            scenario,
            overrides,
            out,
            seed,
            families,
            serial,
        } => simulate(scenario, &overrides, &out, seed, &families, serial),
        Command::Oracle {
            batches,
            family,
            outcome,
            format,
        } => oracle(&batches, family, outcome, format),
    }
}

fn fail(f: &Failure) -> ExitCode {
    let body = serde_json::json!({
        "error": f.kind,
        "message": f.message,
        "exit_code": f.code,
    });
    eprintln!("{body}");
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&Failure::usage(e.to_string().trim_end())),
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => fail(&f),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monitor_plan_parses() {
        let c = parse_monitor("5, 0.025, OBF", 0.1).unwrap();
        assert_eq!(c.total_analyses, 5);
        assert_eq!(c.alpha, 0.025);
        assert_eq!(c.spending, Spending::ObrienFleming);
        assert_eq!(c.null_delta, 0.1);
        assert_eq!(parse_monitor("5,0.05", 0.0).unwrap_err().code, 10);
        assert_eq!(parse_monitor("5,0.05,linear", 0.0).unwrap_err().code, 14);
        assert_eq!(parse_monitor("0,0.05,pocock", 0.0).unwrap_err().code, 14);
    }

    #[test]
    fn overrides_take_json_values() {
        let c = apply_overrides(
            &SimConfig::default(),
            &[
                "replications=7".into(),
                "rho=0.25".into(),
                "outcome=binary".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.replications, 7);
        assert_eq!(c.rho, 0.25);
        assert_eq!(c.outcome, OutcomeType::Binary);
        assert!(apply_overrides(&c, &["rho".into()]).is_err());
        assert!(apply_overrides(&c, &["replications=-1".into()]).is_err());
    }
}
