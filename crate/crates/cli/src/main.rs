use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nestdr::analysis::{self, AnalysisConfig, ConfigError};
use nestdr::data::{self, CohortDataset, DataError};
use nestdr::estimator::EstimateError;
use nestdr::nuisance::NuisanceError;
use nestdr::sim::{self, Misspecification, Scenario, SimError, TableLayout, Z1Kind};
use nestdr::{rng, Error};
use serde_json::json;

#[derive(Parser)]
#[command(name = "nestdr", version, about = "Doubly robust estimation for trials nested in sub-sampled cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate potential outcome means and contrasts for one dataset.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Result JSON; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        threads: Threads,
    },
    /// Run Monte Carlo replicates and write metric tables.
    Simulate {
        #[command(flatten)]
        source: ScenarioSource,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        replicates: u64,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        threads: Threads,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Layout::LongCsv)]
        layout: Layout,
        #[arg(long, value_enum, default_value_t = Misspec::None)]
        misspecification: Misspec,
    },
    /// Generate one cohort dataset from a scenario.
    Generate {
        #[command(flatten)]
        source: ScenarioSource,
        #[arg(long)]
        seed: u64,
        /// Sampling level to apply; the census is written when omitted.
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write an analysis config using the scenario's working models.
        #[arg(long)]
        config_out: Option<PathBuf>,
    },
    /// Calibrate participation and sampling intercepts to target marginals.
    SolveIntercepts {
        #[arg(long)]
        target_participation: Option<f64>,
        #[arg(long)]
        target_sampling: Option<f64>,
        #[arg(long, value_enum)]
        z1: Z1Arg,
        /// Participation intercept to use when solving for sampling only.
        #[arg(long, allow_hyphen_values = true)]
        gamma0: Option<f64>,
        #[arg(long, default_value_t = sim::DEFAULT_SOLVER_DRAWS)]
        draws: usize,
        #[arg(long, default_value_t = sim::DEFAULT_SOLVER_SEED)]
        solver_seed: u64,
        #[command(flatten)]
        threads: Threads,
    },
    /// Check a dataset against a config and print a summary.
    Validate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ScenarioSource {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Bundled scenario or grid name, e.g. `table_e3_row1`.
    #[arg(long)]
    grid: Option<String>,
}

#[derive(Args)]
struct Threads {
    /// Worker threads; defaults to all cores.
    #[arg(long, env = "NESTDR_THREADS")]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    LongCsv,
    AppendixGrid,
}

#[derive(Clone, Copy, ValueEnum)]
enum Misspec {
    None,
    WrongG,
    WrongP,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Z1Arg {
    Continuous,
    Binary,
}

/// A failure with its stable exit code and kind label.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            kind: "usage",
            message: message.into(),
        }
    }

    fn io(path: &Path, err: std::io::Error) -> Self {
        Failure {
            code: 3,
            kind: "io",
            message: format!("{}: {err}", path.display()),
        }
    }
}

fn data_code(e: &DataError) -> (u8, &'static str) {
    match e {
        DataError::MissingColumn(_) => (4, "missing_column"),
        DataError::TypeError { .. } | DataError::LengthMismatch { .. } => (5, "type_error"),
        DataError::PatternViolation { .. } => (6, "pattern_violation"),
        DataError::InvalidColumnSpec(_) | DataError::InvalidDesign(_) => (7, "config"),
        DataError::InfeasibleDesign { .. } => (10, "infeasible_design"),
        DataError::NotCensus { .. } => (9, "estimation"),
        DataError::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => (3, "io"),
        DataError::Csv(_) => (5, "type_error"),
        DataError::Io(_) => (3, "io"),
    }
}

fn nuisance_code(e: &NuisanceError) -> (u8, &'static str) {
    match e {
        NuisanceError::Glm { .. } => (8, "glm"),
        NuisanceError::Data(d) => data_code(d),
        _ => (9, "estimation"),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Data(d) => data_code(d),
            Error::Glm(_) => (8, "glm"),
            Error::Nuisance(n) => nuisance_code(n),
            Error::Estimate(EstimateError::Nuisance(n)) => nuisance_code(n),
            Error::Estimate(_) => (9, "estimation"),
            Error::Sim(SimError::Io(_)) => (3, "io"),
            Error::Sim(SimError::InvalidScenario(_) | SimError::Json(_)) => (7, "config"),
            Error::Sim(SimError::UnknownScenario(_)) => (2, "usage"),
            Error::Sim(_) => (11, "simulation"),
            Error::Config(ConfigError::Io(_)) => (3, "io"),
            Error::Config(_) => (7, "config"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

macro_rules! impl_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}
impl_from!(DataError, SimError, ConfigError);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(Failure::usage(e.to_string().trim_end())),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let obj = json!({ "error": { "code": f.code, "kind": f.kind, "message": f.message } });
    eprintln!("{obj}");
    ExitCode::from(f.code)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Estimate {
            data,
            config,
            out,
            threads,
        } => {
            init_threads(&threads)?;
            let config = AnalysisConfig::load(&config)?;
            let data = CohortDataset::load_csv(&data, &config.columns)?;
            let result = analysis::run_analysis(&data, &config)?;
            let text = serde_json::to_string_pretty(&result).expect("results serialize") + "\n";
            match out {
                Some(path) => write_atomic(&path, text.as_bytes()),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Simulate {
            source,
            replicates,
            seed,
            threads,
            out,
            layout,
            misspecification,
        } => {
            init_threads(&threads)?;
            let scenarios = load_scenarios(&source)?;
            simulate(&scenarios, replicates as usize, seed, &out, layout, misspecification)
        }
        Command::Generate {
            source,
            seed,
            q,
            out,
            config_out,
        } => {
            let mut scenarios = load_scenarios(&source)?;
            if scenarios.len() != 1 {
                return Err(Failure::usage(format!(
                    "generate needs a single scenario, got {}",
                    scenarios.len()
                )));
            }
            let scenario = scenarios.remove(0);
            let cohort = sim::generate_cohort(&scenario, &mut rng::stream(seed, 0));
            let data = match q {
                None => cohort.census(),
                Some(q) => {
                    let level = scenario.levels.iter().find(|l| l.q == q).ok_or_else(|| {
                        let known: Vec<String> = scenario.levels.iter().map(|l| l.q.to_string()).collect();
                        Failure::usage(format!("scenario has no level q = {q} (levels: {})", known.join(", ")))
                    })?;
                    cohort.subsample(&scenario, level)
                }
            };
            let mut csv = Vec::new();
            data.write_csv(&mut csv)?;
            if let Some(path) = config_out {
                let mut config = AnalysisConfig::new(sim::column_spec(), vec![0, 1]);
                config.nuisance = sim::working_models(&scenario, Misspecification::None);
                let text = serde_json::to_string_pretty(&config).expect("config serializes") + "\n";
                write_atomic(&path, text.as_bytes())?;
            }
            write_atomic(&out, &csv)
        }
        Command::SolveIntercepts {
            target_participation,
            target_sampling,
            z1,
            gamma0,
            draws,
            solver_seed,
            threads,
        } => {
            init_threads(&threads)?;
            solve_intercepts(target_participation, target_sampling, z1, gamma0, draws, solver_seed)
        }
        Command::Validate { data, config } => {
            let config = AnalysisConfig::load(&config)?;
            let data = CohortDataset::load_csv(&data, &config.columns)?;
            config.validate_against(&data)?;
            let summary = data::summarize(&data, &config.arms);
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            Ok(())
        }
    }
}

fn init_threads(threads: &Threads) -> Result<(), Failure> {
    if let Some(n) = threads.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    Ok(())
}

fn load_scenarios(source: &ScenarioSource) -> Result<Vec<Scenario>, Failure> {
    match (&source.scenario, &source.grid) {
        (Some(path), None) => Ok(vec![Scenario::load(path)?]),
        (None, Some(name)) => Ok(sim::bundled_grid(name)?),
        _ => Err(Failure::usage("exactly one of --scenario and --grid is required")),
    }
}

fn simulate(
    scenarios: &[Scenario],
    replicates: usize,
    seed: u64,
    out: &Path,
    layout: Layout,
    misspecification: Misspec,
) -> Result<(), Failure> {
    let misspecification = match misspecification {
        Misspec::None => Misspecification::None,
        Misspec::WrongG => Misspecification::WrongG,
        Misspec::WrongP => Misspecification::WrongP,
        Misspec::Both => Misspecification::Both,
    };
    let layout = match layout {
        Layout::LongCsv => TableLayout::LongCsv,
        Layout::AppendixGrid => TableLayout::AppendixGrid,
    };
    let mut tables = Vec::new();
    let mut runs = Vec::new();
    for scenario in scenarios {
        let run = sim::run_scenario(scenario, replicates, seed, misspecification)?;
        runs.push(json!({
            "scenario": run.scenario,
            "requested": run.requested,
            "failures": run.failures,
            "used": run.outcomes.len(),
        }));
        tables.push(run.metrics);
    }
    let metadata = json!({
        "seed": seed,
        "replicates": replicates,
        "misspecification": misspecification,
        "layout": layout,
        "variance_divisor": "R - 1",
        "runs": runs,
    });

    // Everything is written to a staging directory first, so a failure
    // leaves no partial output behind.
    let staging = staging_path(out);
    let result = (|| {
        let _ = fs::remove_dir_all(&staging);
        fs::create_dir_all(&staging).map_err(|e| Failure::io(&staging, e))?;
        let mut files = sim::emit_tables(&tables, layout, &staging)?;
        let meta_path = staging.join("metadata.json");
        let text = serde_json::to_string_pretty(&metadata).expect("metadata serializes") + "\n";
        fs::write(&meta_path, text).map_err(|e| Failure::io(&meta_path, e))?;
        files.push(meta_path);
        fs::create_dir_all(out).map_err(|e| Failure::io(out, e))?;
        for f in files {
            let target = out.join(f.file_name().expect("file name"));
            fs::rename(&f, &target).map_err(|e| Failure::io(&target, e))?;
        }
        Ok(())
    })();
    let _ = fs::remove_dir_all(&staging);
    result
}

fn solve_intercepts(
    target_participation: Option<f64>,
    target_sampling: Option<f64>,
    z1: Z1Arg,
    gamma0: Option<f64>,
    draws: usize,
    seed: u64,
) -> Result<(), Failure> {
    if target_participation.is_none() && target_sampling.is_none() {
        return Err(Failure::usage(
            "give --target-participation, --target-sampling or both",
        ));
    }
    if target_sampling.is_some() && target_participation.is_none() && gamma0.is_none() {
        return Err(Failure::usage(
            "--target-sampling needs --gamma0 or --target-participation",
        ));
    }
    if draws == 0 {
        return Err(Failure::usage("--draws must be at least 1"));
    }
    let kind = match z1 {
        Z1Arg::Continuous => Z1Kind::Continuous,
        Z1Arg::Binary => Z1Kind::Binary,
    };
    let solver = sim::InterceptSolver::new(kind, draws, seed);
    let mut out = json!({ "z1_kind": kind, "draws": draws, "seed": seed });
    let gamma0 = match target_participation {
        Some(t) => {
            let g = solver.solve_participation(t)?;
            out["participation"] = json!({
                "target": t,
                "gamma0": g,
                "achieved": solver.participation_marginal(g),
            });
            g
        }
        None => gamma0.expect("checked above"),
    };
    if let Some(t) = target_sampling {
        let z = solver.solve_sampling(t, gamma0)?;
        out["sampling"] = json!({
            "target": t,
            "gamma0": gamma0,
            "zeta0": z,
            "achieved": solver.sampling_marginal(gamma0, z),
        });
    }
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

fn staging_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

/// Writes through a sibling temporary file and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let tmp = staging_path(path);
    if let Err(e) = fs::write(&tmp, bytes) {
        let _ = fs::remove_file(&tmp);
        return Err(Failure::io(path, e));
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Failure::io(path, e)
    })
}
