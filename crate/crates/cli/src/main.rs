use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mpca::analyze::{analyze, write_analysis, AnalyzeConfig};
use mpca::inference::RegimeChoice;
use mpca::io::{read_json, read_long_csv_path};
use mpca::oracle::{oracle_check, OracleHook};
use mpca::simulate::{export_replicate, simulate_to_dir, RunConfig};
use mpca::MpcaError;

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_ORACLE: u8 = 3;

#[derive(Parser)]
#[command(name = "mpca", version, about = "Multiway principal components with debiased inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo experiments on a spiked model.
    Simulate(SimulateArgs),
    /// Fit and form intervals on a long-format CSV array.
    Analyze(AnalyzeArgs),
    /// Cross-check the estimators against dense solvers and grid search.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// paper-low, paper-high, paper-poisson-low or paper-poisson-high
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// JSON run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    /// Base seed; replicate j uses seed + j
    #[arg(long, env = "MPCA_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    regime: Option<RegimeChoice>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value = "mpca-out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also write replicate 0's data (data.csv) and fit (components.json)
    #[arg(long)]
    export_data: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated dimensions, observation mode first
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// JSON analysis configuration; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    regime: Option<RegimeChoice>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Log-transform positive values
    #[arg(long)]
    log: bool,
    /// Center and scale each series to mean absolute deviation 1
    #[arg(long)]
    mad: bool,
    /// Center each series
    #[arg(long)]
    center: bool,
    /// Drop observations with a larger fraction of missing cells
    #[arg(long)]
    missing_threshold: Option<f64>,
    /// Data modes (1-based, observation mode excluded) defining a series
    #[arg(long, value_delimiter = ',')]
    series_modes: Option<Vec<usize>>,
    #[arg(long, env = "MPCA_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long, default_value = "mpca-out")]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    /// Test hook: perturb every ALS solution before checking it
    #[arg(long, hide = true)]
    corrupt_als: bool,
}

fn simulate(args: SimulateArgs) -> Result<(), MpcaError> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(p), None) => RunConfig::preset(p)?,
        (None, Some(path)) => read_json::<RunConfig>(path)?,
        (None, None) => return Err(MpcaError::Config("give --preset or --config".into())),
        (Some(_), Some(_)) => unreachable!("clap rejects both"),
    };
    if let Some(r) = args.reps {
        cfg.replicates = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.regime {
        cfg.regime = r;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    cfg.validate()?;
    let report = simulate_to_dir(&cfg, &args.out, args.jobs)?;
    if args.export_data {
        export_replicate(&cfg, 0, &args.out)?;
    }
    println!(
        "{} replicates ({} failed), regime {}, output in {}",
        report.replicates.len(),
        report.failed,
        report.regime,
        args.out.display()
    );
    println!("k  q  coord  truth      coverage  n*var    n*var(theory)");
    for s in report.summaries.iter().filter(|s| s.regime == report.regime) {
        println!(
            "{:<2} {:<2} {:<6} {:<10.6} {:<9.3} {:<8.4} {:.4}",
            s.k,
            s.q,
            s.coord,
            s.truth,
            s.coverage(),
            s.n_var,
            s.n_var_theory
        );
    }
    Ok(())
}

fn analyze_cmd(args: AnalyzeArgs) -> Result<(), MpcaError> {
    let mut cfg = match &args.config {
        Some(path) => read_json::<AnalyzeConfig>(path)?,
        None => AnalyzeConfig::new(args.r.ok_or_else(|| MpcaError::Config("--r is required".into()))?),
    };
    if let Some(r) = args.r {
        cfg.r = r;
    }
    if let Some(r) = args.regime {
        cfg.regime = r;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    cfg.log_transform |= args.log;
    cfg.mad_standardize |= args.mad;
    cfg.center |= args.center;
    if let Some(t) = args.missing_threshold {
        cfg.drop_missing_threshold = t;
    }
    if let Some(m) = args.series_modes {
        cfg.series_modes = m;
    }
    if let Some(s) = args.seed {
        cfg.als.seed = s;
    }
    if let Some(r) = args.restarts {
        cfg.als.n_restarts = r;
    }
    let array = read_long_csv_path(&args.input, args.dims.as_deref())?;
    let out = analyze(&array, &cfg)?;
    write_analysis(&out, &args.out)?;
    let rep = &out.report;
    println!(
        "n = {} (dropped {}), dims {:?}, regime {}, output in {}",
        rep.n,
        rep.preprocessing.dropped_observations.len(),
        rep.dims,
        rep.regime,
        args.out.display()
    );
    for c in &rep.components {
        println!(
            "component {}: sigma^2 = {:.6}, heuristic share {:.4}{}",
            c.k,
            c.sigma_sq_hat,
            c.heuristic_share,
            if c.clipped { " (clipped)" } else { "" }
        );
    }
    if !rep.unavailable.is_empty() {
        eprintln!("{} coordinates without intervals", rep.unavailable.len());
    }
    Ok(())
}

fn run() -> Result<ExitCode, MpcaError> {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return Ok(ExitCode::from(code));
        }
    };
    match cli.command {
        Command::Simulate(a) => simulate(a)?,
        Command::Analyze(a) => analyze_cmd(a)?,
        Command::OracleCheck(a) => {
            let hook = if a.corrupt_als { OracleHook::CorruptAls } else { OracleHook::None };
            let report = match oracle_check(hook) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return Ok(ExitCode::from(EXIT_ORACLE));
                }
            };
            print!("{}", report.table());
            if !report.all_passed() {
                return Ok(ExitCode::from(EXIT_ORACLE));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_NUMERICAL })
        }
    }
}
