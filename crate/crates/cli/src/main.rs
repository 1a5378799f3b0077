use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cosafed_core::experiment::{self, GridFile, MnistData};
use cosafed_core::{Error, ExperimentConfig, MethodStrategy, Overrides, PartitionMode, Result};
use log::info;

#[derive(Parser)]
#[command(
    name = "cosafed",
    version,
    about = "Federated learning with adaptive differential-privacy budgets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its metrics.
    Run(RunArgs),
    /// Run a grid of configurations and write a summary table.
    Matrix(MatrixArgs),
    /// Relative difference in total privacy budget between finished runs.
    Compare(CompareArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML file with experiment keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    method: Option<MethodStrategy>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    clients_per_round: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, value_parser = parse_partition)]
    partition: Option<PartitionMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Directory holding the four MNIST IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Grid file with `[base]` and `[grid]` tables.
    #[arg(
        long,
        conflicts_with = "standard_grid",
        required_unless_present = "standard_grid"
    )]
    grid: Option<PathBuf>,
    /// The standard 30 experiments (Equal/Random × ε × N) for `--method`.
    #[arg(long)]
    standard_grid: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// `summary.txt` of the run being compared.
    target: PathBuf,
    /// One or more reference `summary.txt` files.
    #[arg(required = true)]
    references: Vec<PathBuf>,
}

fn parse_method(s: &str) -> std::result::Result<MethodStrategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_partition(s: &str) -> std::result::Result<PartitionMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "equal" => Ok(PartitionMode::Equal),
        "random" => Ok(PartitionMode::Random),
        other => Err(format!(
            "unknown partition `{other}` (expected equal or random)"
        )),
    }
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            method: self.method,
            epsilon: self.epsilon,
            clients_per_round: self.clients_per_round,
            rounds: self.rounds,
            partition: self.partition,
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            data_dir: self.data_dir.clone(),
        }
    }

    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&self.overrides())?;
        Ok(cfg)
    }
}

fn load_data(dir: &Path) -> Result<MnistData> {
    info!("loading MNIST from {}", dir.display());
    MnistData::load(dir)
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    info!("configuration:\n{}", cfg.to_toml_string());
    let data = load_data(&cfg.data_dir)?;
    let out = experiment::run_experiment(&cfg, &data)?;
    let s = &out.summary;
    println!(
        "{} {} N={} eps={}: total_privacy_budget={} best_acc={}",
        s.label,
        s.method_name,
        s.clients_per_round,
        s.epsilon,
        s.total_privacy_budget,
        experiment::fmt_sig6(s.best_acc)
    );
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

fn matrix(args: MatrixArgs) -> Result<()> {
    let (base, grid) = match &args.grid {
        Some(path) => GridFile::from_file(path)?.expand(&args.common.overrides())?,
        None => {
            let base = args.common.resolve()?;
            let grid = experiment::standard_grid(&base, base.method)?;
            (base, grid)
        }
    };
    info!("{} experiments", grid.len());
    let data = load_data(&base.data_dir)?;
    let rows = experiment::run_matrix(&grid, &data, &base.out_dir)?;
    print!("{}", experiment::matrix_csv(&rows));
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} experiments failed", rows.len());
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let target = experiment::read_summary(&args.target)?;
    for path in &args.references {
        let reference = experiment::read_summary(path)?;
        let ratio = experiment::relative_difference_ratio(
            target.total_privacy_budget,
            reference.total_privacy_budget,
        )?;
        println!(
            "{} ({}) vs {} ({}): ratio={:.4} ({:.2}%)",
            target.method_name,
            target.total_privacy_budget,
            reference.method_name,
            reference.total_privacy_budget,
            ratio,
            100.0 * ratio
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Matrix(a) => matrix(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
