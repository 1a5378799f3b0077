//! Experiment configuration, matrix runs and metric files.
//!
//! A run directory contains:
//!
//! * `config.toml`: the fully materialized configuration;
//! * `rounds.csv`: `round,accuracy,loss,round_budget_total,cumulative_budget,mean_p,mean_score`;
//! * `summary.txt`: one `key = value` line per [`SummaryRow`] field;
//! * `accuracy.dat`, `loss.dat`, `budget.dat`: whitespace-separated `round value` pairs.
//!
//! Metrics print with six significant digits. Budget columns print the
//! shortest string that round-trips, so the CSV sums back to the ledger total.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, PartitionMode, Split};
use crate::dp::BudgetParams;
use crate::engine::{self, EngineConfig, MethodStrategy, TrainingOutcome, UploadHooks};
use crate::error::{Error, Result};
use crate::model::{Initialization, ModelShape, SgdConfig};

pub const ROUNDS_CSV_HEADER: &str =
    "round,accuracy,loss,round_budget_total,cumulative_budget,mean_p,mean_score";

/// One experiment, as read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Experiment number such as `1-1`.
    pub label: String,
    pub method: MethodStrategy,
    pub epsilon: f64,
    pub sensitivity: f64,
    pub total_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub partition: PartitionMode,
    pub partition_seed: u64,
    pub min_shard_size: usize,
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub epsilon_floor: f64,
    pub clip: bool,
    pub fixed_p: f64,
    /// Standard deviation for gaussian initialization; zeros when absent.
    pub init_std: Option<f64>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let engine = EngineConfig::default();
        ExperimentConfig {
            label: "run".into(),
            method: engine.method,
            epsilon: engine.budget.epsilon,
            sensitivity: engine.budget.sensitivity,
            total_clients: engine.total_clients,
            clients_per_round: engine.clients_per_round,
            rounds: engine.rounds,
            partition: engine.partition,
            partition_seed: engine.partition_seed,
            min_shard_size: engine.min_shard_size,
            learning_rate: engine.sgd.learning_rate,
            local_epochs: engine.sgd.local_epochs,
            batch_size: engine.sgd.batch_size,
            seed: engine.master_seed,
            epsilon_floor: engine.epsilon_floor_fraction,
            clip: engine.clip,
            fixed_p: engine.fixed_p,
            init_std: None,
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs/run"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub method: Option<MethodStrategy>,
    pub epsilon: Option<f64>,
    pub clients_per_round: Option<usize>,
    pub rounds: Option<usize>,
    pub partition: Option<PartitionMode>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = unknown_field(&msg).unwrap_or_else(|| "config".into());
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(m) = o.method {
            self.method = m;
        }
        if let Some(e) = o.epsilon {
            self.epsilon = e;
        }
        if let Some(n) = o.clients_per_round {
            self.clients_per_round = n;
        }
        if let Some(t) = o.rounds {
            self.rounds = t;
        }
        if let Some(p) = o.partition {
            self.partition = p;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(d) = &o.data_dir {
            self.data_dir = d.clone();
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.total_clients < 1 {
            return Err(Error::config("total_clients", "must be at least 1"));
        }
        if self.clients_per_round < 1 || self.clients_per_round > self.total_clients {
            return Err(Error::config(
                "clients_per_round",
                format!(
                    "N={} must lie in [1, total_clients={}]",
                    self.clients_per_round, self.total_clients
                ),
            ));
        }
        if self.local_epochs < 1 {
            return Err(Error::config("local_epochs", "must be at least 1"));
        }
        if let Some(std) = self.init_std {
            if !(std > 0.0 && std.is_finite()) {
                return Err(Error::config("init_std", "must be positive"));
            }
        }
        self.engine_config().validate()
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            method: self.method,
            budget: BudgetParams {
                epsilon: self.epsilon,
                sensitivity: self.sensitivity,
            },
            total_clients: self.total_clients,
            clients_per_round: self.clients_per_round,
            rounds: self.rounds,
            partition: self.partition,
            partition_seed: self.partition_seed,
            min_shard_size: self.min_shard_size,
            sgd: SgdConfig {
                learning_rate: self.learning_rate,
                local_epochs: self.local_epochs,
                batch_size: self.batch_size,
            },
            master_seed: self.seed,
            epsilon_floor_fraction: self.epsilon_floor,
            clip: self.clip,
            fixed_p: self.fixed_p,
            init: match self.init_std {
                Some(std_dev) => Initialization::Gaussian { std_dev },
                None => Initialization::Zeros,
            },
            hooks: UploadHooks::default(),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

/// Grid file: a `[base]` table of config keys and a `[grid]` table of axes.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    #[serde(default)]
    pub base: toml::Table,
    pub grid: GridAxes,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    pub methods: Vec<MethodStrategy>,
    pub partitions: Vec<PartitionMode>,
    pub epsilons: Vec<f64>,
    pub clients_per_round: Vec<usize>,
}

impl GridFile {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config("grid", e.message().to_string()))
    }

    /// Returns the base configuration (with `overrides` applied) and the
    /// expanded runs, each writing beneath the base `out_dir`.
    pub fn expand(
        &self,
        overrides: &Overrides,
    ) -> Result<(ExperimentConfig, Vec<ExperimentConfig>)> {
        let mut base: ExperimentConfig = toml::Value::Table(self.base.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("base", e.message().to_string()))?;
        base.apply(overrides)?;
        let runs = expand_grid(
            &base,
            &self.grid.partitions,
            &self.grid.epsilons,
            &self.grid.clients_per_round,
            &self.grid.methods,
        )?;
        Ok((base, runs))
    }
}

/// Cartesian product, numbered `<group>-<k>` within each partition group
/// (Equal is group 1, Random group 2), ε varying slowest.
pub fn expand_grid(
    base: &ExperimentConfig,
    partitions: &[PartitionMode],
    epsilons: &[f64],
    clients_per_round: &[usize],
    methods: &[MethodStrategy],
) -> Result<Vec<ExperimentConfig>> {
    let mut out = Vec::new();
    for &partition in partitions {
        let group = match partition {
            PartitionMode::Equal => 1,
            PartitionMode::Random => 2,
        };
        let mut k = 0;
        for &epsilon in epsilons {
            for &n in clients_per_round {
                k += 1;
                for &method in methods {
                    let mut cfg = base.clone();
                    cfg.partition = partition;
                    cfg.epsilon = epsilon;
                    cfg.clients_per_round = n;
                    cfg.method = method;
                    cfg.label = format!("{group}-{k}");
                    cfg.out_dir = base
                        .out_dir
                        .join(format!("{}_{}", cfg.label, method.as_str()));
                    cfg.validate()?;
                    out.push(cfg);
                }
            }
        }
    }
    Ok(out)
}

pub const GRID_EPSILONS: [f64; 5] = [100.0, 120.0, 150.0, 170.0, 200.0];
pub const GRID_CLIENTS: [usize; 3] = [3, 5, 7];

/// The standard 30-run grid (experiments 1-1 … 2-15) for one method.
pub fn standard_grid(
    base: &ExperimentConfig,
    method: MethodStrategy,
) -> Result<Vec<ExperimentConfig>> {
    expand_grid(
        base,
        &[PartitionMode::Equal, PartitionMode::Random],
        &GRID_EPSILONS,
        &GRID_CLIENTS,
        &[method],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub group: String,
    pub method: MethodStrategy,
    pub method_name: String,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub epsilon: f64,
    pub total_privacy_budget: f64,
    /// Best test accuracy as a fraction.
    pub best_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SummaryRow {
    pub fn from_outcome(cfg: &ExperimentConfig, outcome: &TrainingOutcome) -> Self {
        SummaryRow {
            error: None,
            total_privacy_budget: outcome.ledger.total(),
            best_acc: outcome.best_accuracy(),
            ..Self::header(cfg)
        }
    }

    fn header(cfg: &ExperimentConfig) -> Self {
        SummaryRow {
            label: cfg.label.clone(),
            group: cfg.partition.group_name().into(),
            method: cfg.method,
            method_name: cfg.method.display_name().into(),
            clients_per_round: cfg.clients_per_round,
            rounds: cfg.rounds,
            epsilon: cfg.epsilon,
            total_privacy_budget: f64::NAN,
            best_acc: f64::NAN,
            error: None,
        }
    }

    pub fn failed(cfg: &ExperimentConfig, err: &Error) -> Self {
        SummaryRow {
            error: Some(format!("[{}] {err}", err.category())),
            ..Self::header(cfg)
        }
    }

    /// `key = value` lines, parseable by [`read_summary`].
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "label = {:?}", self.label);
        let _ = writeln!(s, "group = {:?}", self.group);
        let _ = writeln!(s, "method = {:?}", self.method.as_str());
        let _ = writeln!(s, "method_name = {:?}", self.method_name);
        let _ = writeln!(s, "clients_per_round = {}", self.clients_per_round);
        let _ = writeln!(s, "rounds = {}", self.rounds);
        let _ = writeln!(s, "epsilon = {}", toml_float(&format!("{}", self.epsilon)));
        let _ = writeln!(
            s,
            "total_privacy_budget = {}",
            toml_float(&format!("{}", self.total_privacy_budget))
        );
        let _ = writeln!(s, "best_acc = {}", toml_float(&fmt_sig6(self.best_acc)));
        if let Some(e) = &self.error {
            let _ = writeln!(s, "error = {e:?}");
        }
        s
    }
}

fn toml_float(s: &str) -> String {
    match s {
        "NaN" | "nan" => "nan".into(),
        "inf" => "inf".into(),
        "-inf" => "-inf".into(),
        _ if s.contains(['.', 'e', 'E']) => s.into(),
        _ => format!("{s}.0"),
    }
}

pub fn read_summary(path: &Path) -> Result<SummaryRow> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text)
        .map_err(|e| Error::config("summary", format!("{}: {}", path.display(), e.message())))
}

/// `|a − b| / b`.
pub fn relative_difference_ratio(total_a: f64, total_b: f64) -> Result<f64> {
    if total_b.is_nan() || total_b <= 0.0 {
        return Err(Error::parameter(
            "total_b",
            "reference total must be positive",
        ));
    }
    Ok((total_a - total_b).abs() / total_b)
}

/// Formats like C's `%.6g`.
pub fn fmt_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn rounds_csv(outcome: &TrainingOutcome) -> String {
    let mut s = String::with_capacity(64 * (outcome.records.len() + 1));
    s.push_str(ROUNDS_CSV_HEADER);
    s.push('\n');
    for r in &outcome.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.round,
            fmt_sig6(r.accuracy),
            fmt_sig6(r.loss),
            r.round_budget_total,
            r.cumulative_budget,
            fmt_sig6(r.mean_coefficient()),
            fmt_sig6(r.mean_score()),
        );
    }
    s
}

fn plot_data(outcome: &TrainingOutcome, value: impl Fn(&engine::RoundRecord) -> String) -> String {
    let mut s = String::new();
    for r in &outcome.records {
        let _ = writeln!(s, "{} {}", r.round, value(r));
    }
    s
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Writes every per-run file into `out_dir`.
pub fn emit_metrics(
    cfg: &ExperimentConfig,
    outcome: &TrainingOutcome,
    summary: &SummaryRow,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(out_dir.join("config.toml"), &cfg.to_toml_string())?;
    write(out_dir.join("rounds.csv"), &rounds_csv(outcome))?;
    write(out_dir.join("summary.txt"), &summary.to_kv())?;
    write(
        out_dir.join("accuracy.dat"),
        &plot_data(outcome, |r| fmt_sig6(r.accuracy)),
    )?;
    write(
        out_dir.join("loss.dat"),
        &plot_data(outcome, |r| fmt_sig6(r.loss)),
    )?;
    write(
        out_dir.join("budget.dat"),
        &plot_data(outcome, |r| format!("{}", r.round_budget_total)),
    )?;
    Ok(())
}

/// Train and test splits of MNIST.
pub struct MnistData {
    pub train: Dataset,
    pub test: Dataset,
}

impl MnistData {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(MnistData {
            train: data::load_mnist(dir, Split::Train)?,
            test: data::load_mnist(dir, Split::Test)?,
        })
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            n_features: self.train.n_features(),
            n_classes: data::NUM_CLASSES,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub outcome: TrainingOutcome,
    pub summary: SummaryRow,
}

/// Trains one configuration without writing anything.
pub fn simulate(cfg: &ExperimentConfig, data: &MnistData) -> Result<RunOutput> {
    cfg.validate()?;
    info!(
        "running {} ({}): {}",
        cfg.label,
        cfg.method.display_name(),
        cfg.to_toml_string().replace('\n', "; ")
    );
    let outcome = engine::run_training(
        &cfg.engine_config(),
        data.shape(),
        &data.train.examples,
        &data.test.examples,
    )?;
    let summary = SummaryRow::from_outcome(cfg, &outcome);
    Ok(RunOutput { outcome, summary })
}

/// Trains one configuration and writes its files to `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, data: &MnistData) -> Result<RunOutput> {
    let out = simulate(cfg, data)?;
    emit_metrics(cfg, &out.outcome, &out.summary, &cfg.out_dir)?;
    Ok(out)
}

pub const MATRIX_CSV_HEADER: &str =
    "label,group,method,clients_per_round,rounds,epsilon,total_privacy_budget,best_acc,error";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn matrix_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(MATRIX_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            csv_field(&r.label),
            r.group,
            r.method_name,
            r.clients_per_round,
            r.rounds,
            r.epsilon,
            r.total_privacy_budget,
            fmt_sig6(r.best_acc),
            csv_field(r.error.as_deref().unwrap_or("")),
        );
    }
    s
}

/// Runs every configuration; failures are recorded in their row and do not
/// stop the matrix. Writes `summary.csv` into `out_root`.
pub fn run_matrix(
    grid: &[ExperimentConfig],
    data: &MnistData,
    out_root: &Path,
) -> Result<Vec<SummaryRow>> {
    if grid.is_empty() {
        return Err(Error::config("grid", "experiment grid is empty"));
    }
    let rows: Vec<SummaryRow> = grid
        .par_iter()
        .map(|cfg| match run_experiment(cfg, data) {
            Ok(out) => out.summary,
            Err(e) => {
                log::error!("experiment {} failed: {e}", cfg.label);
                SummaryRow::failed(cfg, &e)
            }
        })
        .collect();
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    write(out_root.join("summary.csv"), &matrix_csv(&rows))?;
    Ok(rows)
}
