//! Federated training loop.
//!
//! Each round selects `N` of `M` clients, trains each locally from the
//! current global model, decides a per-client budget ε′ according to the
//! active [`MethodStrategy`], uploads a clipped, optionally cosine-scaled and
//! Laplace-noised update, and aggregates the uploads FedAvg-style:
//!
//! ```text
//! A_t = A_{t-1} − Σ_i w_i·Q_i,   w_i = |D_i| / Σ_j |D_j|
//! ```
//!
//! Per-client work runs in parallel. Every random draw comes from a stream
//! keyed by `(master_seed, round, client_id)`, ledger writes and the
//! aggregation sum happen in client-id order, so results do not depend on
//! the thread count.

use std::fmt;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjust::{self, AdjustmentInput, ScoreBreakdown};
use crate::data::{self, Partition, PartitionMode};
use crate::dp::{self, BudgetParams, PrivacyLedger};
use crate::error::{Error, Result};
use crate::model::{self, Initialization, LabeledExample, ModelShape, SgdConfig, TrainContext};
use crate::params::{cosine_similarity, ParamVector};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodStrategy {
    /// Adaptive budget from cosine similarity, dataset share and score; cosine-scaled uploads.
    #[serde(alias = "cosafed")]
    CosAFed,
    /// Constant ε every round (LAPFed baseline).
    #[serde(alias = "lapfed", alias = "fixed")]
    FixedBudget,
    /// Same score, constant coefficient when the score exceeds 50 (ADPFL-style).
    #[serde(alias = "adpfl")]
    ScoreFixedP,
    /// Budget from the similarity of consecutive global models (cosFed-style).
    #[serde(alias = "cosfed")]
    CosineOnly,
}

impl MethodStrategy {
    pub const ALL: [MethodStrategy; 4] = [
        MethodStrategy::CosAFed,
        MethodStrategy::FixedBudget,
        MethodStrategy::ScoreFixedP,
        MethodStrategy::CosineOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodStrategy::CosAFed => "cos-a-fed",
            MethodStrategy::FixedBudget => "fixed-budget",
            MethodStrategy::ScoreFixedP => "score-fixed-p",
            MethodStrategy::CosineOnly => "cosine-only",
        }
    }

    /// Name of the published method the strategy stands in for.
    pub fn display_name(self) -> &'static str {
        match self {
            MethodStrategy::CosAFed => "cosAFed",
            MethodStrategy::FixedBudget => "LAPFed",
            MethodStrategy::ScoreFixedP => "ADPFL",
            MethodStrategy::CosineOnly => "cosFed",
        }
    }

    /// Largest single spend the ledger will accept.
    pub fn ledger_cap(self, epsilon: f64) -> f64 {
        match self {
            MethodStrategy::CosineOnly => 2.0 * epsilon,
            _ => epsilon,
        }
    }
}

impl fmt::Display for MethodStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "cos-a-fed" | "cosafed" => Ok(MethodStrategy::CosAFed),
            "fixed-budget" | "fixed" | "lapfed" => Ok(MethodStrategy::FixedBudget),
            "score-fixed-p" | "adpfl" => Ok(MethodStrategy::ScoreFixedP),
            "cosine-only" | "cosfed" => Ok(MethodStrategy::CosineOnly),
            other => Err(Error::config("method", format!("unknown method `{other}`"))),
        }
    }
}

/// Switches used by tests to strip the privacy machinery away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadHooks {
    pub add_noise: bool,
    pub force_unit_scaling: bool,
}

impl Default for UploadHooks {
    fn default() -> Self {
        UploadHooks {
            add_noise: true,
            force_unit_scaling: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub method: MethodStrategy,
    pub budget: BudgetParams,
    pub total_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub partition: PartitionMode,
    pub partition_seed: u64,
    pub min_shard_size: usize,
    pub sgd: SgdConfig,
    pub master_seed: u64,
    /// ε′ is never allowed below `epsilon_floor_fraction · ε`.
    pub epsilon_floor_fraction: f64,
    /// Clip each update to L1 norm Δf before scaling.
    pub clip: bool,
    /// Constant coefficient for [`MethodStrategy::ScoreFixedP`].
    pub fixed_p: f64,
    pub init: Initialization,
    pub hooks: UploadHooks,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            method: MethodStrategy::CosAFed,
            budget: BudgetParams {
                epsilon: 100.0,
                sensitivity: 1.0,
            },
            total_clients: 100,
            clients_per_round: 3,
            rounds: 350,
            partition: PartitionMode::Equal,
            partition_seed: 1,
            min_shard_size: 100,
            sgd: SgdConfig::default(),
            master_seed: 42,
            epsilon_floor_fraction: 1e-3,
            clip: true,
            fixed_p: 0.9,
            init: Initialization::Zeros,
            hooks: UploadHooks::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        BudgetParams::new(self.budget.epsilon, self.budget.sensitivity)?;
        if self.total_clients < 1 {
            return Err(Error::config("total_clients", "must be at least 1"));
        }
        if self.clients_per_round < 1 || self.clients_per_round > self.total_clients {
            return Err(Error::config(
                "clients_per_round",
                format!(
                    "{} outside [1, total_clients={}]",
                    self.clients_per_round, self.total_clients
                ),
            ));
        }
        if !(self.sgd.learning_rate > 0.0 && self.sgd.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate",
                "must be positive and finite",
            ));
        }
        if self.sgd.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.epsilon_floor_fraction > 0.0 && self.epsilon_floor_fraction <= 1.0) {
            return Err(Error::config("epsilon_floor", "must lie in (0, 1]"));
        }
        if !(self.fixed_p > 0.0 && self.fixed_p <= 1.0) {
            return Err(Error::config("fixed_p", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn epsilon_floor(&self) -> f64 {
        self.epsilon_floor_fraction * self.budget.epsilon
    }
}

/// Uniform `N`-subset of `0..M`, sorted, determined by `(master_seed, round)`.
pub fn select_clients(
    total_clients: usize,
    clients_per_round: usize,
    round: usize,
    master_seed: u64,
) -> Result<Vec<usize>> {
    if clients_per_round < 1 || clients_per_round > total_clients {
        return Err(Error::config(
            "clients_per_round",
            format!("{clients_per_round} outside [1, total_clients={total_clients}]"),
        ));
    }
    let mut r = rng::stream(master_seed, Stream::ClientSelection, round as u64, 0);
    let mut ids = index::sample(&mut r, total_clients, clients_per_round).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// `ΔB = A_{t-1} − B_t`.
pub fn compute_update(global_prev: &ParamVector, local: &ParamVector) -> Result<ParamVector> {
    global_prev.sub(local)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UploadSettings {
    pub sensitivity: f64,
    /// L1 clip norm applied to ΔB, if any.
    pub clip_norm: Option<f64>,
    /// Multiply the update by `cos(A_{t-1}, B_t)`; otherwise by 1.
    pub scale_by_cosine: bool,
    pub add_noise: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub client_id: usize,
    pub noised_update: ParamVector,
    pub epsilon_spent: f64,
    /// Laplace scale used for this upload, `Δf / ε′`.
    pub noise_scale: f64,
    pub scaling_factor: f64,
    pub weight: f64,
}

/// Builds `Q = ∂·clip(ΔB) + Lap(0, Δf/ε′)`.
pub fn make_upload<R: rand::Rng + ?Sized>(
    client_id: usize,
    global_prev: &ParamVector,
    local: &ParamVector,
    epsilon_prime: f64,
    weight: f64,
    settings: &UploadSettings,
    rng: &mut R,
) -> Result<ClientUpload> {
    if !(epsilon_prime > 0.0 && epsilon_prime.is_finite()) {
        return Err(Error::DegenerateBudget {
            client_id,
            epsilon_prime,
        });
    }
    let scaling_factor = if settings.scale_by_cosine {
        cosine_similarity(global_prev, local)?
    } else {
        1.0
    };
    let mut update = compute_update(global_prev, local)?;
    if let Some(clip) = settings.clip_norm {
        update = dp::clip_update(&update, clip)?;
    }
    let mut q = update.scaled(scaling_factor);
    let noise_scale = settings.sensitivity / epsilon_prime;
    if settings.add_noise {
        let noise = dp::noise_vector(q.len(), noise_scale, rng)?;
        q.axpy(1.0, &noise)?;
    }
    if !q.is_finite() {
        return Err(Error::parameter(
            "noised_update",
            "contains non-finite values",
        ));
    }
    Ok(ClientUpload {
        client_id,
        noised_update: q,
        epsilon_spent: epsilon_prime,
        noise_scale,
        scaling_factor,
        weight,
    })
}

/// `A_{t-1} − Σ w_i Q_i`, summed in client-id order.
pub fn aggregate(global_prev: &ParamVector, uploads: &[ClientUpload]) -> Result<ParamVector> {
    if uploads.is_empty() {
        return Err(Error::RoundFailure {
            round: 0,
            reason: "no uploads to aggregate".into(),
        });
    }
    let mut ordered: Vec<&ClientUpload> = uploads.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let total_weight: f64 = ordered.iter().map(|u| u.weight).sum();
    if total_weight.is_nan() || total_weight <= 0.0 {
        return Err(Error::parameter(
            "weight",
            "upload weights must sum to a positive value",
        ));
    }
    let mut step = ParamVector::zeros(global_prev.len());
    for u in ordered {
        step.axpy(u.weight / total_weight, &u.noised_update)?;
    }
    global_prev.sub(&step)
}

/// Budget chosen for one client in one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetDecision {
    pub epsilon_prime: f64,
    /// Adjustment coefficient, or the strategy's effective multiplier.
    pub coefficient: f64,
    pub score: ScoreBreakdown,
    pub reduced: bool,
    /// ε′ was raised to the configured floor.
    pub floored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundInfo {
    pub client_id: usize,
    pub data_size: usize,
    pub budget: BudgetDecision,
    pub noise_scale: f64,
    pub scaling_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    /// Clients whose local training diverged; they upload nothing.
    pub dropped: Vec<usize>,
    pub clients: Vec<ClientRoundInfo>,
    pub accuracy: f64,
    pub loss: f64,
    pub round_budget_total: f64,
    pub cumulative_budget: f64,
}

impl RoundRecord {
    pub fn mean_coefficient(&self) -> f64 {
        mean(self.clients.iter().map(|c| c.budget.coefficient))
    }

    pub fn mean_score(&self) -> f64 {
        mean(self.clients.iter().map(|c| c.budget.score.total))
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        return f64::NAN;
    }
    it.sum::<f64>() / n as f64
}

#[derive(Debug, Clone)]
pub struct GlobalState {
    /// Round about to run, starting at 1.
    pub round: usize,
    pub model: ParamVector,
    pub previous_model: Option<ParamVector>,
    pub acc_history: Vec<f64>,
    pub loss_history: Vec<f64>,
    pub ledger: PrivacyLedger,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub final_model: ParamVector,
    pub records: Vec<RoundRecord>,
    pub ledger: PrivacyLedger,
}

impl TrainingOutcome {
    pub fn best_accuracy(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.accuracy)
            .fold(f64::NAN, f64::max)
    }
}

enum ClientOutcome {
    Uploaded(ClientUpload, ClientRoundInfo),
    Dropped(usize),
}

/// A configured federation over borrowed train/test data.
pub struct Simulation<'a> {
    config: EngineConfig,
    shape: ModelShape,
    train: &'a [LabeledExample],
    test: &'a [LabeledExample],
    partition: Partition,
}

impl<'a> Simulation<'a> {
    pub fn new(
        config: EngineConfig,
        shape: ModelShape,
        train: &'a [LabeledExample],
        test: &'a [LabeledExample],
    ) -> Result<Self> {
        config.validate()?;
        let shape = ModelShape::new(shape.n_features, shape.n_classes)?;
        if test.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        let partition = data::partition(
            config.partition,
            train.len(),
            config.total_clients,
            config.partition_seed,
            config.min_shard_size,
        )?;
        Ok(Simulation {
            config,
            shape,
            train,
            test,
            partition,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn initial_state(&self) -> Result<GlobalState> {
        let model = model::init_model(self.shape, self.config.master_seed, self.config.init)?;
        Ok(GlobalState {
            round: 1,
            model,
            previous_model: None,
            acc_history: Vec::new(),
            loss_history: Vec::new(),
            ledger: PrivacyLedger::new(self.config.method.ledger_cap(self.config.budget.epsilon)),
        })
    }

    fn decide_budget(
        &self,
        state: &GlobalState,
        cos_local: f64,
        data_size: usize,
    ) -> Result<BudgetDecision> {
        let cfg = &self.config;
        let epsilon = cfg.budget.epsilon;
        let input = AdjustmentInput {
            cos_sim: cos_local,
            total_clients: cfg.total_clients,
            selected_clients: cfg.clients_per_round,
            client_data_size: data_size,
            total_data_size: self.partition.total(),
            round: state.round,
            total_rounds: cfg.rounds,
            acc_history: &state.acc_history,
            loss_history: &state.loss_history,
            epsilon,
        };
        let (epsilon_prime, coefficient, score, reduced) = match cfg.method {
            MethodStrategy::CosAFed => {
                let b = adjust::adjust(&input)?;
                (b.epsilon_prime, b.coefficient, b.score, b.reduced)
            }
            MethodStrategy::FixedBudget => (epsilon, 1.0, adjust::score(&input)?, false),
            MethodStrategy::ScoreFixedP => {
                let score = adjust::score(&input)?;
                let j = adjust::adjust_budget(epsilon, cfg.fixed_p, score.total);
                (j.epsilon_prime, cfg.fixed_p, score, j.reduced)
            }
            MethodStrategy::CosineOnly => {
                // 2 − cos⁺(A_{t-1}, A_{t-2}): twice ε while the global model
                // still moves a lot, approaching ε as it settles.
                let similarity = match &state.previous_model {
                    Some(prev) => cosine_similarity(&state.model, prev)?.max(0.0),
                    None => 0.0,
                };
                let multiplier = 2.0 - similarity;
                (
                    epsilon * multiplier,
                    multiplier,
                    adjust::score(&input)?,
                    false,
                )
            }
        };
        let floor = cfg.epsilon_floor();
        let floored = epsilon_prime < floor;
        Ok(BudgetDecision {
            epsilon_prime: epsilon_prime.max(floor),
            coefficient,
            score,
            reduced,
            floored,
        })
    }

    fn client_step(&self, state: &GlobalState, client_id: usize) -> Result<ClientOutcome> {
        let cfg = &self.config;
        let round = state.round;
        let shard = &self.partition.assignments[client_id];
        let examples: Vec<&LabeledExample> = shard.iter().map(|&i| &self.train[i]).collect();
        let seed = rng::derive_seed(
            cfg.master_seed,
            Stream::LocalTraining,
            round as u64,
            client_id as u64,
        );
        let ctx = TrainContext { round, client_id };
        let local =
            match model::local_sgd_refs(&state.model, self.shape, &examples, &cfg.sgd, seed, ctx) {
                Ok(local) => local,
                Err(e @ Error::Divergence { .. }) => {
                    warn!("dropping client: {e}");
                    return Ok(ClientOutcome::Dropped(client_id));
                }
                Err(e) => return Err(e),
            };

        let cos_local = cosine_similarity(&state.model, &local)?;
        let budget = self.decide_budget(state, cos_local, shard.len())?;
        if budget.floored {
            warn!(
                "round {round} client {client_id}: budget clamped to floor {}",
                budget.epsilon_prime
            );
        }
        let settings = UploadSettings {
            sensitivity: cfg.budget.sensitivity,
            clip_norm: cfg.clip.then_some(cfg.budget.sensitivity),
            scale_by_cosine: cfg.method == MethodStrategy::CosAFed && !cfg.hooks.force_unit_scaling,
            add_noise: cfg.hooks.add_noise,
        };
        let mut noise_rng = rng::stream(
            cfg.master_seed,
            Stream::UploadNoise,
            round as u64,
            client_id as u64,
        );
        let upload = make_upload(
            client_id,
            &state.model,
            &local,
            budget.epsilon_prime,
            shard.len() as f64,
            &settings,
            &mut noise_rng,
        )?;
        let info = ClientRoundInfo {
            client_id,
            data_size: shard.len(),
            budget,
            noise_scale: upload.noise_scale,
            scaling_factor: upload.scaling_factor,
        };
        Ok(ClientOutcome::Uploaded(upload, info))
    }

    /// Runs round `state.round` and advances `state`.
    pub fn run_round(&self, state: &mut GlobalState) -> Result<RoundRecord> {
        let cfg = &self.config;
        let round = state.round;
        if round > cfg.rounds {
            return Err(Error::RoundFailure {
                round,
                reason: format!("training is configured for {} rounds", cfg.rounds),
            });
        }
        let selected = select_clients(
            cfg.total_clients,
            cfg.clients_per_round,
            round,
            cfg.master_seed,
        )?;

        let shared: &GlobalState = state;
        let outcomes: Vec<ClientOutcome> = selected
            .par_iter()
            .map(|&cid| self.client_step(shared, cid))
            .collect::<Result<_>>()?;

        let mut uploads = Vec::with_capacity(outcomes.len());
        let mut clients = Vec::with_capacity(outcomes.len());
        let mut dropped = Vec::new();
        for outcome in outcomes {
            match outcome {
                ClientOutcome::Uploaded(u, info) => {
                    uploads.push(u);
                    clients.push(info);
                }
                ClientOutcome::Dropped(id) => dropped.push(id),
            }
        }
        if uploads.is_empty() {
            return Err(Error::RoundFailure {
                round,
                reason: "every selected client diverged".into(),
            });
        }
        for u in &uploads {
            state.ledger.record(round, u.client_id, u.epsilon_spent)?;
        }
        let next = aggregate(&state.model, &uploads)?;
        let eval = model::evaluate(&next, self.shape, self.test)?;

        state.acc_history.push(eval.accuracy);
        state.loss_history.push(eval.loss);
        state.previous_model = Some(std::mem::replace(&mut state.model, next));
        state.round += 1;

        let round_budget_total: f64 = uploads.iter().map(|u| u.epsilon_spent).sum();
        let record = RoundRecord {
            round,
            selected,
            dropped,
            clients,
            accuracy: eval.accuracy,
            loss: eval.loss,
            round_budget_total,
            cumulative_budget: state.ledger.total(),
        };
        debug!(
            "round {round}: acc={:.4} loss={:.4} budget={:.3}",
            record.accuracy, record.loss, record.round_budget_total
        );
        if round % 50 == 0 || round == cfg.rounds {
            info!(
                "[{}] round {round}/{}: acc={:.4} loss={:.4} cumulative budget={:.2}",
                cfg.method.display_name(),
                cfg.rounds,
                record.accuracy,
                record.loss,
                record.cumulative_budget
            );
        }
        Ok(record)
    }

    pub fn run(&self) -> Result<TrainingOutcome> {
        let mut state = self.initial_state()?;
        let mut records = Vec::with_capacity(self.config.rounds);
        while state.round <= self.config.rounds {
            records.push(self.run_round(&mut state)?);
        }
        Ok(TrainingOutcome {
            final_model: state.model,
            records,
            ledger: state.ledger,
        })
    }
}

pub fn run_training(
    config: &EngineConfig,
    shape: ModelShape,
    train: &[LabeledExample],
    test: &[LabeledExample],
) -> Result<TrainingOutcome> {
    Simulation::new(config.clone(), shape, train, test)?.run()
}
