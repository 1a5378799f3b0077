#![allow(dead_code)]

use std::path::PathBuf;

use cosafed_core::adjust::AdjustmentInput;
use cosafed_core::engine::{self, EngineConfig, MethodStrategy, UploadHooks};
use cosafed_core::model::{self, SgdConfig, TrainContext};
use cosafed_core::rng::{self, Stream};
use cosafed_core::{LabeledExample, ModelShape, ParamVector, PartitionMode};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// MNIST location: `$MNIST_DIR`, else `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    let dir = std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    assert!(
        dir.join("train-images-idx3-ubyte").is_file(),
        "MNIST not found in {}; run scripts/fetch_mnist.sh or set MNIST_DIR",
        dir.display()
    );
    dir
}

pub const TOY_SHAPE: ModelShape = ModelShape {
    n_features: 8,
    n_classes: 3,
};

/// Three gaussian blobs in 8 dimensions.
pub fn blobs(n: usize, seed: u64) -> Vec<LabeledExample> {
    let mut r = rng::seeded(seed);
    let noise = Normal::new(0.0, 0.6).unwrap();
    (0..n)
        .map(|i| {
            let label = i % TOY_SHAPE.n_classes;
            let features = (0..TOY_SHAPE.n_features)
                .map(|j| if j % TOY_SHAPE.n_classes == label { 1.0 } else { 0.0 } + noise.sample(&mut r))
                .collect();
            LabeledExample { features, label }
        })
        .collect()
}

pub fn toy_config(method: MethodStrategy, rounds: usize) -> EngineConfig {
    EngineConfig {
        method,
        total_clients: 10,
        clients_per_round: 3,
        rounds,
        partition: PartitionMode::Equal,
        min_shard_size: 5,
        sgd: SgdConfig {
            learning_rate: 0.1,
            local_epochs: 1,
            batch_size: 8,
        },
        ..EngineConfig::default()
    }
}

pub fn noiseless(mut cfg: EngineConfig) -> EngineConfig {
    cfg.hooks = UploadHooks {
        add_noise: false,
        force_unit_scaling: true,
    };
    cfg.clip = false;
    cfg
}

/// Budget, coefficient and score recomputed line by line from the
/// definitions, in the same floating-point evaluation order.
pub struct OracleBudget {
    pub coefficient: f64,
    pub score: f64,
    pub epsilon_prime: f64,
}

pub fn oracle_adjust(x: &AdjustmentInput<'_>) -> OracleBudget {
    let m = x.total_clients as f64;
    let n = x.selected_clients as f64;
    let share = x.client_data_size as f64 / x.total_data_size as f64;
    let coefficient = if x.cos_sim < 0.0 {
        1.0
    } else {
        (1.0 - x.cos_sim * (m / n) * share).abs()
    };

    let t = x.round;
    let loss_vote = if t >= 3 && x.loss_history[t - 2] >= x.loss_history[t - 3] {
        1.0
    } else {
        0.0
    };
    let acc_vote = if t >= 2 {
        let w = x.selected_clients.min(t - 1);
        let mut sum = 0.0;
        for k in (t - 1 - w)..(t - 1) {
            sum += x.acc_history[k];
        }
        if sum / w as f64 >= x.acc_history[t - 2] {
            1.0
        } else {
            0.0
        }
    } else {
        0.0
    };
    let round_term = if 2 * t <= x.total_rounds {
        30.0 * (2 * t) as f64 / x.total_rounds as f64
    } else {
        30.0
    };
    let score = 30.0 * loss_vote + 40.0 * acc_vote + round_term;

    let epsilon_prime = if score > 50.0 && coefficient <= 1.0 {
        coefficient * x.epsilon
    } else {
        x.epsilon
    };
    OracleBudget {
        coefficient,
        score,
        epsilon_prime,
    }
}

/// Random but valid adjustment inputs.
pub struct RandomInput {
    pub cos_sim: f64,
    pub total_clients: usize,
    pub selected_clients: usize,
    pub client_data_size: usize,
    pub total_data_size: usize,
    pub round: usize,
    pub total_rounds: usize,
    pub acc: Vec<f64>,
    pub loss: Vec<f64>,
    pub epsilon: f64,
}

impl RandomInput {
    pub fn draw<R: Rng>(r: &mut R) -> Self {
        let total_clients = r.random_range(1..=200);
        let selected_clients = r.random_range(1..=total_clients);
        let total_data_size = r.random_range(1..=60_000);
        let client_data_size = r.random_range(1..=total_data_size);
        let total_rounds = r.random_range(1..=400);
        let round = r.random_range(1..=total_rounds);
        // coarse values make ties in the history votes common
        let coarse = r.random_bool(0.5);
        let mut value = |hi: f64| {
            if coarse {
                r.random_range(0..4) as f64 * hi / 4.0
            } else {
                r.random_range(0.0..hi)
            }
        };
        let acc = (1..round).map(|_| value(1.0)).collect();
        let loss = (1..round).map(|_| value(3.0)).collect();
        let cos_sim = match r.random_range(0..6) {
            0 => -1.0,
            1 => 0.0,
            2 => 1.0,
            _ => r.random_range(-1.0..=1.0),
        };
        RandomInput {
            cos_sim,
            total_clients,
            selected_clients,
            client_data_size,
            total_data_size,
            round,
            total_rounds,
            acc,
            loss,
            epsilon: r.random_range(0.01..500.0),
        }
    }

    pub fn input(&self) -> AdjustmentInput<'_> {
        AdjustmentInput {
            cos_sim: self.cos_sim,
            total_clients: self.total_clients,
            selected_clients: self.selected_clients,
            client_data_size: self.client_data_size,
            total_data_size: self.total_data_size,
            round: self.round,
            total_rounds: self.total_rounds,
            acc_history: &self.acc,
            loss_history: &self.loss,
            epsilon: self.epsilon,
        }
    }
}

/// Textbook FedAvg over client updates, independent of the engine's
/// upload path: `A ← A − Σ (D_i/ΣD)(A − L_i)` in ascending client order.
/// Returns the model after each round and checks each aggregate against the
/// data-weighted mean of the local models.
pub fn reference_fedavg(
    cfg: &EngineConfig,
    shape: ModelShape,
    train: &[LabeledExample],
    shards: &[Vec<usize>],
    max_mean_gap: &mut f64,
) -> Vec<ParamVector> {
    let mut global = model::init_model(shape, cfg.master_seed, cfg.init).unwrap();
    let mut trajectory = Vec::new();
    for round in 1..=cfg.rounds {
        let selected = engine::select_clients(
            cfg.total_clients,
            cfg.clients_per_round,
            round,
            cfg.master_seed,
        )
        .unwrap();
        let mut locals = Vec::new();
        for &cid in &selected {
            let data: Vec<LabeledExample> = shards[cid].iter().map(|&i| train[i].clone()).collect();
            let seed = rng::derive_seed(
                cfg.master_seed,
                Stream::LocalTraining,
                round as u64,
                cid as u64,
            );
            let ctx = TrainContext {
                round,
                client_id: cid,
            };
            let local = model::local_sgd(&global, shape, &data, &cfg.sgd, seed, ctx).unwrap();
            locals.push((data.len() as f64, local));
        }
        let total: f64 = locals.iter().map(|(d, _)| d).sum();
        let a = global.as_slice();
        let mut step = vec![0.0; a.len()];
        let mut mean = vec![0.0; a.len()];
        for (d, local) in &locals {
            let w = d / total;
            for j in 0..a.len() {
                step[j] += w * (a[j] - local[j]);
                mean[j] += w * local[j];
            }
        }
        let next: Vec<f64> = a.iter().zip(&step).map(|(x, s)| x - s).collect();
        for (x, m) in next.iter().zip(&mean) {
            *max_mean_gap = max_mean_gap.max((x - m).abs());
        }
        global = ParamVector::from_vec(next);
        trajectory.push(global.clone());
    }
    trajectory
}
