//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits nonzero if any criterion fails.
//!
//! Needs MNIST in `$MNIST_DIR` (default `<workspace>/data/mnist`).

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    blobs, noiseless, oracle_adjust, reference_fedavg, toy_config, RandomInput, TOY_SHAPE,
};
use cosafed_core::adjust::{adjust, AdjustmentInput};
use cosafed_core::dp::laplace_sample;
use cosafed_core::engine::{MethodStrategy, Simulation, TrainingOutcome};
use cosafed_core::experiment::{
    self, relative_difference_ratio, rounds_csv, ExperimentConfig, MnistData,
};
use cosafed_core::model::{batch_gradient, mean_loss};
use cosafed_core::{rng, run_training, LabeledExample, ModelShape, ParamVector, PartitionMode};
use rand::Rng;

const FIXED_TOTAL: f64 = 105_000.0;
const COS_ACC: f64 = 0.8024;
const FIXED_ACC: f64 = 0.8195;
const ACC_BAND: f64 = 0.04;

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2}. {name}: {detail}");
        if !pass {
            self.failures += 1;
        }
    }
}

struct Run {
    outcome: TrainingOutcome,
    elapsed: Duration,
}

fn mnist_run(data: &MnistData, method: MethodStrategy) -> Run {
    let cfg = ExperimentConfig {
        method,
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let out = experiment::simulate(&cfg, data).expect("MNIST run");
    Run {
        outcome: out.outcome,
        elapsed: start.elapsed(),
    }
}

/// Windows ending at rounds 51..=200 compared with the window one round earlier.
fn moving_average_drops(acc: &[f64]) -> Vec<(usize, f64)> {
    let ma: Vec<f64> = (50..=200.min(acc.len()))
        .map(|end| acc[end - 50..end].iter().sum::<f64>() / 50.0)
        .collect();
    ma.windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] < w[0])
        .map(|(i, w)| (i + 51, w[1] - w[0]))
        .collect()
}

fn accuracies(o: &TrainingOutcome) -> Vec<f64> {
    o.records.iter().map(|r| r.accuracy).collect()
}

struct BoundStats {
    cases: usize,
    bound_violations: Vec<String>,
    oracle_mismatches: Vec<String>,
}

fn check_case(x: &AdjustmentInput<'_>, floor_fraction: f64, stats: &mut BoundStats) {
    stats.cases += 1;
    let got = adjust(x).expect("valid input");
    let m = x.total_clients as f64;
    let score_min = (60.0 / x.total_rounds as f64).min(30.0);
    let floor = floor_fraction * x.epsilon;
    let floored = got.epsilon_prime.max(floor);
    let ok = got.coefficient >= 0.0
        && got.coefficient <= (m - 1.0).max(1.0)
        && (x.cos_sim >= 0.0 || got.coefficient == 1.0)
        && got.score.total >= score_min
        && got.score.total <= 100.0
        && got.epsilon_prime >= 0.0
        && got.epsilon_prime <= x.epsilon
        && floored >= floor
        && floored <= x.epsilon;
    if !ok && stats.bound_violations.len() < 5 {
        stats.bound_violations.push(format!(
            "{got:?} for cos={} M={} N={} t={}/{}",
            x.cos_sim, x.total_clients, x.selected_clients, x.round, x.total_rounds
        ));
    }
    let want = oracle_adjust(x);
    let same = want.coefficient.to_bits() == got.coefficient.to_bits()
        && want.score.to_bits() == got.score.total.to_bits()
        && want.epsilon_prime.to_bits() == got.epsilon_prime.to_bits();
    if !same && stats.oracle_mismatches.len() < 5 {
        stats.oracle_mismatches.push(format!(
            "oracle ({}, {}, {}) vs adjust ({}, {}, {})",
            want.coefficient,
            want.score,
            want.epsilon_prime,
            got.coefficient,
            got.score.total,
            got.epsilon_prime
        ));
    }
}

fn bound_and_oracle_suite() -> BoundStats {
    let mut stats = BoundStats {
        cases: 0,
        bound_violations: Vec::new(),
        oracle_mismatches: Vec::new(),
    };
    let mut r = rng::seeded(2024);
    for _ in 0..20_000 {
        let case = RandomInput::draw(&mut r);
        check_case(&case.input(), 1e-3, &mut stats);
    }

    // exhaustive over a small domain, including every history trend pattern
    let cosines = [-1.0, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0];
    for m in 1..=6 {
        for n in 1..=m {
            for d in 1..=6 {
                for di in 1..=d {
                    for total_rounds in 1..=6 {
                        for round in 1..=total_rounds {
                            let len = round - 1;
                            for acc_mask in 0u32..(1 << len) {
                                for loss_mask in 0u32..(1 << len) {
                                    let acc: Vec<f64> =
                                        (0..len).map(|k| f64::from((acc_mask >> k) & 1)).collect();
                                    let loss: Vec<f64> =
                                        (0..len).map(|k| f64::from((loss_mask >> k) & 1)).collect();
                                    for &cos_sim in &cosines {
                                        let x = AdjustmentInput {
                                            cos_sim,
                                            total_clients: m,
                                            selected_clients: n,
                                            client_data_size: di,
                                            total_data_size: d,
                                            round,
                                            total_rounds,
                                            acc_history: &acc,
                                            loss_history: &loss,
                                            epsilon: 100.0,
                                        };
                                        check_case(&x, 1e-3, &mut stats);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    stats
}

fn laplace_moments() -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, b) in [0.01, 1.0, 2.0].into_iter().enumerate() {
        let mut r = rng::seeded(77 + k as u64);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| laplace_sample(b, &mut r).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let q = b * std::f64::consts::LN_2;
        let lo = xs.iter().filter(|&&x| x <= -q).count() as f64 / n as f64;
        let hi = xs.iter().filter(|&&x| x <= q).count() as f64 / n as f64;
        let rel_var = var / (2.0 * b * b) - 1.0;
        pass &= mean.abs() <= 0.005 * b.max(1.0)
            && rel_var.abs() <= 0.02
            && (lo - 0.25).abs() <= 0.005
            && (hi - 0.75).abs() <= 0.005;
        parts.push(format!(
            "b={b}: mean={mean:.2e} var_err={:.3}% F={lo:.4}/{hi:.4}",
            100.0 * rel_var
        ));
    }
    (pass, parts.join("; "))
}

fn scale_wiring_mismatches(o: &TrainingOutcome, sensitivity: f64) -> usize {
    let mut entries = o.ledger.entries().iter();
    let mut bad = 0;
    for r in &o.records {
        for c in &r.clients {
            match entries.next() {
                Some(e)
                    if e.round == r.round
                        && e.client_id == c.client_id
                        && c.noise_scale == sensitivity / e.epsilon_spent => {}
                _ => bad += 1,
            }
        }
    }
    bad + entries.count()
}

fn noiseless_recovery() -> (bool, String) {
    let (train, test) = (blobs(900, 5), blobs(150, 6));
    let mut worst_gap = 0.0f64;
    let mut mismatched_rounds = 0;
    let mut rounds = 0;
    for method in MethodStrategy::ALL {
        let mut cfg = noiseless(toy_config(method, 20));
        cfg.partition = PartitionMode::Random;
        let sim = Simulation::new(cfg.clone(), TOY_SHAPE, &train, &test).unwrap();
        let mut gap = 0.0;
        let reference = reference_fedavg(
            &cfg,
            TOY_SHAPE,
            &train,
            &sim.partition().assignments,
            &mut gap,
        );
        worst_gap = worst_gap.max(gap);
        let mut state = sim.initial_state().unwrap();
        for expected in &reference {
            sim.run_round(&mut state).unwrap();
            rounds += 1;
            if &state.model != expected {
                mismatched_rounds += 1;
            }
        }
    }
    (
        worst_gap <= 1e-9 && mismatched_rounds == 0,
        format!("max |aggregate − weighted mean| = {worst_gap:.1e}; {mismatched_rounds}/{rounds} rounds differ from reference FedAvg"),
    )
}

fn gradient_check() -> (bool, String) {
    let shape = ModelShape::new(6, 4).unwrap();
    let mut r = rng::seeded(8);
    let data: Vec<LabeledExample> = (0..5)
        .map(|i| LabeledExample {
            features: (0..6).map(|_| r.random_range(-1.0..1.0)).collect(),
            label: i % 4,
        })
        .collect();
    let params = ParamVector::from_vec(
        (0..shape.param_len())
            .map(|_| r.random_range(-0.5..0.5))
            .collect(),
    );
    let refs: Vec<&LabeledExample> = data.iter().collect();
    let mut grad = ParamVector::zeros(shape.param_len());
    batch_gradient(&params, shape, &refs, &mut grad);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for j in 0..shape.param_len() {
        let mut plus = params.clone();
        plus.as_mut_slice()[j] += h;
        let mut minus = params.clone();
        minus.as_mut_slice()[j] -= h;
        let numeric =
            (mean_loss(&plus, shape, &data) - mean_loss(&minus, shape, &data)) / (2.0 * h);
        worst = worst.max((grad[j] - numeric).abs() / grad[j].abs().max(numeric.abs()).max(1e-8));
    }
    (
        worst < 1e-4,
        format!(
            "max relative error {worst:.2e} over {} coordinates",
            shape.param_len()
        ),
    )
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn main() -> ExitCode {
    let mut report = Report { failures: 0 };
    let data = MnistData::load(&common::mnist_dir()).expect("load MNIST");
    let defaults = ExperimentConfig::default();
    println!(
        "MNIST runs: eps={} N={} M={} T={} lr={} batch={} epochs={} seed={}",
        defaults.epsilon,
        defaults.clients_per_round,
        defaults.total_clients,
        defaults.rounds,
        defaults.learning_rate,
        defaults.batch_size,
        defaults.local_epochs,
        defaults.seed
    );
    let fixed = mnist_run(&data, MethodStrategy::FixedBudget);
    let cos = mnist_run(&data, MethodStrategy::CosAFed);
    let adpfl = mnist_run(&data, MethodStrategy::ScoreFixedP);
    let cosfed = mnist_run(&data, MethodStrategy::CosineOnly);
    let total = |r: &Run| r.outcome.ledger.total();

    report.check(
        1,
        "fixed-budget total",
        total(&fixed) == FIXED_TOTAL && fixed.elapsed < Duration::from_secs(600),
        format!(
            "total={} (want {FIXED_TOTAL}), runtime {:.1}s",
            total(&fixed),
            fixed.elapsed.as_secs_f64()
        ),
    );

    let ratio = relative_difference_ratio(total(&cos), FIXED_TOTAL).unwrap();
    report.check(
        2,
        "budget reduction band",
        total(&cos) < FIXED_TOTAL && (0.05..=0.25).contains(&ratio),
        format!(
            "total={:.2} ratio={ratio:.4} (want [0.05, 0.25])",
            total(&cos)
        ),
    );

    let cos_best = cos.outcome.best_accuracy();
    let fixed_best = fixed.outcome.best_accuracy();
    let cos_drops = moving_average_drops(&accuracies(&cos.outcome));
    let fixed_drops = moving_average_drops(&accuracies(&fixed.outcome));
    report.check(
        3,
        "accuracy band and trend",
        (cos_best - COS_ACC).abs() <= ACC_BAND
            && (fixed_best - FIXED_ACC).abs() <= ACC_BAND
            && cos_drops.is_empty()
            && fixed_drops.is_empty(),
        format!(
            "cosAFed best={:.2}% (want 80.24±4), LAPFed best={:.2}% (want 81.95±4), 50-round MA drops in rounds 1-200: cosAFed {:?} LAPFed {:?}",
            100.0 * cos_best,
            100.0 * fixed_best,
            cos_drops,
            fixed_drops
        ),
    );

    let stats = bound_and_oracle_suite();
    let floor = defaults.epsilon_floor * defaults.epsilon;
    let engine_out_of_range: usize = [&cos, &adpfl]
        .iter()
        .map(|r| {
            r.outcome
                .ledger
                .entries()
                .iter()
                .filter(|e| !(e.epsilon_spent >= floor && e.epsilon_spent <= defaults.epsilon))
                .count()
        })
        .sum();
    report.check(
        4,
        "coefficient, score and budget bounds",
        stats.bound_violations.is_empty() && engine_out_of_range == 0,
        format!(
            "{} cases, violations {:?}; engine ledger entries outside [{floor}, {}]: {engine_out_of_range}",
            stats.cases, stats.bound_violations, defaults.epsilon
        ),
    );
    report.check(
        5,
        "formula oracle",
        stats.oracle_mismatches.is_empty(),
        format!(
            "{} cases, mismatches {:?}",
            stats.cases, stats.oracle_mismatches
        ),
    );

    let (moments_ok, moments) = laplace_moments();
    let wiring_bad: usize = [&fixed, &cos, &adpfl, &cosfed]
        .iter()
        .map(|r| scale_wiring_mismatches(&r.outcome, defaults.sensitivity))
        .sum();
    report.check(
        6,
        "Laplace mechanism",
        moments_ok && wiring_bad == 0,
        format!("{moments}; uploads with scale != sensitivity/eps': {wiring_bad}"),
    );

    let (ok, detail) = noiseless_recovery();
    report.check(7, "noiseless recovery", ok, detail);

    let (ok, detail) = gradient_check();
    report.check(8, "gradient check", ok, detail);

    let rerun = in_pool(4, || mnist_run(&data, MethodStrategy::CosAFed));
    let mnist_same = rounds_csv(&cos.outcome) == rounds_csv(&rerun.outcome);
    let (train, test) = (blobs(600, 3), blobs(120, 4));
    let mut toy_cfg = toy_config(MethodStrategy::CosineOnly, 30);
    toy_cfg.partition = PartitionMode::Random;
    let toy_csv = |threads| {
        in_pool(threads, || {
            rounds_csv(&run_training(&toy_cfg, TOY_SHAPE, &train, &test).unwrap())
        })
    };
    let toy_same = toy_csv(1) == toy_csv(4);
    report.check(
        9,
        "determinism",
        mnist_same && toy_same,
        format!("MNIST cosAFed CSV identical across pools: {mnist_same}; synthetic 1 vs 4 threads: {toy_same}"),
    );

    let (c, f, a, o) = (total(&cosfed), total(&fixed), total(&adpfl), total(&cos));
    report.check(
        10,
        "comparator ordering",
        c > f && f > a && a > o,
        format!("cosFed {c:.2} > LAPFed {f:.2} > ADPFL {a:.2} > cosAFed {o:.2}"),
    );

    println!("{} of 10 criteria passed", 10 - report.failures);
    if report.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
