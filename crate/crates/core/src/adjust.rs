//! Per-client privacy-budget adjustment.
//!
//! Three steps: an adjustment coefficient `p` from cosine similarity, client
//! counts and dataset proportion; a score from loss trend, accuracy trend and
//! training progress; and the judgment that shrinks ε to `p·ε` only when the
//! score exceeds 50 and `p ≤ 1`.
//!
//! Bounds that hold for every valid input:
//!
//! * `p ∈ [0, max(1, M − 1)]`, and `p = 1` whenever the cosine is negative;
//! * score `∈ [60/T, 100]`;
//! * `ε′ ∈ [0, ε]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOSS_WEIGHT: f64 = 30.0;
pub const ACC_WEIGHT: f64 = 40.0;
pub const ROUND_WEIGHT: f64 = 30.0;
pub const SCORE_THRESHOLD: f64 = 50.0;

/// Everything one adjustment needs for one client in one round.
///
/// `acc_history` and `loss_history` hold the global model's test metrics for
/// rounds `1..t`, oldest first.
#[derive(Debug, Clone, Copy)]
pub struct AdjustmentInput<'a> {
    pub cos_sim: f64,
    pub total_clients: usize,
    pub selected_clients: usize,
    pub client_data_size: usize,
    pub total_data_size: usize,
    pub round: usize,
    pub total_rounds: usize,
    pub acc_history: &'a [f64],
    pub loss_history: &'a [f64],
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub score_loss: u8,
    pub score_acc: u8,
    pub score_t: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetJudgment {
    pub epsilon_prime: f64,
    pub reduced: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustedBudget {
    pub epsilon_prime: f64,
    pub coefficient: f64,
    pub score: ScoreBreakdown,
    pub reduced: bool,
}

pub fn adjustment_coefficient(
    cos_sim: f64,
    total_clients: usize,
    selected_clients: usize,
    client_data_size: usize,
    total_data_size: usize,
) -> Result<f64> {
    if selected_clients == 0 {
        return Err(Error::parameter("selected_clients", "must be at least 1"));
    }
    if total_data_size == 0 {
        return Err(Error::parameter("total_data_size", "must be at least 1"));
    }
    if cos_sim.is_nan() {
        return Err(Error::parameter("cos_sim", "is NaN"));
    }
    if cos_sim < 0.0 {
        return Ok(1.0);
    }
    let client_ratio = total_clients as f64 / selected_clients as f64;
    let data_ratio = client_data_size as f64 / total_data_size as f64;
    Ok((1.0 - cos_sim * client_ratio * data_ratio).abs())
}

/// 1 when the most recent loss did not improve on the one before it.
/// Fewer than two recorded rounds score 0.
pub fn score_loss(loss_history: &[f64]) -> u8 {
    match loss_history {
        [.., prev, last] if last >= prev => 1,
        _ => 0,
    }
}

/// 1 when the mean of the last `min(N, rounds)` accuracies is at least the
/// latest accuracy, i.e. accuracy has stopped climbing. Empty history scores 0.
pub fn score_acc(acc_history: &[f64], selected_clients: usize) -> u8 {
    let Some(&last) = acc_history.last() else {
        return 0;
    };
    let width = selected_clients.min(acc_history.len());
    if width == 0 {
        return 0;
    }
    let window = &acc_history[acc_history.len() - width..];
    let mean = window.iter().sum::<f64>() / width as f64;
    u8::from(mean >= last)
}

/// `2·min(t/T, 1/2)`.
pub fn score_round(round: usize, total_rounds: usize) -> Result<f64> {
    check_round(round, total_rounds)?;
    if 2 * round <= total_rounds {
        Ok((2 * round) as f64 / total_rounds as f64)
    } else {
        Ok(1.0)
    }
}

fn check_round(round: usize, total_rounds: usize) -> Result<()> {
    if round < 1 || round > total_rounds {
        return Err(Error::parameter(
            "round",
            format!("{round} outside [1, {total_rounds}]"),
        ));
    }
    Ok(())
}

/// Weighted sum of the three votes.
///
/// The round term is evaluated as `(30·2t)/T`, a single rounding, so the
/// first-round score is exactly `fl(60/T)` and later rounds never score less.
pub fn total_score(
    score_loss: u8,
    score_acc: u8,
    round: usize,
    total_rounds: usize,
) -> Result<ScoreBreakdown> {
    let score_t = score_round(round, total_rounds)?;
    let round_term = if 2 * round <= total_rounds {
        ROUND_WEIGHT * (2 * round) as f64 / total_rounds as f64
    } else {
        ROUND_WEIGHT
    };
    let total =
        LOSS_WEIGHT * f64::from(score_loss) + ACC_WEIGHT * f64::from(score_acc) + round_term;
    Ok(ScoreBreakdown {
        score_loss,
        score_acc,
        score_t,
        total,
    })
}

/// `p·ε` when `score > 50` and `p ≤ 1`, otherwise `ε`.
pub fn adjust_budget(epsilon: f64, coefficient: f64, score_total: f64) -> BudgetJudgment {
    if score_total > SCORE_THRESHOLD && coefficient <= 1.0 {
        BudgetJudgment {
            epsilon_prime: coefficient * epsilon,
            reduced: true,
        }
    } else {
        BudgetJudgment {
            epsilon_prime: epsilon,
            reduced: false,
        }
    }
}

/// Scores the round without the coefficient; shared with comparator strategies.
pub fn score(input: &AdjustmentInput<'_>) -> Result<ScoreBreakdown> {
    validate(input)?;
    let l = score_loss(input.loss_history);
    let a = score_acc(input.acc_history, input.selected_clients);
    total_score(l, a, input.round, input.total_rounds)
}

fn validate(input: &AdjustmentInput<'_>) -> Result<()> {
    if input.total_clients < 1 {
        return Err(Error::parameter("total_clients", "must be at least 1"));
    }
    if input.selected_clients < 1 || input.selected_clients > input.total_clients {
        return Err(Error::parameter(
            "selected_clients",
            format!(
                "{} outside [1, {}]",
                input.selected_clients, input.total_clients
            ),
        ));
    }
    if input.client_data_size < 1 || input.client_data_size > input.total_data_size {
        return Err(Error::parameter(
            "client_data_size",
            format!(
                "{} outside [1, {}]",
                input.client_data_size, input.total_data_size
            ),
        ));
    }
    if !(input.epsilon > 0.0 && input.epsilon.is_finite()) {
        return Err(Error::parameter("epsilon", "must be positive and finite"));
    }
    if !(-1.0..=1.0).contains(&input.cos_sim) {
        return Err(Error::parameter(
            "cos_sim",
            format!("{} outside [-1, 1]", input.cos_sim),
        ));
    }
    let completed = input.round.saturating_sub(1);
    if input.acc_history.len() != completed || input.loss_history.len() != completed {
        return Err(Error::parameter(
            "history",
            format!(
                "round {} needs {completed} entries, got acc={} loss={}",
                input.round,
                input.acc_history.len(),
                input.loss_history.len()
            ),
        ));
    }
    Ok(())
}

pub fn adjust(input: &AdjustmentInput<'_>) -> Result<AdjustedBudget> {
    validate(input)?;
    let coefficient = adjustment_coefficient(
        input.cos_sim,
        input.total_clients,
        input.selected_clients,
        input.client_data_size,
        input.total_data_size,
    )?;
    let score = score(input)?;
    let judgment = adjust_budget(input.epsilon, coefficient, score.total);
    Ok(AdjustedBudget {
        epsilon_prime: judgment.epsilon_prime,
        coefficient,
        score,
        reduced: judgment.reduced,
    })
}
