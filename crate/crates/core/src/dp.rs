//! Laplace mechanism, L1 clipping and the privacy ledger.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;

/// Initial per-client per-round budget and the sensitivity it is spent against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetParams {
    pub epsilon: f64,
    pub sensitivity: f64,
}

impl BudgetParams {
    pub fn new(epsilon: f64, sensitivity: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be positive and finite"));
        }
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(Error::config("sensitivity", "must be positive and finite"));
        }
        Ok(BudgetParams {
            epsilon,
            sensitivity,
        })
    }

    /// Laplace scale `Δf / ε′`.
    pub fn noise_scale(&self, epsilon_prime: f64) -> f64 {
        self.sensitivity / epsilon_prime
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::parameter(
            "scale",
            format!("{scale} is not positive and finite"),
        ));
    }
    Ok(())
}

/// Maps `u ∈ (-1/2, 1/2)` to a Laplace(0, `scale`) variate by inverting the CDF.
#[inline]
pub fn laplace_from_uniform(u: f64, scale: f64) -> f64 {
    debug_assert!(u.abs() < 0.5);
    -scale * u.signum() * (-2.0 * u.abs()).ln_1p()
}

fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        // random::<f64>() lies in [0, 1); rejecting 0 keeps |u| < 1/2
        let x: f64 = rng.random();
        if x > 0.0 {
            return x - 0.5;
        }
    }
}

/// One Laplace(0, `scale`) draw.
pub fn laplace_sample<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Result<f64> {
    check_scale(scale)?;
    Ok(laplace_from_uniform(open_uniform(rng), scale))
}

/// `dim` independent Laplace(0, `scale`) draws.
pub fn noise_vector<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Result<ParamVector> {
    check_scale(scale)?;
    if dim == 0 {
        return Err(Error::parameter("dim", "must be at least 1"));
    }
    Ok(ParamVector::from_vec(
        (0..dim)
            .map(|_| laplace_from_uniform(open_uniform(rng), scale))
            .collect(),
    ))
}

/// Rescales `update` so its L1 norm is at most `clip_norm`.
pub fn clip_update(update: &ParamVector, clip_norm: f64) -> Result<ParamVector> {
    if clip_norm.is_nan() || clip_norm <= 0.0 {
        return Err(Error::parameter("clip_norm", "must be positive"));
    }
    let norm = update.l1_norm();
    if norm <= clip_norm {
        return Ok(update.clone());
    }
    Ok(update.scaled(clip_norm / norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub client_id: usize,
    pub epsilon_spent: f64,
}

/// Append-only record of every budget spent.
///
/// `cap` is the largest single spend the ledger accepts; for the adaptive
/// method and the fixed baseline this is the initial ε.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    cap: f64,
    entries: Vec<LedgerEntry>,
}

impl PrivacyLedger {
    pub fn new(cap: f64) -> Self {
        PrivacyLedger {
            cap,
            entries: Vec::new(),
        }
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn record(&mut self, round: usize, client_id: usize, epsilon_spent: f64) -> Result<()> {
        if round < 1 {
            return Err(Error::Ledger(format!("round {round} is not >= 1")));
        }
        if !(epsilon_spent >= 0.0 && epsilon_spent <= self.cap) {
            return Err(Error::Ledger(format!(
                "spend {epsilon_spent} for client {client_id} in round {round} outside [0, {}]",
                self.cap
            )));
        }
        // entries arrive grouped by round, so only the current round needs checking
        let duplicate = self
            .entries
            .iter()
            .rev()
            .take_while(|e| e.round >= round)
            .any(|e| e.round == round && e.client_id == client_id);
        if duplicate {
            return Err(Error::Ledger(format!(
                "duplicate entry for client {client_id} in round {round}"
            )));
        }
        if self.entries.last().is_some_and(|e| e.round > round) {
            return Err(Error::Ledger(format!(
                "round {round} recorded after round {}",
                self.entries.last().map_or(0, |e| e.round)
            )));
        }
        self.entries.push(LedgerEntry {
            round,
            client_id,
            epsilon_spent,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.epsilon_spent).sum()
    }

    pub fn round_total(&self, round: usize) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.round == round)
            .map(|e| e.epsilon_spent)
            .sum()
    }
}
