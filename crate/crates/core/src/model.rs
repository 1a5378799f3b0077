//! Multinomial logistic regression trained with mini-batch SGD.
//!
//! Parameter layout inside a [`ParamVector`]: the weight matrix row-major by
//! class (`weights[k * n_features + j]`), followed by one bias per class.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{axpy, dot, ParamVector};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_features: usize,
    pub n_classes: usize,
}

impl ModelShape {
    pub const MNIST: ModelShape = ModelShape {
        n_features: 784,
        n_classes: 10,
    };

    pub fn new(n_features: usize, n_classes: usize) -> Result<Self> {
        if n_features < 1 {
            return Err(Error::config("n_features", "must be at least 1"));
        }
        if n_classes < 2 {
            return Err(Error::config("n_classes", "must be at least 2"));
        }
        Ok(ModelShape {
            n_features,
            n_classes,
        })
    }

    pub fn param_len(&self) -> usize {
        self.n_features * self.n_classes + self.n_classes
    }

    fn bias_offset(&self) -> usize {
        self.n_features * self.n_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Initialization {
    #[default]
    Zeros,
    Gaussian {
        std_dev: f64,
    },
}

pub fn init_model(shape: ModelShape, seed: u64, init: Initialization) -> Result<ParamVector> {
    let shape = ModelShape::new(shape.n_features, shape.n_classes)?;
    match init {
        Initialization::Zeros => Ok(ParamVector::zeros(shape.param_len())),
        Initialization::Gaussian { std_dev } => {
            let normal = Normal::new(0.0, std_dev)
                .map_err(|e| Error::config("init.std_dev", e.to_string()))?;
            let mut rng = rng::stream(seed, rng::Stream::ModelInit, 0, 0);
            Ok(ParamVector::from_vec(
                (0..shape.param_len())
                    .map(|_| normal.sample(&mut rng))
                    .collect(),
            ))
        }
    }
}

/// Local optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            local_epochs: 1,
            batch_size: 64,
        }
    }
}

/// Identifies the caller of [`local_sgd`] in error reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainContext {
    pub round: usize,
    pub client_id: usize,
}

/// Writes class logits for `x` into `out`.
#[inline]
fn logits_into(params: &[f64], shape: ModelShape, x: &[f64], out: &mut [f64]) {
    let f = shape.n_features;
    let bias = &params[shape.bias_offset()..];
    for (k, o) in out.iter_mut().enumerate() {
        *o = dot(&params[k * f..(k + 1) * f], x) + bias[k];
    }
}

/// In-place stabilized softmax; returns `log Σ exp(z)`.
#[inline]
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

fn check_example(shape: ModelShape, ex: &LabeledExample) -> Result<()> {
    if ex.features.len() != shape.n_features {
        return Err(Error::Shape {
            expected: shape.n_features,
            actual: ex.features.len(),
        });
    }
    if ex.label >= shape.n_classes {
        return Err(Error::parameter(
            "label",
            format!("{} outside [0, {})", ex.label, shape.n_classes),
        ));
    }
    Ok(())
}

fn check_params(shape: ModelShape, params: &ParamVector) -> Result<()> {
    if params.len() != shape.param_len() {
        return Err(Error::Shape {
            expected: shape.param_len(),
            actual: params.len(),
        });
    }
    Ok(())
}

/// Mean cross-entropy gradient over `batch`, accumulated into `grad`
/// (which is overwritten). Returns the mean loss.
pub fn batch_gradient(
    params: &ParamVector,
    shape: ModelShape,
    batch: &[&LabeledExample],
    grad: &mut ParamVector,
) -> f64 {
    let f = shape.n_features;
    let off = shape.bias_offset();
    let g = grad.as_mut_slice();
    g.iter_mut().for_each(|v| *v = 0.0);
    let mut probs = vec![0.0; shape.n_classes];
    let mut loss = 0.0;
    for ex in batch {
        logits_into(params.as_slice(), shape, &ex.features, &mut probs);
        let true_logit = probs[ex.label];
        let lse = softmax_in_place(&mut probs);
        loss += lse - true_logit;
        probs[ex.label] -= 1.0;
        for (k, &pk) in probs.iter().enumerate() {
            if pk != 0.0 {
                axpy(&mut g[k * f..(k + 1) * f], pk, &ex.features);
            }
            g[off + k] += pk;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    loss * inv
}

/// Mean cross-entropy of `params` over `data`, computed sequentially.
pub fn mean_loss(params: &ParamVector, shape: ModelShape, data: &[LabeledExample]) -> f64 {
    let mut z = vec![0.0; shape.n_classes];
    let total: f64 = data
        .iter()
        .map(|ex| {
            logits_into(params.as_slice(), shape, &ex.features, &mut z);
            let t = z[ex.label];
            softmax_in_place(&mut z) - t
        })
        .sum();
    total / data.len() as f64
}

/// Runs `local_epochs` shuffled passes of mini-batch SGD from `start`.
///
/// Shuffling depends only on `seed`, so the result is a pure function of the
/// arguments.
pub fn local_sgd(
    start: &ParamVector,
    shape: ModelShape,
    data: &[LabeledExample],
    sgd: &SgdConfig,
    seed: u64,
    ctx: TrainContext,
) -> Result<ParamVector> {
    let refs: Vec<&LabeledExample> = data.iter().collect();
    local_sgd_refs(start, shape, &refs, sgd, seed, ctx)
}

/// [`local_sgd`] over borrowed examples, so client shards need not be copied.
pub fn local_sgd_refs(
    start: &ParamVector,
    shape: ModelShape,
    data: &[&LabeledExample],
    sgd: &SgdConfig,
    seed: u64,
    ctx: TrainContext,
) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(Error::EmptyClient {
            client_id: ctx.client_id,
        });
    }
    if !(sgd.learning_rate >= 0.0 && sgd.learning_rate.is_finite()) {
        return Err(Error::parameter(
            "learning_rate",
            "must be finite and nonnegative",
        ));
    }
    if sgd.batch_size == 0 {
        return Err(Error::parameter("batch_size", "must be at least 1"));
    }
    check_params(shape, start)?;
    if let Some(ex) = data.first() {
        check_example(shape, ex)?;
    }

    let mut params = start.clone();
    if sgd.learning_rate == 0.0 || sgd.local_epochs == 0 {
        return Ok(params);
    }
    let mut grad = ParamVector::zeros(params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = rng::seeded(seed);
    let mut batch: Vec<&LabeledExample> = Vec::with_capacity(sgd.batch_size);
    for _ in 0..sgd.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(sgd.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i]));
            let loss = batch_gradient(&params, shape, &batch, &mut grad);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    round: ctx.round,
                    client_id: ctx.client_id,
                    loss,
                });
            }
            params.axpy(-sgd.learning_rate, &grad)?;
        }
    }
    if !params.is_finite() {
        return Err(Error::Divergence {
            round: ctx.round,
            client_id: ctx.client_id,
            loss: f64::NAN,
        });
    }
    Ok(params)
}

const EVAL_CHUNK: usize = 512;

/// Accuracy (argmax, lowest index wins ties) and mean cross-entropy.
///
/// Chunks are evaluated in parallel but reduced in a fixed order, so the
/// result does not depend on the thread count.
pub fn evaluate(
    params: &ParamVector,
    shape: ModelShape,
    data: &[LabeledExample],
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    check_params(shape, params)?;
    let partials: Vec<(usize, f64)> = data
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let mut z = vec![0.0; shape.n_classes];
            let mut correct = 0usize;
            let mut loss = 0.0;
            for ex in chunk {
                logits_into(params.as_slice(), shape, &ex.features, &mut z);
                let mut best = 0;
                for k in 1..z.len() {
                    if z[k] > z[best] {
                        best = k;
                    }
                }
                if best == ex.label {
                    correct += 1;
                }
                let t = z[ex.label];
                loss += softmax_in_place(&mut z) - t;
            }
            (correct, loss)
        })
        .collect();
    let (correct, loss) = partials
        .iter()
        .fold((0usize, 0.0f64), |(c, l), &(pc, pl)| (c + pc, l + pl));
    let n = data.len() as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}
