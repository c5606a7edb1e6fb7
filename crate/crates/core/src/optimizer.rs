//! Analytic gradients of the ranking criterion and the mini-batch learner.
//!
//! Training maximises the criterion: every step moves the factors along
//! `+mu * gradient`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::comparisons::{Comparison, ComparisonSet};
use crate::error::{Error, Result};
use crate::model::{cpr_objective, item_difference, user_difference, Hyperparams, ModelParams};

/// Derivative of `ln f(c, x)` with respect to `x`: `c (1 - tanh(c x))`,
/// evaluated as `2c / (1 + e^{2cx})`.
pub fn grad_log_link(c: f64, x: f64) -> f64 {
    2.0 * c / (1.0 + (2.0 * c * x).exp())
}

/// Gradient with respect to every user and item factor row.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    rank: usize,
    users: Vec<f64>,
    items: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            rank: params.rank(),
            users: vec![0.0; params.user_factors().len()],
            items: vec![0.0; params.item_factors().len()],
        }
    }

    pub fn clear(&mut self) {
        self.users.fill(0.0);
        self.items.fill(0.0);
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.users[u * self.rank..(u + 1) * self.rank]
    }

    pub fn item(&self, m: usize) -> &[f64] {
        &self.items[m * self.rank..(m + 1) * self.rank]
    }

    pub fn user_grads(&self) -> &[f64] {
        &self.users
    }

    pub fn item_grads(&self) -> &[f64] {
        &self.items
    }

    fn matches(&self, params: &ModelParams) -> bool {
        self.rank == params.rank()
            && self.users.len() == params.user_factors().len()
            && self.items.len() == params.item_factors().len()
    }
}

/// `dst += s * (a - b)`
#[inline]
fn axpy_diff(dst: &mut [f64], s: f64, a: &[f64], b: &[f64]) {
    for (d, (x, y)) in dst.iter_mut().zip(a.iter().zip(b)) {
        *d += s * (x - y);
    }
}

/// `dst += s * a`
#[inline]
fn axpy(dst: &mut [f64], s: f64, a: &[f64]) {
    for (d, x) in dst.iter_mut().zip(a) {
        *d += s * x;
    }
}

fn check_comparison(params: &ModelParams, c: &Comparison) -> Result<()> {
    let (users, items) = match c {
        Comparison::Item(c) => ([c.user, c.user], [c.preferred, c.other]),
        Comparison::User(c) => ([c.stronger, c.weaker], [c.item, c.item]),
    };
    for u in users {
        if u >= params.num_users() {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: u,
                size: params.num_users(),
            });
        }
    }
    for m in items {
        if m >= params.num_items() {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: m,
                size: params.num_items(),
            });
        }
    }
    Ok(())
}

/// Adds the gradient of the log-likelihood of `batch` plus `prior_weight`
/// times the gradient of the log-prior (`-lambda * row` for every row) to
/// `buf`.
///
/// For a user comparison `(m, i, j)` with `s = grad_log_link(c_m, x_ijm)`:
/// `dq_m += s (p_i - p_j)`, `dp_i += s q_m`, `dp_j -= s q_m`. Item comparisons
/// `(u, k, l)` are symmetric with the roles of users and items swapped.
pub fn accumulate_gradient(
    params: &ModelParams,
    batch: &[Comparison],
    hyper: &Hyperparams,
    prior_weight: f64,
    buf: &mut GradientBuffer,
) -> Result<()> {
    if !buf.matches(params) {
        return Err(Error::DimensionMismatch(
            "gradient buffer shape differs from model".into(),
        ));
    }
    for c in batch {
        check_comparison(params, c)?;
    }
    accumulate_unchecked(params, batch, hyper, prior_weight, buf);
    Ok(())
}

fn accumulate_unchecked(
    params: &ModelParams,
    batch: &[Comparison],
    hyper: &Hyperparams,
    prior_weight: f64,
    buf: &mut GradientBuffer,
) {
    let r = params.rank();
    for c in batch {
        match c {
            Comparison::User(c) => {
                let s = grad_log_link(hyper.c_m, user_difference(params, c));
                let (q, pi, pj) = (params.item(c.item), params.user(c.stronger), params.user(c.weaker));
                axpy_diff(&mut buf.items[c.item * r..(c.item + 1) * r], s, pi, pj);
                axpy(&mut buf.users[c.stronger * r..(c.stronger + 1) * r], s, q);
                axpy(&mut buf.users[c.weaker * r..(c.weaker + 1) * r], -s, q);
            }
            Comparison::Item(c) => {
                let s = grad_log_link(hyper.c_u, item_difference(params, c));
                let (p, qk, ql) = (params.user(c.user), params.item(c.preferred), params.item(c.other));
                axpy_diff(&mut buf.users[c.user * r..(c.user + 1) * r], s, qk, ql);
                axpy(&mut buf.items[c.preferred * r..(c.preferred + 1) * r], s, p);
                axpy(&mut buf.items[c.other * r..(c.other + 1) * r], -s, p);
            }
        }
    }
    let decay = prior_weight * hyper.lambda;
    if decay != 0.0 {
        axpy(&mut buf.users, -decay, params.user_factors());
        axpy(&mut buf.items, -decay, params.item_factors());
    }
}

/// Gradient of the full criterion (every comparison plus the whole prior).
pub fn full_gradient(params: &ModelParams, set: &ComparisonSet, hyper: &Hyperparams) -> Result<GradientBuffer> {
    params.check_compatible(set)?;
    let mut buf = GradientBuffer::zeros_like(params);
    accumulate_unchecked(params, &set.pooled(), hyper, 1.0, &mut buf);
    Ok(buf)
}

/// Factors drawn i.i.d. from `N(0, 1/rank)`, reproducibly from `seed`.
pub fn init_params(num_users: usize, num_items: usize, rank: usize, seed: u64) -> Result<ModelParams> {
    if rank == 0 {
        return Err(Error::InvalidInput("rank must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).expect("positive std");
    let users = (0..num_users * rank).map(|_| normal.sample(&mut rng)).collect();
    let items = (0..num_items * rank).map(|_| normal.sample(&mut rng)).collect();
    ModelParams::new(num_users, num_items, rank, users, items)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub max_epochs: usize,
    /// Absolute per-epoch objective gain below which training stops. `None`
    /// means `1e-6 * |initial objective|`.
    pub min_objective_gain: Option<f64>,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            min_objective_gain: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LearningRateSchedule {
    #[default]
    Constant,
    /// `mu / sqrt(epoch)`, epochs counted from 1.
    InverseSqrtEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainOptions {
    pub stopping: StoppingRule,
    pub schedule: LearningRateSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Full objective before training, then after every epoch.
    pub objective_trace: Vec<f64>,
    pub final_params: ModelParams,
    pub rng_seed: u64,
}

#[derive(Serialize)]
struct TraceJson<'a> {
    epochs_run: usize,
    rng_seed: u64,
    objective_trace: &'a [f64],
}

impl TrainReport {
    /// Epoch count, seed and objective trace as JSON. Factors are saved
    /// separately through [`crate::model::save_params`].
    pub fn trace_json(&self) -> String {
        serde_json::to_string_pretty(&TraceJson {
            epochs_run: self.epochs_run,
            rng_seed: self.rng_seed,
            objective_trace: &self.objective_trace,
        })
        .expect("trace serializes")
    }
}

/// Initialises factors from `hyper.seed` and trains on `set`.
pub fn train(set: &ComparisonSet, hyper: &Hyperparams, options: &TrainOptions) -> Result<TrainReport> {
    let init = init_params(set.num_users(), set.num_items(), hyper.rank, hyper.seed)?;
    train_from(init, set, hyper, options)
}

/// Mini-batch ascent from the given starting point.
///
/// Each epoch shuffles the pooled item and user comparisons and walks them in
/// batches of `hyper.batch_size`. Each step adds `mu` times the batch
/// log-likelihood gradient and `batch_len / total` of the prior gradient, so
/// one epoch applies the prior once.
pub fn train_from(
    mut params: ModelParams,
    set: &ComparisonSet,
    hyper: &Hyperparams,
    options: &TrainOptions,
) -> Result<TrainReport> {
    hyper.validate()?;
    params.check_compatible(set)?;
    if params.rank() != hyper.rank {
        return Err(Error::DimensionMismatch(format!(
            "model rank {} but hyperparameters ask for {}",
            params.rank(),
            hyper.rank
        )));
    }
    if set.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty comparison set".into()));
    }

    let mut pool = set.pooled();
    let total = pool.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(1);

    let initial = cpr_objective(&params, set, hyper)?;
    if !initial.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            mu: hyper.mu,
            objective: initial,
        });
    }
    let min_gain = options.stopping.min_objective_gain.unwrap_or(1e-6 * initial.abs());
    let mut trace = vec![initial];
    let mut buf = GradientBuffer::zeros_like(&params);

    for epoch in 1..=options.stopping.max_epochs {
        let mu = match options.schedule {
            LearningRateSchedule::Constant => hyper.mu,
            LearningRateSchedule::InverseSqrtEpoch => hyper.mu / (epoch as f64).sqrt(),
        };
        pool.shuffle(&mut rng);
        for batch in pool.chunks(hyper.batch_size) {
            buf.clear();
            accumulate_unchecked(&params, batch, hyper, batch.len() as f64 / total, &mut buf);
            let (users, items) = params.factors_mut();
            axpy(users, mu, &buf.users);
            axpy(items, mu, &buf.items);
        }

        let objective = cpr_objective(&params, set, hyper)?;
        if !objective.is_finite() {
            return Err(Error::Divergence { epoch, mu, objective });
        }
        let gain = objective - trace[trace.len() - 1];
        trace.push(objective);
        if gain < min_gain {
            break;
        }
    }

    Ok(TrainReport {
        epochs_run: trace.len() - 1,
        objective_trace: trace,
        final_params: params,
        rng_seed: hyper.seed,
    })
}
