//! Per-example importance scores and TopK context pruning.
//!
//! The training-path scorers ([`Scorer::GradNcp`], [`Scorer::Loss`],
//! [`Scorer::Random`]) need a single forward pass. SPG and TPG take one
//! model update per example and are meant for analysis and as oracles.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::graph::{self, Tape};
use crate::nf::{Head, NeuralField, NfError, ParamVector};
use crate::signals::ContextSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("selection ratio must lie in (0, 1], got {0}")]
    Gamma(f64),
    #[error("score_gradncp needs a linear head; use score_gradncp_nonlinear for sigmoid heads")]
    NeedsLinearHead,
    #[error("score_gradncp_nonlinear needs a sigmoid head; use score_gradncp for linear heads")]
    NeedsNonlinearHead,
    #[error("step size must be positive, got {0}")]
    StepSize(f64),
    #[error("TPG costs O(M^2): context has {m} examples, bound is {bound}; use SPG instead")]
    TooLarge { m: usize, bound: usize },
    #[error(transparent)]
    Model(#[from] NfError),
}

impl From<graph::GraphError> for ScoreError {
    fn from(e: graph::GraphError) -> Self {
        ScoreError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, ScoreError>;

/// Default maximum context size accepted by [`score_tpg`].
pub const TPG_MAX_EXAMPLES: usize = 512;

/// Scores plus the TopK selection made from them.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredContext {
    pub scores: Vec<f64>,
    /// Ascending context indices, `⌈γM⌉` of them.
    pub selected: Vec<usize>,
    pub gamma: f64,
}

impl ScoredContext {
    pub fn new(scores: Vec<f64>, gamma: f64) -> Result<Self> {
        let selected = topk(&scores, gamma)?;
        Ok(ScoredContext {
            scores,
            selected,
            gamma,
        })
    }
}

/// Scorer used to rank context points during adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scorer {
    /// Last-layer gradient norm; the nonlinear form is used for sigmoid heads.
    GradNcp,
    /// Per-example squared error.
    Loss,
    /// Uniform random scores; the seed passed to [`Scorer::score`] fixes them.
    Random,
}

impl Scorer {
    pub fn name(self) -> &'static str {
        match self {
            Scorer::GradNcp => "gradncp",
            Scorer::Loss => "loss",
            Scorer::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Scorer> {
        match s {
            "gradncp" => Some(Scorer::GradNcp),
            "loss" => Some(Scorer::Loss),
            "random" => Some(Scorer::Random),
            _ => None,
        }
    }

    pub fn score<F: NeuralField + ?Sized>(
        self,
        field: &F,
        params: &ParamVector,
        ctx: &ContextSet,
        seed: u64,
    ) -> Result<Vec<f64>> {
        match self {
            Scorer::GradNcp => match field.head() {
                Head::Linear => score_gradncp(field, params, ctx),
                Head::Sigmoid => score_gradncp_nonlinear(field, params, ctx),
            },
            Scorer::Loss => score_loss(field, params, ctx),
            Scorer::Random => Ok(score_random(ctx.len(), seed)),
        }
    }
}

/// Indices of the `⌈γM⌉` highest scores, returned in ascending index order.
///
/// Ties break towards the lower index; NaN ranks below every number.
pub fn topk(scores: &[f64], gamma: f64) -> Result<Vec<usize>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(ScoreError::Gamma(gamma));
    }
    let m = scores.len();
    let k = selection_size(m, gamma);
    let key = |i: usize| {
        let s = scores[i];
        if s.is_nan() {
            f64::NEG_INFINITY
        } else {
            s
        }
    };
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// `⌈γM⌉`, with a small tolerance so products such as `0.3 · 10` do not
/// round up past the intended count.
pub fn selection_size(m: usize, gamma: f64) -> usize {
    if m == 0 {
        return 0;
    }
    let k = (gamma * m as f64 - 1e-9).ceil() as usize;
    k.clamp(1, m)
}

fn residuals_and_features<F: NeuralField + ?Sized>(
    field: &F,
    params: &ParamVector,
    ctx: &ContextSet,
) -> Result<(Array2<f64>, Vec<f64>, Array2<f64>)> {
    let fwd = field.forward(params, ctx.coords.view())?;
    let residual = &ctx.values - &fwd.output;
    let feat: Vec<f64> = fwd
        .penult
        .axis_iter(Axis(0))
        .map(|phi| (phi.iter().map(|v| v * v).sum::<f64>() + 1.0).sqrt())
        .collect();
    Ok((residual, feat, fwd.pre))
}

/// `‖(y − f(x)) [φ(x), 1]ᵀ‖_F = ‖y − f(x)‖ · √(‖φ(x)‖² + 1)` per example.
pub fn score_gradncp<F: NeuralField + ?Sized>(
    field: &F,
    params: &ParamVector,
    ctx: &ContextSet,
) -> Result<Vec<f64>> {
    if field.head() != Head::Linear {
        return Err(ScoreError::NeedsLinearHead);
    }
    let (residual, feat, _) = residuals_and_features(field, params, ctx)?;
    Ok(residual
        .axis_iter(Axis(0))
        .zip(feat)
        .map(|(r, f)| r.iter().map(|v| v * v).sum::<f64>().sqrt() * f)
        .collect())
}

/// `‖((y − f(x)) ⊙ σ′(φW + b)) [φ(x), 1]ᵀ‖_F` for a sigmoid head.
pub fn score_gradncp_nonlinear<F: NeuralField + ?Sized>(
    field: &F,
    params: &ParamVector,
    ctx: &ContextSet,
) -> Result<Vec<f64>> {
    if field.head() != Head::Sigmoid {
        return Err(ScoreError::NeedsNonlinearHead);
    }
    let (residual, feat, pre) = residuals_and_features(field, params, ctx)?;
    Ok(residual
        .axis_iter(Axis(0))
        .zip(pre.axis_iter(Axis(0)))
        .zip(feat)
        .map(|((r, z), f)| {
            let n2: f64 = r
                .iter()
                .zip(z.iter())
                .map(|(rv, zv)| {
                    let s = graph::sigmoid(*zv);
                    let d = rv * s * (1.0 - s);
                    d * d
                })
                .sum();
            n2.sqrt() * f
        })
        .collect())
}

/// `‖y − f(x)‖²` per example.
pub fn score_loss<F: NeuralField + ?Sized>(
    field: &F,
    params: &ParamVector,
    ctx: &ContextSet,
) -> Result<Vec<f64>> {
    let fwd = field.forward(params, ctx.coords.view())?;
    let residual = &ctx.values - &fwd.output;
    Ok(residual
        .axis_iter(Axis(0))
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect())
}

pub fn score_random(m: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| rng.gen::<f64>()).collect()
}

/// Which parameters a single-example SPG update touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpgMode {
    Full,
    LastLayer,
}

/// Gradient of `Σ_j ‖y_j − f(x_j)‖² / M` over `ctx`, as a parameter vector.
/// With `last_layer_only`, every other layer's gradient is zero.
pub fn loss_gradient<F: NeuralField + ?Sized>(
    field: &F,
    params: &ParamVector,
    ctx: &ContextSet,
    last_layer_only: bool,
) -> Result<(f64, ParamVector)> {
    let mut tape = Tape::new();
    let nodes = params.to_parameters(&mut tape);
    let x = tape.constant(field.encode(ctx.coords.view()).into_dyn());
    let y = tape.constant(ctx.values.clone().into_dyn());
    let out = field.build(&mut tape, &nodes, x)?.output;
    let diff = tape.sub(out, y)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    let loss = tape.scale(total, 1.0 / ctx.len() as f64)?;
    let wrt = if last_layer_only {
        let last = nodes.layers.last().expect("at least one layer");
        std::iter::once(last.weight).chain(last.bias).collect::<Vec<_>>()
    } else {
        nodes.ids()
    };
    let grads = tape.grad(loss, &wrt)?;
    let value = tape.evaluate_scalar(loss)?;
    let mut flat = Vec::with_capacity(params.len());
    if last_layer_only {
        let n_before: usize = params.layers[..params.layers.len() - 1]
            .iter()
            .map(|l| l.len())
            .sum();
        flat.resize(n_before, 0.0);
    }
    for g in grads {
        flat.extend(tape.evaluate(g)?.iter().copied());
    }
    Ok((value, params.with_flat(&flat)?))
}

fn mse<F: NeuralField + ?Sized>(field: &F, params: &ParamVector, ctx: &ContextSet) -> Result<f64> {
    if ctx.is_empty() {
        return Ok(0.0);
    }
    let out = field.forward(params, ctx.coords.view())?.output;
    let d = &ctx.values - &out;
    Ok(d.iter().map(|v| v * v).sum::<f64>() / ctx.len() as f64)
}

fn sgd(params: &ParamVector, grad: &ParamVector, alpha: f64) -> Result<ParamVector> {
    let updated: Vec<f64> = params
        .flat()
        .iter()
        .zip(grad.flat())
        .map(|(p, g)| p - alpha * g)
        .collect();
    Ok(params.with_flat(&updated)?)
}

/// Self-prediction gain: loss decrease on each example after one SGD step
/// of size `alpha` on that example alone.
pub fn score_spg<F: NeuralField + ?Sized>(
    field: &F,
    params: &ParamVector,
    ctx: &ContextSet,
    alpha: f64,
    mode: SpgMode,
) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(ScoreError::StepSize(alpha));
    }
    (0..ctx.len())
        .into_par_iter()
        .map(|j| {
            let one = ctx.subset(&[j]);
            let (before, g) = loss_gradient(field, params, &one, mode == SpgMode::LastLayer)?;
            let after = mse(field, &sgd(params, &g, alpha)?, &one)?;
            Ok(before - after)
        })
        .collect()
}

/// Target-prediction gain: loss decrease on all other examples after one
/// full-network SGD step on each example.
pub fn score_tpg<F: NeuralField + ?Sized>(
    field: &F,
    params: &ParamVector,
    ctx: &ContextSet,
    alpha: f64,
    max_examples: usize,
) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(ScoreError::StepSize(alpha));
    }
    let m = ctx.len();
    if m > max_examples {
        return Err(ScoreError::TooLarge {
            m,
            bound: max_examples,
        });
    }
    (0..m)
        .into_par_iter()
        .map(|j| {
            let others: Vec<usize> = (0..m).filter(|&i| i != j).collect();
            let rest = ctx.subset(&others);
            let (_, g) = loss_gradient(field, params, &ctx.subset(&[j]), false)?;
            let updated = sgd(params, &g, alpha)?;
            Ok(mse(field, params, &rest)? - mse(field, &updated, &rest)?)
        })
        .collect()
}
