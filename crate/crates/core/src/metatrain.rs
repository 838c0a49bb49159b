//! Meta-training: pruned inner adaptation, bootstrap targets and the outer
//! Adam update of the initialization and per-step learning rates.

use rayon::prelude::*;

use crate::adapt::{
    self, check_finite, loss_and_grad, mse_graph, norm, psnr_from_loss, sgd_update, AdaptError,
    AdaptReport, Result, StepRecord, DEFAULT_BLOCK_ROWS,
};
use crate::graph::{NodeId, Precision, Tape};
use crate::nf::{NeuralField, ParamNodes, ParamVector};
use crate::scoring::{topk, Scorer};
use crate::seeds;
use crate::signals::ContextSet;

/// Lower bound applied to every learned inner step size after an outer step.
pub const ALPHA_FLOOR: f64 = 1e-8;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments over the concatenation `[θ₀ flat, inner_lrs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected Adam step on `params` with learning rate `lr`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Meta-parameters and hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub theta0: ParamVector,
    /// One learned step size per inner step.
    pub inner_lrs: Vec<f64>,
    /// Inner steps.
    pub k: usize,
    /// Bootstrap steps.
    pub l: usize,
    /// Context selection ratio.
    pub gamma: f64,
    /// Bootstrap weight.
    pub lambda: f64,
    /// Outer learning rate.
    pub beta: f64,
    pub adam: AdamState,
    pub seed: u64,
}

impl MetaState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        theta0: ParamVector,
        k: usize,
        l: usize,
        gamma: f64,
        lambda: f64,
        beta: f64,
        alpha_init: f64,
        seed: u64,
    ) -> Result<Self> {
        let n = theta0.len() + k;
        let state = MetaState {
            theta0,
            inner_lrs: vec![alpha_init; k],
            k,
            l,
            gamma,
            lambda,
            beta,
            adam: AdamState::zeros(n),
            seed,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AdaptError::Invalid(m));
        if self.k < 1 {
            return bad("K must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.inner_lrs.len() != self.k {
            return bad(format!("{} inner step sizes for K = {}", self.inner_lrs.len(), self.k));
        }
        if self.inner_lrs.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return bad("inner step sizes must be positive".into());
        }
        let n = self.theta0.len() + self.k;
        if self.adam.m.len() != n || self.adam.v.len() != n {
            return bad("Adam moments do not match the parameter count".into());
        }
        Ok(())
    }

    /// Number of completed outer steps.
    pub fn outer_step(&self) -> u64 {
        self.adam.t
    }
}

/// Settings of the inner loop that are not meta-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub scorer: Scorer,
    /// Detach inner gradients from the outer derivative (first-order ablation).
    pub first_order: bool,
    pub block_rows: usize,
    pub precision: Precision,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            scorer: Scorer::GradNcp,
            first_order: false,
            block_rows: DEFAULT_BLOCK_ROWS,
            precision: Precision::F64,
        }
    }
}

/// Seed of the scorer at inner step `k` for a signal whose adaptation seed
/// is `seed`.
pub fn step_seed(seed: u64, k: usize) -> u64 {
    seeds::derive(seed, seeds::SCORER, k as u64)
}

/// Unrolls the pruned inner loop on `tape` starting from `theta0`.
///
/// Each step rescores the full context at the current parameters, keeps the
/// top `⌈γM⌉` points, and applies `θ ← θ − α_k ∇L(θ; C_high)` as graph
/// expressions, so the result stays differentiable with respect to `theta0`
/// and every `lrs[k]`.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt_graph<F: NeuralField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    theta0: &ParamNodes,
    lrs: &[NodeId],
    ctx: &ContextSet,
    gamma: f64,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(ParamNodes, Vec<StepRecord>)> {
    if ctx.is_empty() {
        return Err(AdaptError::EmptyContext);
    }
    let mut theta = theta0.clone();
    let mut records = Vec::with_capacity(lrs.len());
    for (k, &lr) in lrs.iter().enumerate() {
        let current = theta.values(tape)?;
        let scores = opts.scorer.score(field, &current, ctx, step_seed(seed, k))?;
        let selected = topk(&scores, gamma)?;
        let high = ctx.subset(&selected);

        let before = tape.node_count();
        let loss = mse_graph(tape, field, &theta, &high, opts.block_rows)?;
        let mut grads = tape.grad(loss, &theta.ids())?;
        let mse_nodes = tape.node_count() - before;
        let loss_high = check_finite(tape.evaluate_scalar(loss)?, k)?;

        let mut sq = 0.0;
        for &g in &grads {
            sq += tape.evaluate(g)?.iter().map(|v| v * v).sum::<f64>();
        }
        if opts.first_order {
            for g in grads.iter_mut() {
                *g = tape.stop_gradient(*g)?;
            }
        }
        let mut next = Vec::with_capacity(grads.len());
        for (p, g) in theta.ids().into_iter().zip(grads) {
            let step = tape.mul_scalar(g, lr)?;
            next.push(tape.sub(p, step)?);
        }
        theta = theta.from_ids(&next);
        records.push(StepRecord {
            step: k,
            selected,
            loss_high,
            loss_full: None,
            psnr: None,
            grad_norm_high: sq.sqrt(),
            grad_norm_full: None,
            scale: 1.0,
            mse_nodes,
        });
    }
    Ok((theta, records))
}

/// Pruned inner loop with plain arrays: every step runs on a throwaway tape,
/// so nothing is kept for an outer derivative.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt_detached<F: NeuralField + ?Sized>(
    field: &F,
    theta0: &ParamVector,
    lrs: &[f64],
    ctx: &ContextSet,
    gamma: f64,
    opts: &TrainOptions,
    seed: u64,
) -> Result<AdaptReport> {
    pruned_detached(field, theta0, lrs, ctx, gamma, opts, seed, false)
}

/// Detached pruned loop; `record_full` adds the full-context loss before
/// each update to the step records.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pruned_detached<F: NeuralField + ?Sized>(
    field: &F,
    theta0: &ParamVector,
    lrs: &[f64],
    ctx: &ContextSet,
    gamma: f64,
    opts: &TrainOptions,
    seed: u64,
    record_full: bool,
) -> Result<AdaptReport> {
    if ctx.is_empty() {
        return Err(AdaptError::EmptyContext);
    }
    let mut theta = theta0.clone();
    let mut records = Vec::with_capacity(lrs.len());
    for (k, &lr) in lrs.iter().enumerate() {
        let loss_full = if record_full {
            Some(check_finite(adapt::full_loss(field, &theta, ctx)?, k)?)
        } else {
            None
        };
        let scores = opts.scorer.score(field, &theta, ctx, step_seed(seed, k))?;
        let selected = topk(&scores, gamma)?;
        let high = ctx.subset(&selected);
        let (loss, grad, mse_nodes) = loss_and_grad(field, &theta, &high, opts.block_rows, opts.precision)?;
        let loss_high = check_finite(loss, k)?;
        theta = sgd_update(&theta, &grad, lr)?;
        records.push(StepRecord {
            step: k,
            selected,
            loss_high,
            loss_full,
            psnr: loss_full.map(|l| psnr_from_loss(l, ctx.value_dim())),
            grad_norm_high: norm(&grad),
            grad_norm_full: None,
            scale: 1.0,
            mse_nodes,
        });
    }
    let final_loss = check_finite(adapt::full_loss(field, &theta, ctx)?, lrs.len())?;
    Ok(AdaptReport {
        steps: records,
        final_params: theta,
        final_loss,
        final_psnr: psnr_from_loss(final_loss, ctx.value_dim()),
    })
}

/// Runs the inner loop of `state` on one signal. With `differentiable` the
/// unrolled graph is built (and discarded); otherwise detached steps are
/// used. Both return the adapted parameters and a per-step report.
pub fn inner_adapt<F: NeuralField + ?Sized>(
    state: &MetaState,
    field: &F,
    ctx: &ContextSet,
    opts: &TrainOptions,
    differentiable: bool,
    seed: u64,
) -> Result<AdaptReport> {
    if !differentiable {
        return inner_adapt_detached(field, &state.theta0, &state.inner_lrs, ctx, state.gamma, opts, seed);
    }
    let mut tape = Tape::with_precision(opts.precision);
    let theta0 = state.theta0.to_parameters(&mut tape);
    let lrs: Vec<NodeId> = state.inner_lrs.iter().map(|&a| tape.parameter(scalar(a))).collect();
    let (theta_k, steps) = inner_adapt_graph(&mut tape, field, &theta0, &lrs, ctx, state.gamma, opts, seed)?;
    let final_params = theta_k.values(&mut tape)?;
    let final_loss = check_finite(adapt::full_loss(field, &final_params, ctx)?, steps.len())?;
    Ok(AdaptReport {
        steps,
        final_params,
        final_loss,
        final_psnr: psnr_from_loss(final_loss, ctx.value_dim()),
    })
}

fn scalar(v: f64) -> crate::graph::Array {
    ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), v)
}

/// Parameters reached by `L` extra full-context SGD steps from `θ_K`. They
/// carry no graph linkage; [`total_loss`] places them as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapTarget {
    pub params: ParamVector,
    pub steps: usize,
    /// Full-context loss at `θ_K`.
    pub start_loss: f64,
    /// Full-context loss at the target.
    pub final_loss: f64,
}

pub fn make_bootstrap<F: NeuralField + ?Sized>(
    field: &F,
    theta_k: &ParamVector,
    ctx: &ContextSet,
    alpha: f64,
    steps: usize,
    block_rows: usize,
    precision: Precision,
) -> Result<BootstrapTarget> {
    let mut params = theta_k.clone();
    let mut start_loss = None;
    for s in 0..steps {
        let (loss, grad, _) = loss_and_grad(field, &params, ctx, block_rows, precision)?;
        start_loss.get_or_insert(check_finite(loss, s)?);
        params = sgd_update(&params, &grad, alpha)?;
    }
    let final_loss = check_finite(adapt::full_loss(field, &params, ctx)?, steps)?;
    Ok(BootstrapTarget {
        params,
        steps,
        start_loss: start_loss.unwrap_or(final_loss),
        final_loss,
    })
}

/// Nodes of the meta-objective `L(θ_K; C_full) + λ ‖θ_K − θ_boot‖₂`.
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub total: NodeId,
    pub mse: NodeId,
    /// Bootstrap distance, absent when `λ = 0`.
    pub distance: Option<NodeId>,
}

pub fn total_loss<F: NeuralField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    theta_k: &ParamNodes,
    boot: &ParamVector,
    ctx: &ContextSet,
    lambda: f64,
    block_rows: usize,
) -> Result<TotalLoss> {
    let mse = mse_graph(tape, field, theta_k, ctx, block_rows)?;
    if lambda == 0.0 {
        return Ok(TotalLoss {
            total: mse,
            mse,
            distance: None,
        });
    }
    let target = boot.to_constants(tape);
    let mut rows = Vec::new();
    for (p, t) in theta_k.ids().into_iter().zip(target.ids()) {
        if tape.shape(p)? != tape.shape(t)? {
            return Err(AdaptError::Invalid("bootstrap target layout differs from θ_K".into()));
        }
        let d = tape.sub(p, t)?;
        let n: usize = tape.shape(d)?.iter().product();
        rows.push(tape.reshape(d, &[1, n])?);
    }
    let flat = tape.concat(&rows)?;
    let distance = tape.norm2(flat)?;
    let weighted = tape.scale(distance, lambda)?;
    let total = tape.add(mse, weighted)?;
    Ok(TotalLoss {
        total,
        mse,
        distance: Some(distance),
    })
}

/// One signal of a meta-batch; `id` feeds the signal's seed.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub id: usize,
    pub ctx: &'a ContextSet,
}

/// Outcome of one signal's contribution to an outer step.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalReport {
    pub id: usize,
    pub inner: Vec<StepRecord>,
    /// Full-context loss at `θ_K`.
    pub loss_full: f64,
    pub psnr: f64,
    /// Full-context loss at the bootstrap target.
    pub boot_loss: f64,
    /// `‖θ_K − θ_boot‖₂`.
    pub distance: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchReport {
    /// Outer step index this batch was applied at (0-based).
    pub step: u64,
    pub signals: Vec<SignalReport>,
    /// Signals dropped from the average because adaptation diverged.
    pub skipped: Vec<(usize, AdaptError)>,
}

impl BatchReport {
    pub fn mean_total(&self) -> f64 {
        mean(self.signals.iter().map(|s| s.total))
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.signals.iter().map(|s| s.psnr))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Seed of signal `id`'s adaptation at the state's current outer step.
pub fn signal_seed(state: &MetaState, id: usize) -> u64 {
    seeds::derive(seeds::derive(state.seed, seeds::SCORER, state.outer_step()), id as u64, 0)
}

/// Gradient of one signal's meta-objective with respect to `[θ₀, inner_lrs]`.
pub fn meta_gradient<F: NeuralField + ?Sized>(
    state: &MetaState,
    field: &F,
    item: BatchItem<'_>,
    opts: &TrainOptions,
) -> Result<(Vec<f64>, SignalReport)> {
    let ctx = item.ctx;
    let mut tape = Tape::with_precision(opts.precision);
    let theta0 = state.theta0.to_parameters(&mut tape);
    let lrs: Vec<NodeId> = state.inner_lrs.iter().map(|&a| tape.parameter(scalar(a))).collect();
    let seed = signal_seed(state, item.id);
    let (theta_k, inner) = inner_adapt_graph(&mut tape, field, &theta0, &lrs, ctx, state.gamma, opts, seed)?;
    let theta_k_values = theta_k.values(&mut tape)?;

    let alpha = *state.inner_lrs.last().expect("K >= 1");
    let (boot, boot_loss) = if state.lambda > 0.0 {
        let b = make_bootstrap(field, &theta_k_values, ctx, alpha, state.l, opts.block_rows, opts.precision)?;
        let loss = b.final_loss;
        (b.params, loss)
    } else {
        (theta_k_values, f64::NAN)
    };

    let objective = total_loss(&mut tape, field, &theta_k, &boot, ctx, state.lambda, opts.block_rows)?;
    let mut wrt = theta0.ids();
    wrt.extend(&lrs);
    let grads = tape.grad(objective.total, &wrt)?;
    let total = check_finite(tape.evaluate_scalar(objective.total)?, state.k)?;
    let loss_full = tape.evaluate_scalar(objective.mse)?;
    let distance = match objective.distance {
        Some(d) => tape.evaluate_scalar(d)?,
        None => 0.0,
    };
    let mut flat = Vec::with_capacity(state.adam.m.len());
    for g in grads {
        flat.extend(tape.evaluate(g)?.iter().copied());
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(AdaptError::Diverged { step: state.k });
    }
    let report = SignalReport {
        id: item.id,
        inner,
        loss_full,
        psnr: psnr_from_loss(loss_full, ctx.value_dim()),
        boot_loss,
        distance,
        total,
    };
    Ok((flat, report))
}

/// Averages per-signal meta-gradients over the batch (in batch order) and
/// applies one Adam step to `θ₀` and the inner step sizes.
///
/// Signals whose adaptation diverges are left out of the average and listed
/// in the report; if every signal diverges the first error is returned.
pub fn outer_step<F: NeuralField + ?Sized>(
    state: &MetaState,
    field: &F,
    batch: &[BatchItem<'_>],
    opts: &TrainOptions,
) -> Result<(MetaState, BatchReport)> {
    if batch.is_empty() {
        return Err(AdaptError::Invalid("empty meta-batch".into()));
    }
    state.validate()?;
    let results: Vec<Result<(Vec<f64>, SignalReport)>> = batch
        .par_iter()
        .map(|item| meta_gradient(state, field, *item, opts))
        .collect();

    let n = state.adam.m.len();
    let mut sum = vec![0.0; n];
    let mut signals = Vec::new();
    let mut skipped = Vec::new();
    for (item, r) in batch.iter().zip(results) {
        match r {
            Ok((g, report)) => {
                sum.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                signals.push(report);
            }
            Err(e @ AdaptError::Diverged { .. }) => skipped.push((item.id, e)),
            Err(e) => return Err(e),
        }
    }
    if signals.is_empty() {
        return Err(skipped.swap_remove(0).1);
    }
    let b = signals.len() as f64;
    sum.iter_mut().for_each(|s| *s /= b);

    let mut flat = state.theta0.flat();
    flat.extend(&state.inner_lrs);
    let mut next = state.clone();
    next.adam.update(&mut flat, &sum, state.beta);
    let n_theta = state.theta0.len();
    next.theta0 = state.theta0.with_flat(&flat[..n_theta])?;
    next.inner_lrs = flat[n_theta..].iter().map(|a| a.max(ALPHA_FLOOR)).collect();
    Ok((
        next,
        BatchReport {
            step: state.outer_step(),
            signals,
            skipped,
        },
    ))
}
