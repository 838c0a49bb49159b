//! Test-time adaptation from a meta-learned initialization: full-context
//! updates with gradient rescaling, plus the pruned and from-scratch baselines.

use crate::adapt::{
    check_finite, full_loss, loss_and_grad, norm, psnr_from_loss, sgd_update, step_size, AdaptError, AdaptReport,
    Result, StepRecord,
};
use crate::metatrain::{pruned_detached, step_seed, TrainOptions};
use crate::nf::{NeuralField, ParamVector};
use crate::scoring::topk;
use crate::signals::ContextSet;

/// How the full-context gradient is rescaled at each test step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScaleMode {
    /// `‖∇L(C_high)‖ / ‖∇L(C_full)‖`.
    #[default]
    GradNorm,
    /// `L(C_high) / L(C_full)`.
    LossRatio,
    None,
}

impl ScaleMode {
    pub fn name(self) -> &'static str {
        match self {
            ScaleMode::GradNorm => "grad_norm",
            ScaleMode::LossRatio => "loss_ratio",
            ScaleMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<ScaleMode> {
        match s {
            "grad_norm" => Some(ScaleMode::GradNorm),
            "loss_ratio" => Some(ScaleMode::LossRatio),
            "none" => Some(ScaleMode::None),
            _ => None,
        }
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

fn finish(field: &(impl NeuralField + ?Sized), steps: Vec<StepRecord>, params: ParamVector, ctx: &ContextSet) -> Result<AdaptReport> {
    let final_loss = check_finite(full_loss(field, &params, ctx)?, steps.len())?;
    Ok(AdaptReport {
        steps,
        final_params: params,
        final_loss,
        final_psnr: psnr_from_loss(final_loss, ctx.value_dim()),
    })
}

fn check_schedule(lrs: &[f64], k_test: usize) -> Result<()> {
    if k_test > 0 && lrs.is_empty() {
        return Err(AdaptError::Invalid("no step sizes for test-time adaptation".into()));
    }
    Ok(())
}

/// Adapts `theta0` with full-context gradients, each multiplied by the scale
/// that `mode` derives from the top-`γ` subset chosen by `opts.scorer`.
/// Step `t` uses `lrs[min(t, K − 1)]`.
#[allow(clippy::too_many_arguments)]
pub fn adapt_rescaled<F: NeuralField + ?Sized>(
    field: &F,
    theta0: &ParamVector,
    lrs: &[f64],
    ctx: &ContextSet,
    gamma: f64,
    k_test: usize,
    mode: ScaleMode,
    opts: &TrainOptions,
    seed: u64,
) -> Result<AdaptReport> {
    if ctx.is_empty() {
        return Err(AdaptError::EmptyContext);
    }
    check_schedule(lrs, k_test)?;
    let mut theta = theta0.clone();
    let mut steps = Vec::with_capacity(k_test);
    for t in 0..k_test {
        let scores = opts.scorer.score(field, &theta, ctx, step_seed(seed, t))?;
        let selected = topk(&scores, gamma)?;
        let everything = selected.len() == ctx.len();

        let (loss_full, grad_full, mut nodes) = loss_and_grad(field, &theta, ctx, opts.block_rows, opts.precision)?;
        let loss_full = check_finite(loss_full, t)?;
        let norm_full = norm(&grad_full);
        let (loss_high, norm_high, scale) = if everything {
            (loss_full, norm_full, 1.0)
        } else {
            let high = ctx.subset(&selected);
            match mode {
                ScaleMode::GradNorm => {
                    let (lh, gh, n) = loss_and_grad(field, &theta, &high, opts.block_rows, opts.precision)?;
                    nodes += n;
                    let nh = norm(&gh);
                    (check_finite(lh, t)?, nh, ratio(nh, norm_full))
                }
                ScaleMode::LossRatio => {
                    let lh = check_finite(full_loss(field, &theta, &high)?, t)?;
                    (lh, f64::NAN, ratio(lh, loss_full))
                }
                ScaleMode::None => {
                    let lh = check_finite(full_loss(field, &theta, &high)?, t)?;
                    (lh, f64::NAN, 1.0)
                }
            }
        };
        theta = sgd_update(&theta, &grad_full, step_size(lrs, t) * scale)?;
        steps.push(StepRecord {
            step: t,
            selected,
            loss_high,
            loss_full: Some(loss_full),
            psnr: Some(psnr_from_loss(loss_full, ctx.value_dim())),
            grad_norm_high: norm_high,
            grad_norm_full: Some(norm_full),
            scale,
            mse_nodes: nodes,
        });
    }
    finish(field, steps, theta, ctx)
}

/// Test-time loop identical to the detached meta-training inner loop:
/// pruned-context updates without rescaling.
#[allow(clippy::too_many_arguments)]
pub fn adapt_pruned<F: NeuralField + ?Sized>(
    field: &F,
    theta0: &ParamVector,
    lrs: &[f64],
    ctx: &ContextSet,
    gamma: f64,
    k_test: usize,
    opts: &TrainOptions,
    seed: u64,
) -> Result<AdaptReport> {
    check_schedule(lrs, k_test)?;
    let schedule: Vec<f64> = (0..k_test).map(|t| step_size(lrs, t)).collect();
    pruned_detached(field, theta0, &schedule, ctx, gamma, opts, seed, true)
}

/// Plain full-context SGD from `field.init_params(seed)`.
pub fn fit_scratch<F: NeuralField + ?Sized>(
    field: &F,
    ctx: &ContextSet,
    lr: f64,
    steps: usize,
    seed: u64,
    opts: &TrainOptions,
) -> Result<AdaptReport> {
    if ctx.is_empty() {
        return Err(AdaptError::EmptyContext);
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(AdaptError::Invalid(format!("learning rate must be positive, got {lr}")));
    }
    let mut theta = field.init_params(seed);
    let mut records = Vec::with_capacity(steps);
    for t in 0..steps {
        let (loss, grad, nodes) = loss_and_grad(field, &theta, ctx, opts.block_rows, opts.precision)?;
        let loss = check_finite(loss, t)?;
        let gn = norm(&grad);
        theta = sgd_update(&theta, &grad, lr)?;
        records.push(StepRecord {
            step: t,
            selected: Vec::new(),
            loss_high: loss,
            loss_full: Some(loss),
            psnr: Some(psnr_from_loss(loss, ctx.value_dim())),
            grad_norm_high: gn,
            grad_norm_full: Some(gn),
            scale: 1.0,
            mse_nodes: nodes,
        });
    }
    finish(field, records, theta, ctx)
}
