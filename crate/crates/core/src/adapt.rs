//! Adaptation machinery shared by meta-training and meta-testing: the MSE
//! subgraph, detached gradient steps and per-step reports.

use thiserror::Error;

use crate::eval::psnr_from_mse;
use crate::graph::{GraphError, NodeId, Precision, Tape};
use crate::nf::{NeuralField, NfError, ParamNodes, ParamVector};
use crate::scoring::ScoreError;
use crate::signals::ContextSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdaptError {
    #[error("non-finite loss at adaptation step {step}")]
    Diverged { step: usize },
    #[error("context set is empty")]
    EmptyContext,
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Model(#[from] NfError),
}

impl From<GraphError> for AdaptError {
    fn from(e: GraphError) -> Self {
        AdaptError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, AdaptError>;

/// Rows per forward block in the MSE subgraph. The subgraph grows by a
/// fixed number of nodes per block, so its node count tracks the number of
/// context points it touches.
pub const DEFAULT_BLOCK_ROWS: usize = 64;

/// One adaptation step, measured at the parameters before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Context indices used for the step's scores (ascending).
    pub selected: Vec<usize>,
    /// Loss on the selected points.
    pub loss_high: f64,
    /// Loss on the full context, when computed.
    pub loss_full: Option<f64>,
    pub psnr: Option<f64>,
    pub grad_norm_high: f64,
    pub grad_norm_full: Option<f64>,
    /// Multiplier applied to the update gradient.
    pub scale: f64,
    /// Nodes created for the step's MSE subgraph and its gradient.
    pub mse_nodes: usize,
}

/// Trace of an adaptation run.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptReport {
    pub steps: Vec<StepRecord>,
    pub final_params: ParamVector,
    /// Full-context loss of `final_params`.
    pub final_loss: f64,
    pub final_psnr: f64,
}

impl AdaptReport {
    pub fn k_test(&self) -> usize {
        self.steps.len()
    }
}

/// PSNR of a `Σ_d (y_d − f_d)² / M` loss over `d` output channels.
pub fn psnr_from_loss(loss: f64, output_dim: usize) -> f64 {
    psnr_from_mse(loss / output_dim as f64)
}

/// `Σ_j ‖f(x_j) − y_j‖² / M` over `ctx`, built block by block on `tape`.
pub fn mse_graph<F: NeuralField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    params: &ParamNodes,
    ctx: &ContextSet,
    block_rows: usize,
) -> Result<NodeId> {
    if ctx.is_empty() {
        return Err(AdaptError::EmptyContext);
    }
    let encoded = field.encode(ctx.coords.view());
    let block_rows = block_rows.max(1);
    let mut total: Option<NodeId> = None;
    let mut start = 0;
    while start < ctx.len() {
        let end = (start + block_rows).min(ctx.len());
        let x = tape.constant(encoded.slice(ndarray::s![start..end, ..]).to_owned().into_dyn());
        let y = tape.constant(ctx.values.slice(ndarray::s![start..end, ..]).to_owned().into_dyn());
        let out = field.build(tape, params, x)?.output;
        let diff = tape.sub(out, y)?;
        let sq = tape.square(diff)?;
        let part = tape.sum(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, part)?,
            None => part,
        });
        start = end;
    }
    let total = total.expect("non-empty context");
    Ok(tape.scale(total, 1.0 / ctx.len() as f64)?)
}

/// Loss and parameter gradient over `ctx`, computed on a throwaway tape.
/// Also returns the number of nodes the computation created.
pub fn loss_and_grad<F: NeuralField + ?Sized>(
    field: &F,
    params: &ParamVector,
    ctx: &ContextSet,
    block_rows: usize,
    precision: Precision,
) -> Result<(f64, Vec<f64>, usize)> {
    let mut tape = Tape::with_precision(precision);
    let nodes = params.to_parameters(&mut tape);
    let before = tape.node_count();
    let loss = mse_graph(&mut tape, field, &nodes, ctx, block_rows)?;
    let grads = tape.grad(loss, &nodes.ids())?;
    let created = tape.node_count() - before;
    let value = tape.evaluate_scalar(loss)?;
    let mut flat = Vec::with_capacity(params.len());
    for g in grads {
        flat.extend(tape.evaluate(g)?.iter().copied());
    }
    Ok((value, flat, created))
}

/// Full-context loss from an eager forward pass.
pub fn full_loss<F: NeuralField + ?Sized>(field: &F, params: &ParamVector, ctx: &ContextSet) -> Result<f64> {
    if ctx.is_empty() {
        return Err(AdaptError::EmptyContext);
    }
    let out = field.forward(params, ctx.coords.view())?.output;
    let sum: f64 = out
        .iter()
        .zip(ctx.values.iter())
        .map(|(o, y)| (o - y) * (o - y))
        .sum();
    Ok(sum / ctx.len() as f64)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `params − step · grad` over the flat view.
pub fn sgd_update(params: &ParamVector, grad: &[f64], step: f64) -> Result<ParamVector> {
    let flat: Vec<f64> = params
        .flat()
        .iter()
        .zip(grad)
        .map(|(p, g)| p - step * g)
        .collect();
    Ok(params.with_flat(&flat)?)
}

/// Step size for adaptation step `t`: `lrs[t]`, reusing the last entry past
/// the end of the schedule.
pub fn step_size(lrs: &[f64], t: usize) -> f64 {
    lrs[t.min(lrs.len() - 1)]
}

pub(crate) fn check_finite(loss: f64, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(AdaptError::Diverged { step })
    }
}
