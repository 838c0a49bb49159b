//! Corpus-level drivers shared by the command line and the experiments.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adapt::{AdaptReport, Result};
use crate::metatest::{adapt_pruned, adapt_rescaled, fit_scratch, ScaleMode};
use crate::metatrain::{outer_step, BatchItem, BatchReport, MetaState, TrainOptions};
use crate::nf::{NeuralField, ParamVector};
use crate::seeds;
use crate::signals::{grid_context, ContextSet, Signal, SignalError};

/// Full-context sets of a list of signals.
pub fn contexts(signals: &[Signal]) -> std::result::Result<Vec<ContextSet>, SignalError> {
    signals.iter().map(grid_context).collect()
}

/// Initial meta-state: `θ₀ = field.init_params(derive(seed, INIT, 0))`.
#[allow(clippy::too_many_arguments)]
pub fn init_state<F: NeuralField + ?Sized>(
    field: &F,
    k: usize,
    l: usize,
    gamma: f64,
    lambda: f64,
    beta: f64,
    alpha_init: f64,
    seed: u64,
) -> Result<MetaState> {
    let theta0 = field.init_params(seeds::derive(seed, seeds::INIT, 0));
    MetaState::new(theta0, k, l, gamma, lambda, beta, alpha_init, seed)
}

/// Signals drawn without replacement for outer step `step`, in ascending
/// order. Returns every index when `batch_size ≥ n`.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    if batch_size >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, seeds::BATCH, step));
    let mut picked = index::sample(&mut rng, n, batch_size).into_vec();
    picked.sort_unstable();
    picked
}

/// Runs `steps` outer steps from `state`, calling `on_step` after each one
/// with the updated state and the batch report.
pub fn train<F, C>(
    mut state: MetaState,
    field: &F,
    corpus: &[ContextSet],
    steps: usize,
    batch_size: usize,
    opts: &TrainOptions,
    mut on_step: C,
) -> Result<MetaState>
where
    F: NeuralField + ?Sized,
    C: FnMut(&MetaState, &BatchReport) -> Result<()>,
{
    for _ in 0..steps {
        let picked = batch_indices(state.seed, state.outer_step(), corpus.len(), batch_size);
        let batch: Vec<BatchItem<'_>> = picked.iter().map(|&id| BatchItem { id, ctx: &corpus[id] }).collect();
        let (next, report) = outer_step(&state, field, &batch, opts)?;
        state = next;
        on_step(&state, &report)?;
    }
    Ok(state)
}

/// Test-time procedure applied to every signal of a corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Protocol {
    /// Full-context updates rescaled by the selected subset.
    Rescaled { gamma: f64, mode: ScaleMode },
    /// Same pruned updates as the meta-training inner loop.
    Pruned { gamma: f64 },
    /// Plain SGD from a random initialization.
    Scratch { lr: f64 },
}

/// Seed of test signal `index`.
pub fn test_seed(seed: u64, index: usize) -> u64 {
    seeds::derive(seeds::derive(seed, seeds::SCORER, u64::MAX), index as u64, 0)
}

/// Adapts every signal in parallel; results keep corpus order.
pub fn evaluate<F: NeuralField + ?Sized>(
    field: &F,
    theta0: &ParamVector,
    lrs: &[f64],
    corpus: &[ContextSet],
    k_test: usize,
    protocol: Protocol,
    opts: &TrainOptions,
    seed: u64,
) -> Result<Vec<AdaptReport>> {
    corpus
        .par_iter()
        .enumerate()
        .map(|(i, ctx)| {
            let s = test_seed(seed, i);
            match protocol {
                Protocol::Rescaled { gamma, mode } => {
                    adapt_rescaled(field, theta0, lrs, ctx, gamma, k_test, mode, opts, s)
                }
                Protocol::Pruned { gamma } => adapt_pruned(field, theta0, lrs, ctx, gamma, k_test, opts, s),
                Protocol::Scratch { lr } => fit_scratch(field, ctx, lr, k_test, s, opts),
            }
        })
        .collect()
}

pub fn mean_psnr(reports: &[AdaptReport]) -> f64 {
    reports.iter().map(|r| r.final_psnr).sum::<f64>() / reports.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_seeded_subsets() {
        let a = batch_indices(1, 5, 20, 4);
        assert_eq!(a, batch_indices(1, 5, 20, 4));
        assert_ne!(a, batch_indices(1, 6, 20, 4));
        assert_eq!(a.len(), 4);
        assert!(a.windows(2).all(|w| w[0] < w[1]) && a[3] < 20);
        assert_eq!(batch_indices(1, 0, 3, 8), vec![0, 1, 2]);
    }
}
