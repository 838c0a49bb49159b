//! Desk-scale meta-training on synthetic images, printing test PSNR under
//! several test-time protocols.
//!
//! ```text
//! cargo run --release --example desk -- \
//!     <steps> <gamma> <scorer> <lambda> <l> <beta> <k> <size> <alpha>
//! ```
//!
//! Every argument is optional; defaults are 50 0.25 gradncp 0 0 1e-4 8 32 1e-2.

use std::time::Instant;

use fieldmeta::metatest::ScaleMode;
use fieldmeta::metatrain::TrainOptions;
use fieldmeta::nf::ModelSpec;
use fieldmeta::run::{self, Protocol};
use fieldmeta::scoring::Scorer;
use fieldmeta::seeds;
use fieldmeta::signals::{synth, SynthKind};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let steps: usize = arg(0, "50").parse().unwrap();
    let gamma: f64 = arg(1, "0.25").parse().unwrap();
    let scorer = Scorer::parse(&arg(2, "gradncp")).unwrap();
    let lambda: f64 = arg(3, "0").parse().unwrap();
    let l: usize = arg(4, "0").parse().unwrap();
    let beta: f64 = arg(5, "1e-4").parse().unwrap();
    let k: usize = arg(6, "8").parse().unwrap();
    let size: usize = arg(7, "32").parse().unwrap();
    let alpha: f64 = arg(8, "1e-2").parse().unwrap();

    let seed = 7;
    let signals: Vec<_> = (0..40)
        .map(|i| synth(SynthKind::SinMix { channels: 1 }, seeds::derive(seed, seeds::SYNTH, i), &[size, size]).unwrap())
        .collect();
    let corpus = run::contexts(&signals).unwrap();
    let (train, test) = corpus.split_at(32);
    let spec = ModelSpec::siren(2, 1, 64, 3);
    let state = run::init_state(&spec, k, l, gamma, lambda, beta, alpha, seed).unwrap();
    let opts = TrainOptions { scorer, ..TrainOptions::default() };
    let t0 = Instant::now();
    let state = run::train(state, &spec, train, steps, 4, &opts, |s, r| {
        if s.outer_step() % 25 == 0 {
            println!(
                "step {} psnr {:.3} boot {:.5} full {:.5} lrs {:?}",
                s.outer_step(),
                r.mean_psnr(),
                r.signals.iter().map(|x| x.boot_loss).sum::<f64>() / r.signals.len() as f64,
                r.signals.iter().map(|x| x.loss_full).sum::<f64>() / r.signals.len() as f64,
                &s.inner_lrs[..2]
            );
        }
        Ok(())
    })
    .unwrap();
    println!("train {:.1}s", t0.elapsed().as_secs_f64());
    let eval_opts = opts;
    let mut line = String::new();
    for (name, p, ks) in [
        ("pruned", Protocol::Pruned { gamma }, vec![k]),
        ("none-1.0", Protocol::Rescaled { gamma: 1.0, mode: ScaleMode::None }, vec![k]),
        ("gn", Protocol::Rescaled { gamma, mode: ScaleMode::GradNorm }, vec![k, 2 * k, 4 * k]),
        ("lr", Protocol::Rescaled { gamma, mode: ScaleMode::LossRatio }, vec![k]),
    ] {
        line += &format!("{name}:");
        for kt in ks {
            let r = run::evaluate(&spec, &state.theta0, &state.inner_lrs, test, kt, p, &eval_opts, seed).unwrap();
            line += &format!(" K{kt}={:.3}", run::mean_psnr(&r));
        }
        line += " | ";
    }
    println!("{line}");
}
