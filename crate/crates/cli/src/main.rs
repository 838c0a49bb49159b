use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fieldmeta::adapt::{loss_and_grad, sgd_update, step_size, AdaptReport};
use fieldmeta::config::{precision_from_env, Config};
use fieldmeta::eval::{self, overlap, spearman, Psnr};
use fieldmeta::metatest::{adapt_rescaled, ScaleMode};
use fieldmeta::metatrain::{step_seed, TrainOptions};
use fieldmeta::nf::{Activation, ModelSpec, NeuralField, ParamVector};
use fieldmeta::persistence::{Checkpoint, FittedParams};
use fieldmeta::run::{self, Protocol};
use fieldmeta::scoring::{score_spg, score_tpg, topk, Scorer, SpgMode, TPG_MAX_EXAMPLES};
use fieldmeta::signals::dataset::{load_dataset, write_synth_dataset, NamedSignal};
use fieldmeta::signals::{grid_context, load_signal, ContextSet};

#[derive(Parser)]
#[command(name = "fieldmeta", version, about = "Meta-learned neural fields with context pruning")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image corpus with a split file.
    Synth(SynthArgs),
    /// Meta-train an initialization from a config file.
    Metatrain(MetatrainArgs),
    /// Adapt a checkpoint to every signal of a dataset split.
    Metatest(MetatestArgs),
    /// Fit each signal from a random initialization.
    FitScratch(FitScratchArgs),
    /// Per-step selection masks, residuals and reconstructions for one signal.
    Visualize(VisualizeArgs),
    /// Rank agreement between context scorers along adaptation.
    BenchScorers(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MetatrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Gradncp,
    Random,
    Pruned,
    Scratch,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    GradNorm,
    LossRatio,
    None,
}

impl From<Mode> for ScaleMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::GradNorm => ScaleMode::GradNorm,
            Mode::LossRatio => ScaleMode::LossRatio,
            Mode::None => ScaleMode::None,
        }
    }
}

#[derive(Args)]
struct MetatestArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = Part::Test)]
    split: Part,
    /// Adaptation steps (default: the checkpoint's K).
    #[arg(long)]
    ktest: Option<usize>,
    #[arg(long, value_enum, default_value_t = Mode::GradNorm)]
    scale_mode: Mode,
    /// Selection ratio (default: the checkpoint's γ).
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum, default_value_t = Baseline::Gradncp)]
    baseline: Baseline,
    /// Learning rate of the scratch baseline.
    #[arg(long, default_value_t = 1e-2)]
    scratch_lr: f64,
    /// Directory for `signals.csv`, `steps.csv` and `summary.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitScratchArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = Part::Test)]
    split: Part,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 30.0)]
    omega0: f64,
    /// Directory for the CSV tables and one `<signal>.fmp` per fit.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Signal file (image or 1-d series).
    #[arg(long)]
    signal: PathBuf,
    /// Adaptation steps (default: the checkpoint's K).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum, default_value_t = Mode::GradNorm)]
    scale_mode: Mode,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = Part::Test)]
    split: Part,
    /// Adaptation steps to score along (default: the checkpoint's K).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Step size of the SPG and TPG oracles.
    #[arg(long, default_value_t = 1e-3)]
    spg_alpha: f64,
    /// Include the quadratic-cost TPG oracle (requires M ≤ 512).
    #[arg(long)]
    tpg: bool,
    /// Only score the first N signals.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Metatrain(a) => cmd_metatrain(a),
        Command::Metatest(a) => cmd_metatest(a),
        Command::FitScratch(a) => cmd_fit_scratch(a),
        Command::Visualize(a) => cmd_visualize(a),
        Command::BenchScorers(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let split = write_synth_dataset(&a.out, a.count, a.height, a.width, a.channels, a.seed, a.test_fraction)?;
    println!("wrote {} train and {} test signals to {}", split.train.len(), split.test.len(), a.out.display());
    Ok(())
}

fn signals_of(dir: &Path, part: Part, test_fraction: f64) -> Result<Vec<NamedSignal>> {
    let ds = load_dataset(dir, test_fraction).with_context(|| format!("loading {}", dir.display()))?;
    let signals = match part {
        Part::Train => ds.train,
        Part::Test => ds.test,
        Part::All => ds.train.into_iter().chain(ds.test).collect(),
    };
    if signals.is_empty() {
        bail!("dataset {} has no signals in the requested split", dir.display());
    }
    Ok(signals)
}

fn contexts_of(signals: &[NamedSignal]) -> Result<Vec<ContextSet>> {
    let ctx: Vec<ContextSet> = signals
        .iter()
        .map(|s| grid_context(&s.signal).with_context(|| s.name.clone()))
        .collect::<Result<_>>()?;
    let (c, d) = (ctx[0].coord_dim(), ctx[0].value_dim());
    if let Some(bad) = ctx.iter().position(|x| x.coord_dim() != c || x.value_dim() != d) {
        bail!("{} does not match the shape of {}", signals[bad].name, signals[0].name);
    }
    Ok(ctx)
}

fn fmt_psnr(v: f64) -> String {
    Psnr(v).to_string()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

const TRAIN_HEADER: &str = "step,signal_id,loss_full,psnr,boot_loss,distance,total\n";

fn cmd_metatrain(a: MetatrainArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg = Config::parse(&text)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let precision = precision_from_env()?;
    let signals = signals_of(&cfg.dataset, Part::Train, cfg.test_fraction)?;
    let corpus = contexts_of(&signals)?;
    let spec = cfg.model_spec(corpus[0].coord_dim(), corpus[0].value_dim());
    let state = run::init_state(&spec, cfg.k, cfg.l, cfg.gamma, cfg.lambda, cfg.beta, cfg.alpha_init, cfg.seed)?;
    fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;

    let save = |state: &fieldmeta::metatrain::MetaState| -> Result<()> {
        let ckpt = Checkpoint {
            spec: spec.clone(),
            precision,
            state: state.clone(),
        };
        let bytes = ckpt.to_bytes();
        write_bytes(&cfg.output.join(format!("step_{:06}.fmc", state.outer_step())), &bytes)?;
        write_bytes(&cfg.output.join("checkpoint.fmc"), &bytes)
    };
    save(&state)?;

    let mut log = String::from(TRAIN_HEADER);
    let opts = cfg.train_options(precision);
    let every = cfg.checkpoint_every;
    let last = cfg.outer_steps as u64;
    let result = run::train(state, &spec, &corpus, cfg.outer_steps, cfg.batch_size, &opts, |s, r| {
        for sig in &r.signals {
            let _ = writeln!(
                log,
                "{},{},{},{},{},{},{}",
                r.step,
                sig.id,
                sig.loss_full,
                fmt_psnr(sig.psnr),
                sig.boot_loss,
                sig.distance,
                sig.total
            );
        }
        for (id, e) in &r.skipped {
            eprintln!("warning: step {}: signal {} ({}) skipped: {e}", r.step, id, signals[*id].name);
        }
        let step = s.outer_step();
        if (every > 0 && step % every as u64 == 0) || step == last {
            save(s).map_err(|e| fieldmeta::adapt::AdaptError::Invalid(format!("{e:#}")))?;
        }
        Ok(())
    });
    write(&cfg.output.join("metrics.csv"), &log)?;
    let state = result.context("meta-training stopped")?;
    println!("finished {} outer steps; checkpoint in {}", state.outer_step(), cfg.output.display());
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn check_model(spec: &ModelSpec, ctx: &ContextSet) -> Result<()> {
    if spec.input_dim != ctx.coord_dim() || spec.output_dim != ctx.value_dim() {
        bail!(
            "checkpoint maps {} coordinates to {} channels, signal has {} and {}",
            spec.input_dim,
            spec.output_dim,
            ctx.coord_dim(),
            ctx.value_dim()
        );
    }
    Ok(())
}

fn report_tables(names: &[String], reports: &[AdaptReport], dir: &Path) -> Result<f64> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut signals = String::from("signal_id,name,k_test,loss,psnr\n");
    let mut steps = String::from("signal_id,step,loss,psnr,grad_norm_high,grad_norm_full,scale,selected\n");
    for (i, (name, r)) in names.iter().zip(reports).enumerate() {
        let _ = writeln!(signals, "{i},{name},{},{},{}", r.k_test(), r.final_loss, fmt_psnr(r.final_psnr));
        for s in &r.steps {
            let _ = writeln!(
                steps,
                "{i},{},{},{},{},{},{},{}",
                s.step,
                fmt_opt(s.loss_full),
                s.psnr.map(fmt_psnr).unwrap_or_default(),
                s.grad_norm_high,
                fmt_opt(s.grad_norm_full),
                s.scale,
                s.selected.len()
            );
        }
    }
    let mean = run::mean_psnr(reports);
    write(&dir.join("signals.csv"), &signals)?;
    write(&dir.join("steps.csv"), &steps)?;
    Ok(mean)
}

fn cmd_metatest(a: MetatestArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let precision = precision_from_env()?;
    let signals = signals_of(&a.dataset, a.split, a.test_fraction)?;
    let corpus = contexts_of(&signals)?;
    check_model(&ckpt.spec, &corpus[0])?;
    let s = &ckpt.state;
    let k_test = a.ktest.unwrap_or(s.k);
    let gamma = a.gamma.unwrap_or(s.gamma);
    let mode: ScaleMode = a.scale_mode.into();
    let mut opts = TrainOptions {
        precision,
        ..TrainOptions::default()
    };
    let protocol = match a.baseline {
        Baseline::Gradncp => Protocol::Rescaled { gamma, mode },
        Baseline::Random => {
            opts.scorer = Scorer::Random;
            Protocol::Rescaled { gamma, mode }
        }
        Baseline::Pruned => Protocol::Pruned { gamma },
        Baseline::Scratch => Protocol::Scratch { lr: a.scratch_lr },
    };
    let reports = run::evaluate(&ckpt.spec, &s.theta0, &s.inner_lrs, &corpus, k_test, protocol, &opts, a.seed)?;
    let names: Vec<String> = signals.iter().map(|n| n.name.clone()).collect();
    let baseline = match a.baseline {
        Baseline::Gradncp => "gradncp",
        Baseline::Random => "random",
        Baseline::Pruned => "pruned",
        Baseline::Scratch => "scratch",
    };
    let mean = report_tables(&names, &reports, &a.out)?;
    write(
        &a.out.join("summary.csv"),
        &format!(
            "baseline,k_test,gamma,scale_mode,signals,mean_psnr\n{baseline},{k_test},{gamma},{},{},{}\n",
            mode.name(),
            reports.len(),
            fmt_psnr(mean)
        ),
    )?;
    println!("mean_psnr {}", fmt_psnr(mean));
    Ok(())
}

fn cmd_fit_scratch(a: FitScratchArgs) -> Result<()> {
    let precision = precision_from_env()?;
    let signals = signals_of(&a.dataset, a.split, a.test_fraction)?;
    let corpus = contexts_of(&signals)?;
    let mut spec = ModelSpec::siren(corpus[0].coord_dim(), corpus[0].value_dim(), a.hidden_dim, a.depth);
    spec.activation = Activation::Sine { omega0: a.omega0 };
    spec.validate()?;
    let opts = TrainOptions {
        precision,
        ..TrainOptions::default()
    };
    let reports = run::evaluate(
        &spec,
        &spec.init_params(0),
        &[],
        &corpus,
        a.steps,
        Protocol::Scratch { lr: a.lr },
        &opts,
        a.seed,
    )?;
    let names: Vec<String> = signals.iter().map(|n| n.name.clone()).collect();
    let mean = report_tables(&names, &reports, &a.out)?;
    write(
        &a.out.join("summary.csv"),
        &format!("baseline,k_test,lr,signals,mean_psnr\nscratch,{},{},{},{}\n", a.steps, a.lr, reports.len(), fmt_psnr(mean)),
    )?;
    for (name, r) in names.iter().zip(&reports) {
        let fit = FittedParams {
            spec: spec.clone(),
            precision,
            params: r.final_params.clone(),
        };
        fit.save(&a.out.join(format!("{name}.fmp")))?;
    }
    println!("mean_psnr {}", fmt_psnr(mean));
    Ok(())
}

fn f64_bytes(values: &ndarray::Array2<f64>) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn cmd_visualize(a: VisualizeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let precision = precision_from_env()?;
    let signal = load_signal(&a.signal).with_context(|| format!("loading {}", a.signal.display()))?;
    let ctx = grid_context(&signal)?;
    check_model(&ckpt.spec, &ctx)?;
    let s = &ckpt.state;
    let steps = a.steps.unwrap_or(s.k);
    let gamma = a.gamma.unwrap_or(s.gamma);
    let opts = TrainOptions {
        precision,
        ..TrainOptions::default()
    };
    let seed = run::test_seed(a.seed, 0);
    let report = adapt_rescaled(&ckpt.spec, &s.theta0, &s.inner_lrs, &ctx, gamma, steps, a.scale_mode.into(), &opts, seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    // parameters before each step, then the final ones
    let mut params = vec![s.theta0.clone()];
    for (t, rec) in report.steps.iter().enumerate() {
        let theta = params.last().expect("initial parameters");
        let (_, g, _) = loss_and_grad(&ckpt.spec, theta, &ctx, opts.block_rows, opts.precision)?;
        params.push(sgd_update(theta, &g, step_size(&s.inner_lrs, t) * rec.scale)?);
    }

    let mut csv = String::from("step,loss,psnr,selected,residual_max\n");
    for (t, p) in params.iter().enumerate() {
        let pred = ckpt.spec.forward(p, ctx.coords.view())?.output;
        let m = eval::psnr(&pred, &ctx.values)?;
        let max = eval::render_residual(&pred, &ctx.values, &ctx.resolution, &a.out.join(format!("residual_{t:03}.pgm")))?;
        eval::render_values(&pred, &ctx.resolution, &a.out.join(format!("recon_{t:03}.ppm")))?;
        let selected = report.steps.get(t).map(|r| r.selected.as_slice());
        if let Some(sel) = selected {
            eval::render_mask(&ctx, sel, &a.out.join(format!("mask_{t:03}.ppm")))?;
        }
        let loss = m.mse * ctx.value_dim() as f64;
        let _ = writeln!(csv, "{t},{loss},{},{},{max}", fmt_psnr(m.psnr_db), selected.map_or(0, |s| s.len()));
        if t == steps {
            write_bytes(&a.out.join("recon_final.f64"), &f64_bytes(&pred))?;
        }
    }
    write(&a.out.join("steps.csv"), &csv)?;
    println!("final_psnr {}", fmt_psnr(report.final_psnr));
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let precision = precision_from_env()?;
    let mut signals = signals_of(&a.dataset, a.split, a.test_fraction)?;
    if let Some(n) = a.limit {
        signals.truncate(n.max(1));
    }
    let corpus = contexts_of(&signals)?;
    check_model(&ckpt.spec, &corpus[0])?;
    if a.tpg && corpus[0].len() > TPG_MAX_EXAMPLES {
        bail!(
            "TPG is quadratic in the context size and is limited to {TPG_MAX_EXAMPLES} points; signals have {}",
            corpus[0].len()
        );
    }
    let s = &ckpt.state;
    let steps = a.steps.unwrap_or(s.k);
    let gamma = a.gamma.unwrap_or(s.gamma);
    let opts = TrainOptions {
        precision,
        ..TrainOptions::default()
    };
    let spec = &ckpt.spec;
    let mut csv = String::from("signal_id,step,scorer_a,scorer_b,spearman,overlap\n");
    for (i, ctx) in corpus.iter().enumerate() {
        let seed = run::test_seed(a.seed, i);
        let trace = fieldmeta::metatest::adapt_pruned(spec, &s.theta0, &s.inner_lrs, ctx, gamma, steps, &opts, seed)?;
        let mut theta = s.theta0.clone();
        for t in 0..=steps {
            let mut cols: Vec<(&str, Vec<f64>)> = vec![
                ("gradncp", Scorer::GradNcp.score(spec, &theta, ctx, 0)?),
                ("loss", Scorer::Loss.score(spec, &theta, ctx, 0)?),
                ("spg_last", score_spg(spec, &theta, ctx, a.spg_alpha, SpgMode::LastLayer)?),
                ("spg_full", score_spg(spec, &theta, ctx, a.spg_alpha, SpgMode::Full)?),
                ("random", Scorer::Random.score(spec, &theta, ctx, step_seed(seed, t))?),
            ];
            if a.tpg {
                cols.push(("tpg", score_tpg(spec, &theta, ctx, a.spg_alpha, TPG_MAX_EXAMPLES)?));
            }
            let picks: Vec<Vec<usize>> = cols.iter().map(|(_, v)| topk(v, gamma)).collect::<Result<_, _>>()?;
            for x in 0..cols.len() {
                for y in x + 1..cols.len() {
                    let _ = writeln!(
                        csv,
                        "{i},{t},{},{},{},{}",
                        cols[x].0,
                        cols[y].0,
                        spearman(&cols[x].1, &cols[y].1),
                        overlap(&picks[x], &picks[y])
                    );
                }
            }
            if t < steps {
                theta = trace_step(spec, &theta, ctx, &trace, t, &s.inner_lrs, &opts)?;
            }
        }
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write(&a.out, &csv)?;
    Ok(())
}

/// Replays pruned step `t` of `trace` from `theta`.
fn trace_step(
    spec: &ModelSpec,
    theta: &ParamVector,
    ctx: &ContextSet,
    trace: &AdaptReport,
    t: usize,
    lrs: &[f64],
    opts: &TrainOptions,
) -> Result<ParamVector> {
    let high = ctx.subset(&trace.steps[t].selected);
    let (_, g, _) = loss_and_grad(spec, theta, &high, opts.block_rows, opts.precision)?;
    Ok(sgd_update(theta, &g, step_size(lrs, t))?)
}
