//! Command-line front end for the dual-mode transducer pipeline: supernet
//! training, encoder pretraining, fine-tuning from a pretrained checkpoint,
//! per-mode evaluation, mask inspection, kernel benchmarking, and segment
//! layout dumps. Runs write plot-ready CSV and JSON-lines metrics.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dualmode_core::chunking::{segment, Mode};
use dualmode_core::config::RunConfig;
use dualmode_core::kernels;
use dualmode_core::model::{load_checkpoint, prunable_layers, Checkpoint, RnntModel};
use dualmode_core::sparsity::block_norms;
use dualmode_core::trainer::{evaluate, run_pretrain, run_supernet};
use dualmode_core::{data, Tensor};

#[derive(Parser)]
#[command(name = "dualmode", version, about = "Dual-mode sparse transducer pipeline")]
struct Cli {
    /// Flat JSON run configuration (dotted keys); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Logical worker count override.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Validate the config and print the resolved schedule without training.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// End-to-end supernet run: dense phase, iterative pruning, frozen masks.
    Train,
    /// Encoder-only masked-frame reconstruction pretraining with pruning.
    Pretrain,
    /// Transducer training; with --init, loads pretrained encoder weights and
    /// frozen encoder masks and prunes only the predictor.
    Finetune {
        /// Pretraining checkpoint directory.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Loss and greedy token accuracy of a checkpoint under one mode.
    Eval {
        /// Checkpoint directory.
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: EvalMode,
    },
    /// Per-layer sparsity, block-norm histogram, and nonzero parameter count.
    MaskReport {
        /// Checkpoint directory.
        checkpoint: PathBuf,
    },
    /// Time dense vs block-sparse matvec and print one JSON line.
    Bench {
        #[arg(long, default_value_t = 1024)]
        dim: usize,
        #[arg(long, default_value_t = 0.87)]
        sparsity: f64,
        #[arg(long, default_value_t = 51)]
        reps: usize,
    },
    /// Print the segment layout for an utterance length as JSON.
    DumpLayout {
        #[arg(long)]
        frames: usize,
        /// Center length; defaults to the config's chunk.center.
        #[arg(long)]
        center: Option<usize>,
        /// Left context; defaults to the config's chunk.left.
        #[arg(long)]
        left: Option<usize>,
        /// Right context; defaults to the config's chunk.right.
        #[arg(long)]
        right: Option<usize>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Streaming,
    Nonstreaming,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_schedule(cfg: &RunConfig, steps: usize, phase: &str) -> Result<()> {
    let schedule = cfg.schedule()?;
    println!("phase: {phase}");
    println!("total steps: {steps}");
    println!(
        "schedule: t0={} interval={} p={} n={}",
        schedule.t0, schedule.interval, schedule.p, schedule.n
    );
    println!("prune steps: {:?}", schedule.prune_steps());
    println!("freeze step: {}", schedule.freeze_step());
    println!("target sparsity: {:.5}", schedule.target_sparsity());
    println!("dense warmup steps: {}", cfg.train_dense_warmup_steps);
    println!("lasso lambda: {}", cfg.lasso_lambda);
    Ok(())
}

/// Checkpoint into a runnable model plus its originating run configuration.
fn materialize(ck: Checkpoint) -> Result<(RunConfig, RnntModel)> {
    let map: serde_json::Map<String, serde_json::Value> = ck.config.into_iter().collect();
    let run_cfg = RunConfig::from_flat(&map)?;
    let model = RnntModel { cfg: run_cfg.model_config(), params: ck.params, masks: ck.masks };
    Ok((run_cfg, model))
}

fn cmd_eval(checkpoint: &Path, mode: EvalMode) -> Result<()> {
    let ck = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let (run_cfg, model) = materialize(ck)?;
    if mode == EvalMode::Streaming {
        for layer in prunable_layers(&model.cfg) {
            if !model.masks.contains(&layer) {
                bail!(
                    "checkpoint {} has no mask for {layer}; streaming evaluation \
                     requires a mask for every prunable matrix",
                    checkpoint.display()
                );
            }
        }
    }
    let valid = data::synthesize(&run_cfg.data_config(), run_cfg.seed, data::Split::Valid)?;
    let sampler = run_cfg.sampler()?;
    let m = match mode {
        EvalMode::Streaming => Mode::Streaming,
        EvalMode::Nonstreaming => Mode::FullContext,
    };
    let metrics = evaluate(&model, &valid, m, &sampler, run_cfg.chunk_left, run_cfg.chunk_right)?;
    let label = match mode {
        EvalMode::Streaming => "streaming",
        EvalMode::Nonstreaming => "nonstreaming",
    };
    println!(
        "mode={label} loss={} token_accuracy={}",
        metrics.loss, metrics.token_accuracy
    );
    Ok(())
}

/// Counts coordinates that survive in the streaming view: masked values for
/// prunable matrices, stored values elsewhere.
fn nonzero_params(model: &RnntModel) -> (usize, usize) {
    let mut nonzero = 0;
    let mut total = 0;
    for (name, t) in model.params.iter() {
        total += t.numel();
        match model.masks.get(name) {
            Some(mask) => {
                let coeffs = mask.expand();
                nonzero += t
                    .data()
                    .iter()
                    .zip(&coeffs)
                    .filter(|&(&x, &c)| c != 0.0 && x != 0.0)
                    .count();
            }
            None => nonzero += t.data().iter().filter(|&&x| x != 0.0).count(),
        }
    }
    (nonzero, total)
}

fn histogram_16_log_bins(norms: &[f64]) -> Vec<(f64, f64, usize)> {
    let hi = norms.iter().cloned().fold(0.0_f64, f64::max);
    let lo_positive = norms
        .iter()
        .cloned()
        .filter(|&x| x > 0.0)
        .fold(f64::INFINITY, f64::min);
    let (lo, hi) = if hi <= 0.0 || !lo_positive.is_finite() {
        (1e-12, 1.0)
    } else {
        (lo_positive.min(hi / 2.0), hi)
    };
    let ratio = (hi / lo).powf(1.0 / 16.0);
    let mut bins = vec![0usize; 16];
    for &x in norms {
        let idx = if x < lo * ratio {
            0
        } else {
            let i = ((x / lo).ln() / ratio.ln()).floor() as usize;
            i.min(15)
        };
        bins[idx] += 1;
    }
    (0..16)
        .map(|i| {
            let lo_edge = if i == 0 { 0.0 } else { lo * ratio.powi(i as i32) };
            (lo_edge, lo * ratio.powi(i as i32 + 1), bins[i])
        })
        .collect()
}

fn cmd_mask_report(checkpoint: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    if ck.masks.is_empty() {
        bail!("checkpoint {} contains no masks", checkpoint.display());
    }
    let (_, model) = materialize(ck)?;
    let mut norms = Vec::new();
    let mut total_blocks = 0;
    for (layer, mask) in model.masks.iter() {
        let w: &Tensor = model.params.get(layer)?;
        println!(
            "layer {layer} sparsity {:.5} alive_blocks {}/{}",
            mask.sparsity(),
            mask.alive_blocks(),
            mask.total_blocks()
        );
        total_blocks += mask.total_blocks();
        norms.extend(block_norms(w)?);
    }
    println!("block-norm histogram ({} blocks, 16 log-spaced bins):", total_blocks);
    let mut counted = 0;
    for (lo, hi, n) in histogram_16_log_bins(&norms) {
        println!("  [{lo:.3e}, {hi:.3e}) {n}");
        counted += n;
    }
    assert_eq!(counted, total_blocks, "histogram must cover every block");
    let (nonzero, total) = nonzero_params(&model);
    println!("nonzero parameters {nonzero} / {total}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train => {
            let cfg = load_config(&cli)?;
            if cli.dry_run {
                return print_schedule(&cfg, cfg.train_steps, "train");
            }
            let out = PathBuf::from(&cfg.out_dir);
            let summary = run_supernet(&cfg, &out, None)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Cmd::Pretrain => {
            let cfg = load_config(&cli)?;
            if cli.dry_run {
                return print_schedule(&cfg, cfg.train_pretrain_steps, "pretrain");
            }
            let out = PathBuf::from(&cfg.out_dir);
            let summary = run_pretrain(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Cmd::Finetune { init } => {
            let cfg = load_config(&cli)?;
            if cli.dry_run {
                return print_schedule(&cfg, cfg.train_steps, "finetune");
            }
            let out = PathBuf::from(&cfg.out_dir);
            let summary = run_supernet(&cfg, &out, init.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Cmd::Eval { checkpoint, mode } => cmd_eval(checkpoint, *mode),
        Cmd::MaskReport { checkpoint } => cmd_mask_report(checkpoint),
        Cmd::Bench { dim, sparsity, reps } => {
            let seed = cli.seed.unwrap_or(42);
            let result = kernels::bench(*dim, *sparsity, *reps, seed)?;
            println!("{}", serde_json::to_string(&result)?);
            Ok(())
        }
        Cmd::DumpLayout { frames, center, left, right } => {
            let cfg = load_config(&cli)?;
            let layout = segment(
                *frames,
                center.unwrap_or(cfg.chunk_center),
                left.unwrap_or(cfg.chunk_left),
                right.unwrap_or(cfg.chunk_right),
            )?;
            println!("{}", serde_json::to_string_pretty(&layout)?);
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
