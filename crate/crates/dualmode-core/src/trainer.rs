//! Training orchestration: the three-phase supernet schedule (dense, iterative
//! pruning, frozen-mask), per-worker dual-mode sampling, simulated data-parallel
//! workers with fixed-order gradient averaging, the optional masked-frame
//! reconstruction pretraining phase, and per-mode best-checkpoint tracking.
//!
//! Determinism contract: every random decision draws from a stream keyed by
//! (seed, purpose, worker, step), gradients reduce in worker order, and logs
//! serialize only reproducible fields, so identical configs produce
//! byte-identical metrics and checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chunking::{Mode, ModeSampler};
use crate::config::RunConfig;
use crate::data::{self, Dataset, Split, Utterance};
use crate::error::{Error, Result};
use crate::model::{
    self, load_checkpoint, save_checkpoint, Bound, MaskSet, ModelScorer, ParamStore, PretrainModel,
    RnntModel, ScheduleState,
};
use crate::optim::{lr_at, AdamConfig, AdamW, LrConfig, SkipSet};
use crate::parallel;
use crate::rng::{self, purpose};
use crate::rnnt::{edit_distance, greedy_decode};
use crate::sparsity::{
    group_lasso_decay, group_lasso_lambda, penalty_value, update_mask, PruneSchedule,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Greedy decode cap per encoder frame.
pub const MAX_SYMBOLS_PER_FRAME: usize = 4;

/// Worker id slot reserved for evaluation-time mask draws.
const EVAL_STREAM: u64 = u64::MAX;

/// Which masks a phase is allowed to update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneScope {
    All,
    EncoderOnly,
    PredictorOnly,
}

impl PruneScope {
    fn admits(self, layer: &str) -> bool {
        match self {
            PruneScope::All => true,
            PruneScope::EncoderOnly => layer.starts_with("encoder."),
            PruneScope::PredictorOnly => layer.starts_with("pred."),
        }
    }
}

/// One line of the metrics log; wall time is measured but never serialized so
/// reruns stay byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub modes: Vec<Mode>,
    pub loss: f64,
    pub lr: f64,
    pub sparsity: BTreeMap<String, f64>,
    pub lasso_penalty: f64,
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Pretraining log line: `masked` records which workers applied masks.
#[derive(Debug, Clone, Serialize)]
pub struct PretrainStepReport {
    pub step: usize,
    pub masked: Vec<bool>,
    pub loss: f64,
    pub lr: f64,
    pub sparsity: BTreeMap<String, f64>,
    pub lasso_penalty: f64,
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
struct MaskEvent {
    step: usize,
    event: u32,
    layer: String,
    pruned: Vec<usize>,
    sparsity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub token_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPointer {
    pub checkpoint: String,
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub final_sparsity: BTreeMap<String, f64>,
    pub best_streaming: Option<BestPointer>,
    pub best_nonstreaming: Option<BestPointer>,
    pub final_streaming: EvalMetrics,
    pub final_nonstreaming: EvalMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub final_sparsity: BTreeMap<String, f64>,
    pub recon_masked_view: f64,
    pub recon_dense_view: f64,
    pub checkpoint: String,
}

/// Loss and per-parameter gradients from one logical worker's batch.
pub struct WorkerOutput {
    pub mode: Mode,
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Forward/backward over one worker batch on a single tape. Masks apply iff
/// the worker sampled streaming; losses average in batch order.
pub fn worker_pass(
    model: &RnntModel,
    batch: &[&Utterance],
    mode: Mode,
    sampler: &ModeSampler,
    left: usize,
    right: usize,
) -> Result<WorkerOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("worker batch".into()));
    }
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, &model.params, true, None);
    let masks = match mode {
        Mode::Streaming => Some(&model.masks),
        Mode::FullContext => None,
    };
    let mut sum = None;
    for u in batch {
        let frames = u.windows.shape()[0];
        let layout = sampler.layout_for(mode, frames, left, right)?;
        let l = model::forward_loss(
            &mut tape,
            &model.cfg,
            &bound,
            masks,
            &u.features,
            &u.labels,
            &layout,
        )?;
        sum = Some(match sum {
            Some(s) => tape.add(s, l)?,
            None => l,
        });
    }
    let mean = tape.scale(sum.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    tape.backward(mean)?;
    let loss = tape.value(mean).data()[0];
    let mut grads = Vec::with_capacity(model.params.len());
    for name in model.params.names() {
        grads.push(tape.grad(bound.var(name)?).to_vec());
    }
    Ok(WorkerOutput { mode, loss, grads })
}

/// Mean loss and greedy token accuracy over a dataset under one mode; masks
/// apply iff streaming. Utterances may evaluate concurrently; the reduction
/// order is fixed.
pub fn evaluate(
    model: &RnntModel,
    ds: &Dataset,
    mode: Mode,
    sampler: &ModeSampler,
    left: usize,
    right: usize,
) -> Result<EvalMetrics> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("evaluation dataset".into()));
    }
    let per: Vec<Result<(f64, f64)>> = parallel::map_indices(ds.len(), |i| {
        let u = &ds.utterances[i];
        let frames = u.windows.shape()[0];
        let layout = sampler.layout_for(mode, frames, left, right)?;
        let masks = match mode {
            Mode::Streaming => Some(&model.masks),
            Mode::FullContext => None,
        };
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &model.params, false, None);
        let h_enc = model::encode(&mut tape, &model.cfg, &bound, masks, &u.features, &layout)?;
        let h_pred = model::predict(&mut tape, &model.cfg, &bound, masks, &u.labels)?;
        let logits = model::join(&mut tape, &bound, h_enc, h_pred)?;
        let lp = tape.log_softmax(logits)?;
        let loss_var = crate::rnnt::rnnt_loss(&mut tape, lp, &u.labels, model::BLANK)?;
        let loss = tape.value(loss_var).data()[0];
        let enc = tape.value(h_enc).clone();
        let scorer = ModelScorer { cfg: &model.cfg, params: &model.params, masks };
        let hyp = greedy_decode(&enc, &scorer, MAX_SYMBOLS_PER_FRAME)?;
        let dist = edit_distance(&hyp, &u.labels);
        let acc = 1.0 - (dist as f64 / u.labels.len().max(1) as f64).min(1.0);
        Ok((loss, acc))
    });
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    for r in per {
        let (l, a) = r?;
        loss_sum += l;
        acc_sum += a;
    }
    let n = ds.len() as f64;
    Ok(EvalMetrics { loss: loss_sum / n, token_accuracy: acc_sum / n })
}

/// Mean masked-frame reconstruction loss; mask draws are deterministic per
/// utterance index.
pub fn evaluate_reconstruction(
    model: &PretrainModel,
    ds: &Dataset,
    apply_masks: bool,
    seed: u64,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("evaluation dataset".into()));
    }
    let per: Vec<Result<f64>> = parallel::map_indices(ds.len(), |i| {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &model.params, false, None);
        let masks = if apply_masks { Some(&model.masks) } else { None };
        let loss = reconstruction_loss(
            &mut tape,
            model,
            &bound,
            masks,
            &ds.utterances[i],
            seed,
            EVAL_STREAM,
            0,
            i as u64,
        )?;
        Ok(tape.value(loss).data()[0])
    });
    let mut sum = 0.0;
    for r in per {
        sum += r?;
    }
    Ok(sum / ds.len() as f64)
}

/// Squared error on masked window rows: half the rows (at least one) are
/// zeroed on input and must be reconstructed from context.
#[allow(clippy::too_many_arguments)]
fn reconstruction_loss(
    tape: &mut Tape,
    model: &PretrainModel,
    bound: &Bound,
    masks: Option<&MaskSet>,
    u: &Utterance,
    seed: u64,
    worker: u64,
    step: u64,
    slot: u64,
) -> Result<crate::tape::Var> {
    let frames = u.windows.shape()[0];
    let row_len = u.windows.shape()[1];
    let mut r = rng::stream(seed, &[purpose::PRETRAIN_MASK, worker, step, slot]);
    let mut selected: Vec<bool> = (0..frames).map(|_| r.random_bool(0.5)).collect();
    if !selected.iter().any(|&b| b) {
        let idx = r.random_range(0..frames);
        selected[idx] = true;
    }
    let mut masked_data = u.windows.data().to_vec();
    for (t, &m) in selected.iter().enumerate() {
        if m {
            masked_data[t * row_len..(t + 1) * row_len].fill(0.0);
        }
    }
    let input = Tensor::new(vec![frames, row_len], masked_data)?;
    let h = model::encode_windows(tape, &model.cfg, bound, masks, &input, None)?;
    let wr = bound.var("recon.w")?;
    let br = bound.var("recon.b")?;
    let recon = tape.linear(h, wr, Some(br))?;
    let neg_target: Vec<f64> = u.windows.data().iter().map(|x| -x).collect();
    let diff = tape.add_const(recon, &neg_target)?;
    let sq = tape.mul(diff, diff)?;
    let n_masked = selected.iter().filter(|&&b| b).count() * row_len;
    let norm = 1.0 / n_masked as f64;
    let weights: Vec<f64> = (0..frames * row_len)
        .map(|i| if selected[i / row_len] { norm } else { 0.0 })
        .collect();
    let weighted = tape.mul_const(sq, &weights)?;
    tape.sum(weighted)
}

fn pretrain_worker_pass(
    model: &PretrainModel,
    batch: &[&Utterance],
    apply_masks: bool,
    seed: u64,
    worker: u64,
    step: u64,
) -> Result<WorkerOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("worker batch".into()));
    }
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, &model.params, true, None);
    let masks = if apply_masks { Some(&model.masks) } else { None };
    let mut sum = None;
    for (slot, u) in batch.iter().enumerate() {
        let l = reconstruction_loss(&mut tape, model, &bound, masks, u, seed, worker, step, slot as u64)?;
        sum = Some(match sum {
            Some(s) => tape.add(s, l)?,
            None => l,
        });
    }
    let mean = tape.scale(sum.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    tape.backward(mean)?;
    let loss = tape.value(mean).data()[0];
    let mut grads = Vec::with_capacity(model.params.len());
    for name in model.params.names() {
        grads.push(tape.grad(bound.var(name)?).to_vec());
    }
    Ok(WorkerOutput {
        mode: if apply_masks { Mode::Streaming } else { Mode::FullContext },
        loss,
        grads,
    })
}

/// Expanded mask coefficients aligned with store order; rebuilt after every
/// prune event.
struct MaskCache {
    coeffs: Vec<Option<Vec<f64>>>,
}

impl MaskCache {
    fn build(params: &ParamStore, masks: &MaskSet) -> Self {
        let coeffs = params
            .names()
            .iter()
            .map(|name| masks.get(name).map(|m| m.expand()))
            .collect();
        MaskCache { coeffs }
    }

    /// Optimizer skip set: freeze exactly the pruned coordinates.
    fn skip_set(&self) -> SkipSet {
        self.coeffs
            .iter()
            .map(|c| c.as_ref().map(|v| v.iter().map(|&x| x == 0.0).collect()))
            .collect()
    }

    /// Streaming gradients must be exactly zero wherever the mask is zero.
    fn check_streaming_grads(&self, step: usize, grads: &[Vec<f64>]) -> Result<()> {
        for (c, g) in self.coeffs.iter().zip(grads) {
            let Some(c) = c else { continue };
            for (i, (&coeff, &grad)) in c.iter().zip(g.iter()).enumerate() {
                if coeff == 0.0 && grad != 0.0 {
                    return Err(Error::Invariant(format!(
                        "step {step}: pruned coordinate {i} received gradient {grad}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn step_error(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn sample_batch(seed: u64, worker: u64, step: u64, len: usize, batch: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, &[purpose::BATCH, worker, step]);
    (0..batch).map(|_| r.random_range(0..len)).collect()
}

fn average_outputs(outs: &[WorkerOutput]) -> (f64, Vec<Vec<f64>>) {
    let inv = 1.0 / outs.len() as f64;
    let mut loss = 0.0;
    let mut grads = outs[0].grads.clone();
    for o in &outs[1..] {
        for (acc, g) in grads.iter_mut().zip(&o.grads) {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
    }
    for o in outs {
        loss += o.loss;
    }
    for g in &mut grads {
        for a in g.iter_mut() {
            *a *= inv;
        }
    }
    (loss * inv, grads)
}

struct Logs {
    jsonl: File,
    csv: File,
    mask_events: File,
}

impl Logs {
    fn create(out_dir: &Path) -> Result<Self> {
        let mut csv = File::create(out_dir.join("metrics.csv"))?;
        writeln!(csv, "step,loss,lr,sparsity,lasso")?;
        Ok(Logs {
            jsonl: File::create(out_dir.join("metrics.jsonl"))?,
            csv,
            mask_events: File::create(out_dir.join("mask_events.jsonl"))?,
        })
    }

    fn report<T: Serialize>(&mut self, report: &T, step: usize, loss: f64, lr: f64, mean_sparsity: f64, lasso: f64) -> Result<()> {
        writeln!(self.jsonl, "{}", serde_json::to_string(report)?)?;
        writeln!(self.csv, "{step},{loss},{lr},{mean_sparsity},{lasso}")?;
        Ok(())
    }

    fn mask_event(&mut self, ev: &MaskEvent) -> Result<()> {
        writeln!(self.mask_events, "{}", serde_json::to_string(ev)?)?;
        Ok(())
    }
}

fn mean_sparsity(sparsity: &BTreeMap<String, f64>) -> f64 {
    if sparsity.is_empty() {
        return 0.0;
    }
    sparsity.values().sum::<f64>() / sparsity.len() as f64
}

fn frozen_layers(masks: &MaskSet) -> Vec<String> {
    masks
        .iter()
        .filter(|(_, m)| m.is_frozen())
        .map(|(n, _)| n.to_string())
        .collect()
}

/// Applies a scheduled prune event to every in-scope mask.
fn apply_prune_event(
    params: &ParamStore,
    masks: &mut MaskSet,
    scope: PruneScope,
    schedule: &PruneSchedule,
    k: u32,
    step: usize,
    logs: &mut Logs,
) -> Result<()> {
    let remaining = schedule.remaining_after(k);
    let freeze = k == schedule.n;
    let layers: Vec<String> = masks
        .layers()
        .filter(|l| scope.admits(l))
        .map(str::to_string)
        .collect();
    for name in &layers {
        let w = params.get(name)?;
        let mask = masks.get_mut(name).expect("layer listed above");
        let pruned = update_mask(w, mask, remaining)?;
        logs.mask_event(&MaskEvent {
            step,
            event: k,
            layer: name.clone(),
            pruned,
            sparsity: mask.sparsity(),
        })?;
        if freeze {
            mask.freeze();
        }
    }
    Ok(())
}

/// Group-lasso proximal decay over in-scope layers; λ_i is recomputed from the
/// live weights each time. Pruned entries are skipped only on masked-pure
/// steps, matching the weight-decay rule.
fn apply_lasso(
    params: &mut ParamStore,
    masks: &MaskSet,
    scope: PruneScope,
    lambda: f64,
    lr: f64,
    masked_pure: bool,
) -> Result<()> {
    let layers: Vec<String> = masks
        .layers()
        .filter(|l| scope.admits(l))
        .map(str::to_string)
        .collect();
    for name in &layers {
        let skip = if masked_pure { masks.get(name) } else { None };
        let li = group_lasso_lambda(params.get(name)?, lambda)?;
        group_lasso_decay(params.get_mut(name)?, li, lr, skip)?;
    }
    Ok(())
}

fn lasso_penalty(params: &ParamStore, masks: &MaskSet, scope: PruneScope, lambda: f64) -> Result<f64> {
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let tensors: Vec<&Tensor> = masks
        .layers()
        .filter(|l| scope.admits(l))
        .map(|l| params.get(l))
        .collect::<Result<_>>()?;
    penalty_value(&tensors, lambda)
}

struct BestTrack {
    streaming: Option<BestPointer>,
    nonstreaming: Option<BestPointer>,
}

impl BestTrack {
    fn update(
        &mut self,
        out_dir: &Path,
        label: &str,
        step: usize,
        streaming: EvalMetrics,
        nonstreaming: EvalMetrics,
    ) -> Result<()> {
        let improved = |best: &Option<BestPointer>, loss: f64| best.as_ref().is_none_or(|b| loss < b.loss);
        if improved(&self.streaming, streaming.loss) {
            self.streaming = Some(BestPointer {
                checkpoint: label.to_string(),
                step,
                loss: streaming.loss,
                accuracy: streaming.token_accuracy,
            });
            fs::write(
                out_dir.join("best_streaming"),
                serde_json::to_string_pretty(self.streaming.as_ref().expect("just set"))?,
            )?;
        }
        if improved(&self.nonstreaming, nonstreaming.loss) {
            self.nonstreaming = Some(BestPointer {
                checkpoint: label.to_string(),
                step,
                loss: nonstreaming.loss,
                accuracy: nonstreaming.token_accuracy,
            });
            fs::write(
                out_dir.join("best_nonstreaming"),
                serde_json::to_string_pretty(self.nonstreaming.as_ref().expect("just set"))?,
            )?;
        }
        Ok(())
    }
}

/// Runs the supernet phase: dense training until t0, iterative magnitude
/// pruning every ΔT steps, then frozen-mask dual-mode training. With
/// `init_from`, encoder weights and frozen encoder masks come from a
/// pretraining checkpoint and only the predictor is pruned here.
pub fn run_supernet(cfg: &RunConfig, out_dir: &Path, init_from: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    let steps = cfg.train_steps;
    if steps == 0 {
        return Err(Error::Config("train.steps must be >= 1".into()));
    }
    let schedule = cfg.schedule()?;
    if cfg.train_dense_warmup_steps > schedule.t0 {
        return Err(Error::Config(format!(
            "dense_warmup_steps {} exceeds schedule t0 {}",
            cfg.train_dense_warmup_steps, schedule.t0
        )));
    }
    if schedule.freeze_step() > steps {
        return Err(Error::Config(format!(
            "prune schedule ends at step {} but the phase has {} steps",
            schedule.freeze_step(),
            steps
        )));
    }
    fs::create_dir_all(out_dir)?;
    cfg.write_resolved(&out_dir.join("config.json"))?;

    let dcfg = cfg.data_config();
    let train = data::synthesize(&dcfg, cfg.seed, Split::Train)?;
    let valid = data::synthesize(&dcfg, cfg.seed, Split::Valid)?;
    let mut model = RnntModel::new(cfg.model_config(), cfg.seed)?;
    let mut scope = PruneScope::All;
    if let Some(src) = init_from {
        let ck = load_checkpoint(src)?;
        for (name, t) in ck.params.iter() {
            if !(name.starts_with("frontend.") || name.starts_with("encoder.")) {
                continue;
            }
            let dst = model.params.get_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "pretrained tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
        for (name, mask) in ck.masks.iter() {
            if !model.masks.contains(name) {
                return Err(Error::Checkpoint(format!("unexpected pretrained mask {name}")));
            }
            let mut m = mask.clone();
            m.freeze();
            model.masks.insert(m);
        }
        scope = PruneScope::PredictorOnly;
    }

    let lasso = cfg.lasso(schedule.freeze_step())?;
    let sampler = cfg.sampler()?;
    let lr_cfg = LrConfig::new(cfg.opt_lr_peak, cfg.lr_warmup_frac, cfg.lr_hold_frac, cfg.lr_decay_floor)?;
    let adam_cfg = AdamConfig {
        beta1: cfg.opt_beta1,
        beta2: cfg.opt_beta2,
        eps: 1e-8,
        weight_decay: cfg.opt_weight_decay,
    };
    let mut opt = AdamW::new(adam_cfg, &model.params.sizes());
    let mut logs = Logs::create(out_dir)?;
    let mut cache = MaskCache::build(&model.params, &model.masks);
    let mut best = BestTrack { streaming: None, nonstreaming: None };
    let mut events_done = 0u32;
    let flat_cfg = cfg.to_flat();
    let (left, right) = (cfg.chunk_left, cfg.chunk_right);
    let mut last_streaming = None;
    let mut last_nonstreaming = None;

    for step in 0..steps {
        let started = Instant::now();
        if let Some(k) = schedule.event_at(step) {
            apply_prune_event(&model.params, &mut model.masks, scope, &schedule, k, step, &mut logs)?;
            cache = MaskCache::build(&model.params, &model.masks);
            events_done = k;
        }

        let modes: Vec<Mode> = (0..cfg.workers)
            .map(|w| {
                if step < cfg.train_dense_warmup_steps {
                    Mode::FullContext
                } else {
                    let mut r = rng::stream(cfg.seed, &[purpose::MODE, w as u64, step as u64]);
                    sampler.sample(&mut r)
                }
            })
            .collect();
        let batches: Vec<Vec<usize>> = (0..cfg.workers)
            .map(|w| {
                sample_batch(cfg.seed, w as u64, step as u64, train.len(), cfg.train_batch_per_worker)
            })
            .collect();
        let results: Vec<Result<WorkerOutput>> = parallel::map_indices(cfg.workers, |w| {
            let refs: Vec<&Utterance> = batches[w].iter().map(|&i| &train.utterances[i]).collect();
            worker_pass(&model, &refs, modes[w], &sampler, left, right)
        });
        let mut outs = Vec::with_capacity(cfg.workers);
        for r in results {
            outs.push(r.map_err(|e| step_error(step, e))?);
        }
        for o in &outs {
            if o.mode == Mode::Streaming {
                cache.check_streaming_grads(step, &o.grads)?;
            }
        }
        let (loss, grads) = average_outputs(&outs);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, detail: format!("loss {loss}") });
        }
        let lr = lr_at(step, steps, &lr_cfg)?;
        let masked_pure = outs.iter().all(|o| o.mode == Mode::Streaming);
        let skip = if masked_pure { Some(cache.skip_set()) } else { None };
        opt.step(model.params.tensors_mut(), &grads, lr, skip.as_ref())?;
        if lasso.active_at(step) {
            apply_lasso(&mut model.params, &model.masks, scope, lasso.lambda, lr, masked_pure)?;
        }

        let sparsity = model.masks.sparsity_by_layer();
        let penalty = lasso_penalty(&model.params, &model.masks, scope, lasso.lambda)?;
        let report = StepReport {
            step,
            modes,
            loss,
            lr,
            sparsity: sparsity.clone(),
            lasso_penalty: penalty,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        logs.report(&report, step, loss, lr, mean_sparsity(&sparsity), penalty)?;

        let done = step + 1;
        if done % cfg.train_eval_interval == 0 || done == steps {
            let s_eval = evaluate(&model, &valid, Mode::Streaming, &sampler, left, right)?;
            let n_eval = evaluate(&model, &valid, Mode::FullContext, &sampler, left, right)?;
            let label = format!("ckpt-{done:06}");
            let metrics: BTreeMap<String, f64> = [
                ("streaming_loss".to_string(), s_eval.loss),
                ("streaming_accuracy".to_string(), s_eval.token_accuracy),
                ("nonstreaming_loss".to_string(), n_eval.loss),
                ("nonstreaming_accuracy".to_string(), n_eval.token_accuracy),
            ]
            .into_iter()
            .collect();
            let state = ScheduleState {
                prune_events_done: events_done,
                frozen: frozen_layers(&model.masks),
            };
            save_checkpoint(
                &out_dir.join(&label),
                &model.params,
                &model.masks,
                done,
                &flat_cfg,
                &metrics,
                &state,
            )?;
            best.update(out_dir, &label, done, s_eval, n_eval)?;
            last_streaming = Some(s_eval);
            last_nonstreaming = Some(n_eval);
        }
    }

    let summary = RunSummary {
        steps,
        final_sparsity: model.masks.sparsity_by_layer(),
        best_streaming: best.streaming.clone(),
        best_nonstreaming: best.nonstreaming.clone(),
        final_streaming: last_streaming.expect("at least one evaluation"),
        final_nonstreaming: last_nonstreaming.expect("at least one evaluation"),
    };
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Runs encoder-only masked-frame reconstruction pretraining with its own
/// prune schedule and group lasso; always full context, sampling only whether
/// masks apply. The final checkpoint carries the learned encoder masks.
pub fn run_pretrain(cfg: &RunConfig, out_dir: &Path) -> Result<PretrainSummary> {
    cfg.validate()?;
    let steps = cfg.train_pretrain_steps;
    if steps == 0 {
        return Err(Error::Config("train.pretrain_steps must be >= 1".into()));
    }
    let schedule = cfg.schedule()?;
    if schedule.freeze_step() > steps {
        return Err(Error::Config(format!(
            "prune schedule ends at step {} but pretraining has {} steps",
            schedule.freeze_step(),
            steps
        )));
    }
    fs::create_dir_all(out_dir)?;
    cfg.write_resolved(&out_dir.join("config.json"))?;

    let dcfg = cfg.data_config();
    let train = data::synthesize(&dcfg, cfg.seed, Split::Train)?;
    let valid = data::synthesize(&dcfg, cfg.seed, Split::Valid)?;
    let mut model = PretrainModel::new(cfg.model_config(), cfg.seed)?;
    let scope = PruneScope::EncoderOnly;
    let lasso = cfg.lasso(schedule.freeze_step())?;
    let lr_cfg = LrConfig::new(cfg.opt_lr_peak, cfg.lr_warmup_frac, cfg.lr_hold_frac, cfg.lr_decay_floor)?;
    let adam_cfg = AdamConfig {
        beta1: cfg.opt_beta1,
        beta2: cfg.opt_beta2,
        eps: 1e-8,
        weight_decay: cfg.opt_weight_decay,
    };
    let mut opt = AdamW::new(adam_cfg, &model.params.sizes());
    let mut logs = Logs::create(out_dir)?;
    let mut cache = MaskCache::build(&model.params, &model.masks);
    let mut events_done = 0u32;
    let flat_cfg = cfg.to_flat();

    for step in 0..steps {
        let started = Instant::now();
        if let Some(k) = schedule.event_at(step) {
            apply_prune_event(&model.params, &mut model.masks, scope, &schedule, k, step, &mut logs)?;
            cache = MaskCache::build(&model.params, &model.masks);
            events_done = k;
        }
        let masked: Vec<bool> = (0..cfg.workers)
            .map(|w| {
                let mut r = rng::stream(cfg.seed, &[purpose::MODE, w as u64, step as u64]);
                r.random_bool(0.5)
            })
            .collect();
        let batches: Vec<Vec<usize>> = (0..cfg.workers)
            .map(|w| {
                sample_batch(cfg.seed, w as u64, step as u64, train.len(), cfg.train_batch_per_worker)
            })
            .collect();
        let results: Vec<Result<WorkerOutput>> = parallel::map_indices(cfg.workers, |w| {
            let refs: Vec<&Utterance> = batches[w].iter().map(|&i| &train.utterances[i]).collect();
            pretrain_worker_pass(&model, &refs, masked[w], cfg.seed, w as u64, step as u64)
        });
        let mut outs = Vec::with_capacity(cfg.workers);
        for r in results {
            outs.push(r.map_err(|e| step_error(step, e))?);
        }
        for o in &outs {
            if o.mode == Mode::Streaming {
                cache.check_streaming_grads(step, &o.grads)?;
            }
        }
        let (loss, grads) = average_outputs(&outs);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, detail: format!("loss {loss}") });
        }
        let lr = lr_at(step, steps, &lr_cfg)?;
        let masked_pure = outs.iter().all(|o| o.mode == Mode::Streaming);
        let skip = if masked_pure { Some(cache.skip_set()) } else { None };
        opt.step(model.params.tensors_mut(), &grads, lr, skip.as_ref())?;
        if lasso.active_at(step) {
            apply_lasso(&mut model.params, &model.masks, scope, lasso.lambda, lr, masked_pure)?;
        }
        let sparsity = model.masks.sparsity_by_layer();
        let penalty = lasso_penalty(&model.params, &model.masks, scope, lasso.lambda)?;
        let report = PretrainStepReport {
            step,
            masked,
            loss,
            lr,
            sparsity: sparsity.clone(),
            lasso_penalty: penalty,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        logs.report(&report, step, loss, lr, mean_sparsity(&sparsity), penalty)?;
    }

    let recon_masked = evaluate_reconstruction(&model, &valid, true, cfg.seed)?;
    let recon_dense = evaluate_reconstruction(&model, &valid, false, cfg.seed)?;
    let label = "pretrain-final".to_string();
    let metrics: BTreeMap<String, f64> = [
        ("recon_masked_view".to_string(), recon_masked),
        ("recon_dense_view".to_string(), recon_dense),
    ]
    .into_iter()
    .collect();
    let state = ScheduleState { prune_events_done: events_done, frozen: frozen_layers(&model.masks) };
    save_checkpoint(
        &out_dir.join(&label),
        &model.params,
        &model.masks,
        steps,
        &flat_cfg,
        &metrics,
        &state,
    )?;
    let summary = PretrainSummary {
        steps,
        final_sparsity: model.masks.sparsity_by_layer(),
        recon_masked_view: recon_masked,
        recon_dense_view: recon_dense,
        checkpoint: label,
    };
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
