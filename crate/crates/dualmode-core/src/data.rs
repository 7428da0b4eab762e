//! Synthetic utterance corpus with a deterministic teacher labeling.
//!
//! Each utterance is a seeded random feature sequence. The teacher bucketizes
//! the mean of each stride-length window into one of V classes; stored labels
//! are exactly the teacher's output. Features are drawn so every window mean
//! sits well inside its bucket: pick a class, emit values near that bucket's
//! center with small jitter and per-frame noise. This keeps labels uniform
//! over classes and the task learnable in both attention modes.
//!
//! The teacher also adds a scaled copy of the mean LOOKAHEAD_WINDOWS ahead
//! before bucketizing. That distance exceeds the look-ahead reachable through
//! the default chunked layouts even after per-layer compounding, so bounded
//! look-ahead caps accuracy below what full-context attention can reach.
//!
//! The trailing partial window is averaged over its real frames; stacked
//! feature windows are zero-padded to full stride length.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub num_train: usize,
    pub num_valid: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub feature_dim: usize,
    pub vocab: usize,
    pub stride: usize,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_min < 1 || self.t_min > self.t_max {
            return Err(Error::Config(format!(
                "t range [{}, {}] invalid",
                self.t_min, self.t_max
            )));
        }
        if self.feature_dim < 1 || self.vocab < 1 || self.stride < 1 {
            return Err(Error::Config("feature_dim, vocab, stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// One utterance: raw frames, pre-stacked windows, and teacher labels.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub features: Tensor,
    pub windows: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
        }
    }
}

/// Number of stride windows covering `frames`.
pub fn num_windows(frames: usize, stride: usize) -> usize {
    frames.div_ceil(stride)
}

/// Class in 1..=vocab for a window mean; buckets partition [-1, 1].
pub fn bucketize(mean: f64, vocab: usize) -> usize {
    let width = 2.0 / vocab as f64;
    let idx = ((mean + 1.0) / width).floor();
    let idx = idx.clamp(0.0, (vocab - 1) as f64) as usize;
    idx + 1
}

/// Future-window distance the teacher folds into each label.
pub const LOOKAHEAD_WINDOWS: usize = 7;

/// Weight of the look-ahead mean, as a fraction of one bucket width.
pub const LOOKAHEAD_GAIN: f64 = 0.35;

/// Teacher labels: bucketized mean of each stride window (real frames only),
/// shifted by a fraction of the mean LOOKAHEAD_WINDOWS ahead when one exists.
pub fn teacher_labels(features: &Tensor, stride: usize, vocab: usize) -> Result<Vec<usize>> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::dim("teacher_labels", format!("expected [T, dim], got {shape:?}")));
    }
    let (frames, dim) = (shape[0], shape[1]);
    if frames == 0 {
        return Err(Error::EmptyInput("teacher_labels".into()));
    }
    let data = features.data();
    let windows = num_windows(frames, stride);
    let mut means = Vec::with_capacity(windows);
    for w in 0..windows {
        let start = w * stride;
        let end = ((w + 1) * stride).min(frames);
        let count = (end - start) * dim;
        let sum: f64 = data[start * dim..end * dim].iter().sum();
        means.push(sum / count as f64);
    }
    let gain = LOOKAHEAD_GAIN * 2.0 / vocab as f64;
    let labels = (0..windows)
        .map(|w| {
            let shift = match means.get(w + LOOKAHEAD_WINDOWS) {
                Some(&ahead) => gain * ahead,
                None => 0.0,
            };
            bucketize(means[w] + shift, vocab)
        })
        .collect();
    Ok(labels)
}

/// Stacks stride-length frame windows into rows of `stride * dim`, zero-padded.
pub fn window_stack(features: &Tensor, stride: usize) -> Result<Tensor> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::dim("window_stack", format!("expected [T, dim], got {shape:?}")));
    }
    let (frames, dim) = (shape[0], shape[1]);
    if frames == 0 {
        return Err(Error::EmptyInput("window_stack".into()));
    }
    let rows = num_windows(frames, stride);
    let row_len = stride * dim;
    let mut out = vec![0.0; rows * row_len];
    let data = features.data();
    for w in 0..rows {
        let start = w * stride;
        let end = ((w + 1) * stride).min(frames);
        out[w * row_len..w * row_len + (end - start) * dim]
            .copy_from_slice(&data[start * dim..end * dim]);
    }
    Tensor::new(vec![rows, row_len], out)
}

fn synthesize_utterance(cfg: &DataConfig, seed: u64, split: Split, index: u64) -> Utterance {
    let mut r = rng::stream(seed, &[purpose::DATA, split.id(), index]);
    let frames = r.random_range(cfg.t_min..=cfg.t_max);
    let width = 2.0 / cfg.vocab as f64;
    let mut data = vec![0.0; frames * cfg.feature_dim];
    for w in 0..num_windows(frames, cfg.stride) {
        let class = r.random_range(0..cfg.vocab);
        let center = -1.0 + (class as f64 + 0.5) * width;
        let level = center + 0.3 * width * (r.random::<f64>() * 2.0 - 1.0);
        let start = w * cfg.stride;
        let end = ((w + 1) * cfg.stride).min(frames);
        for x in &mut data[start * cfg.feature_dim..end * cfg.feature_dim] {
            *x = level + 0.05 * width * (r.random::<f64>() * 2.0 - 1.0);
        }
    }
    let features = Tensor::new(vec![frames, cfg.feature_dim], data).expect("shape matches data");
    let windows = window_stack(&features, cfg.stride).expect("non-empty features");
    let labels = teacher_labels(&features, cfg.stride, cfg.vocab).expect("non-empty features");
    Utterance { features, windows, labels }
}

/// Deterministic corpus for a split; utterance i depends only on (seed, split, i).
pub fn synthesize(cfg: &DataConfig, seed: u64, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let count = match split {
        Split::Train => cfg.num_train,
        Split::Valid => cfg.num_valid,
    };
    if count == 0 {
        return Err(Error::EmptyInput("synthesize".into()));
    }
    let utterances = (0..count)
        .map(|i| synthesize_utterance(cfg, seed, split, i as u64))
        .collect();
    Ok(Dataset { utterances })
}

/// All-constant corpus; useful for reconstruction sanity checks.
pub fn constant_dataset(cfg: &DataConfig, count: usize, frames: usize, value: f64) -> Result<Dataset> {
    cfg.validate()?;
    if count == 0 || frames == 0 {
        return Err(Error::EmptyInput("constant_dataset".into()));
    }
    let features = Tensor::new(vec![frames, cfg.feature_dim], vec![value; frames * cfg.feature_dim])?;
    let windows = window_stack(&features, cfg.stride)?;
    let labels = teacher_labels(&features, cfg.stride, cfg.vocab)?;
    let utt = Utterance { features, windows, labels };
    Ok(Dataset { utterances: vec![utt; count] })
}
