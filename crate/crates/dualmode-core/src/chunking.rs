//! Block processing of an utterance into contextual segments: consecutive
//! center ranges partition the frames, and each center attends to a bounded
//! left window and a short look-ahead. A full-context layout is the degenerate
//! case of one center covering everything with no look-ahead.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::AllowMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub center_start: usize,
    pub center_end: usize,
    pub left_start: usize,
    pub right_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub frames: usize,
    pub center: usize,
    pub left: usize,
    pub right: usize,
    pub segments: Vec<Segment>,
}

/// Splits `frames` into ceil(frames/center) segments. Center ranges partition
/// `[0, frames)`; each segment's context window is
/// `[max(0, center_start - left), min(frames, center_end + right))`.
pub fn segment(frames: usize, center: usize, left: usize, right: usize) -> Result<SegmentLayout> {
    if frames == 0 {
        return Err(Error::EmptyInput("segment layout over zero frames".into()));
    }
    if center == 0 {
        return Err(Error::Config("segment center length must be >= 1".into()));
    }
    let mut segments = Vec::with_capacity(frames.div_ceil(center));
    let mut start = 0;
    while start < frames {
        let end = (start + center).min(frames);
        segments.push(Segment {
            center_start: start,
            center_end: end,
            left_start: start.saturating_sub(left),
            right_end: (end + right).min(frames),
        });
        start = end;
    }
    Ok(SegmentLayout {
        frames,
        center,
        left,
        right,
        segments,
    })
}

impl SegmentLayout {
    /// One segment spanning every frame with no look-ahead beyond it.
    pub fn is_full_context(&self) -> bool {
        self.segments.len() == 1 && self.right == 0
    }

    /// Mask over queries x keys: query q in some center range may see key k
    /// iff k lies inside that segment's context window.
    pub fn attention_allow(&self) -> AllowMask {
        let t = self.frames;
        let mut bits = vec![false; t * t];
        for seg in &self.segments {
            for q in seg.center_start..seg.center_end {
                for k in seg.left_start..seg.right_end {
                    bits[q * t + k] = true;
                }
            }
        }
        AllowMask::new(t, t, bits).expect("layout dims are consistent")
    }

    /// Segment owning frame `q`.
    pub fn segment_of(&self, q: usize) -> &Segment {
        &self.segments[q / self.center]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Streaming,
    FullContext,
}

/// Draws the per-step operating point: streaming at center length tau0, or
/// full context at tau1, equally probable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSampler {
    pub tau0: usize,
    pub tau1: usize,
}

impl ModeSampler {
    pub fn new(tau0: usize, tau1: usize) -> Result<Self> {
        if tau0 < 1 || tau1 < tau0 {
            return Err(Error::Config(format!(
                "sampler needs 1 <= tau0 <= tau1, got tau0={tau0} tau1={tau1}"
            )));
        }
        Ok(ModeSampler { tau0, tau1 })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Mode {
        if rng.random_bool(0.5) {
            Mode::Streaming
        } else {
            Mode::FullContext
        }
    }

    /// Layout for an utterance of `frames` under the given mode. Full context
    /// uses center max(tau1, frames) and zero right context; streaming uses
    /// tau0 with the configured left/right windows.
    pub fn layout_for(&self, mode: Mode, frames: usize, left: usize, right: usize) -> Result<SegmentLayout> {
        match mode {
            Mode::Streaming => segment(frames, self.tau0, left, right),
            Mode::FullContext => segment(frames, self.tau1.max(frames), left, 0),
        }
    }
}
