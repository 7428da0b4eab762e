//! Transducer negative log-likelihood by forward dynamic programming over the
//! (T, U+1) lattice, built on the tape so gradients flow through every logadd,
//! plus greedy decoding.
//!
//! `log_probs[t, u, k]` is the log posterior of symbol k after consuming t
//! frames and u labels. The recursion is
//! alpha[t, u] = logadd(alpha[t-1, u] + lp[t-1, u, blank],
//!                      alpha[t, u-1] + lp[t, u-1, y_u])
//! with alpha[0, 0] = 0, and loss = -(alpha[T-1, U] + lp[T-1, U, blank]).

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Validates labels against a vocabulary of `vocab` symbols including blank.
fn check_labels(labels: &[usize], blank: usize, vocab: usize) -> Result<()> {
    for &y in labels {
        if y >= vocab || y == blank {
            return Err(Error::Label { label: y, vocab });
        }
    }
    Ok(())
}

/// Negative log-likelihood of `labels` under `log_probs` of shape
/// `[T, U+1, V+1]`. All arithmetic stays in log space on the tape.
pub fn rnnt_loss(tape: &mut Tape, log_probs: Var, labels: &[usize], blank: usize) -> Result<Var> {
    let shape = tape.value(log_probs).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("rnnt_loss", format!("log_probs shape {:?}", shape)));
    }
    let (t_len, u_len, vocab) = (shape[0], shape[1], shape[2]);
    if t_len == 0 {
        return Err(Error::EmptyInput("rnnt_loss over zero frames".into()));
    }
    if u_len != labels.len() + 1 {
        return Err(Error::dim(
            "rnnt_loss",
            format!("lattice U+1 = {} vs {} labels", u_len, labels.len()),
        ));
    }
    if blank >= vocab {
        return Err(Error::Label { label: blank, vocab });
    }
    check_labels(labels, blank, vocab)?;

    let u_max = labels.len();
    // alpha for the current t, built row by row
    let mut alpha: Vec<Var> = Vec::with_capacity(u_max + 1);
    alpha.push(tape.scalar_const(0.0));
    for u in 1..=u_max {
        let emit = tape.select(log_probs, &[0, u - 1, labels[u - 1]])?;
        let a = tape.add(alpha[u - 1], emit)?;
        alpha.push(a);
    }
    for t in 1..t_len {
        let mut next: Vec<Var> = Vec::with_capacity(u_max + 1);
        let blank_lp = tape.select(log_probs, &[t - 1, 0, blank])?;
        next.push(tape.add(alpha[0], blank_lp)?);
        for u in 1..=u_max {
            let blank_lp = tape.select(log_probs, &[t - 1, u, blank])?;
            let from_blank = tape.add(alpha[u], blank_lp)?;
            let emit_lp = tape.select(log_probs, &[t, u - 1, labels[u - 1]])?;
            let from_emit = tape.add(next[u - 1], emit_lp)?;
            next.push(tape.logadd(from_blank, from_emit)?);
        }
        alpha = next;
    }
    let final_blank = tape.select(log_probs, &[t_len - 1, u_max, blank])?;
    let total = tape.add(alpha[u_max], final_blank)?;
    tape.scale(total, -1.0)
}

/// Produces joiner logits for one (frame, label-history) pair. Implemented by
/// the model; small fixtures implement it directly in tests.
pub trait JointScorer {
    fn blank(&self) -> usize;
    /// Logits over V+1 symbols for frame `t` given the emitted history.
    fn logits(&self, t: usize, h_enc_t: &[f64], history: &[usize]) -> Result<Vec<f64>>;
}

/// Standard greedy transducer search: at each frame emit argmax labels until
/// blank wins or the per-frame cap is hit, then advance. Argmax ties resolve
/// to the lowest index.
pub fn greedy_decode(
    encoder_out: &Tensor,
    scorer: &dyn JointScorer,
    max_symbols_per_frame: usize,
) -> Result<Vec<usize>> {
    if max_symbols_per_frame == 0 {
        return Err(Error::Config("max_symbols_per_frame must be >= 1".into()));
    }
    if encoder_out.shape().len() != 2 {
        return Err(Error::dim(
            "greedy_decode",
            format!("encoder output shape {:?}", encoder_out.shape()),
        ));
    }
    let (t_len, d) = (encoder_out.shape()[0], encoder_out.shape()[1]);
    let blank = scorer.blank();
    let mut hyp: Vec<usize> = Vec::new();
    for t in 0..t_len {
        let row = &encoder_out.data()[t * d..(t + 1) * d];
        let mut emitted = 0;
        loop {
            let logits = scorer.logits(t, row, &hyp)?;
            let arg = argmax(&logits);
            if arg == blank {
                break;
            }
            hyp.push(arg);
            emitted += 1;
            if emitted == max_symbols_per_frame {
                break;
            }
        }
    }
    Ok(hyp)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Levenshtein distance between label sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
