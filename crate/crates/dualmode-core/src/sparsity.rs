//! Block-structured pruning: 8x1 block masks over weight matrices, the
//! iterative magnitude-pruning schedule, and group-lasso decay applied as a
//! decoupled proximal step. A block covers 8 consecutive output rows in one
//! input column, so pruned structure maps directly onto the block-sparse
//! kernels.

use std::fs;
use std::io::{BufRead, BufReader, Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BLOCK_ROWS: usize = 8;
pub const BLOCK_COLS: usize = 1;

/// Norms below this are treated as exactly zero when dividing by them.
pub const NORM_EPS: f64 = 1e-12;

/// Per-layer pruning mask over the block grid. `bits[g * grid_cols + c]` is
/// true while the block (rows `8g..8g+8`, column `c`) is alive. Bits only ever
/// flip from true to false, and never once the mask is frozen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    layer: String,
    grid_rows: usize,
    grid_cols: usize,
    bits: Vec<bool>,
    frozen: bool,
}

impl BlockMask {
    /// All-alive mask for a `[dout, din]` weight matrix.
    pub fn dense(layer: impl Into<String>, dout: usize, din: usize) -> Result<Self> {
        if dout == 0 || din == 0 || dout % BLOCK_ROWS != 0 {
            return Err(Error::dim(
                "block_mask",
                format!("{}x{} not divisible into {}x{} blocks", dout, din, BLOCK_ROWS, BLOCK_COLS),
            ));
        }
        let grid_rows = dout / BLOCK_ROWS;
        Ok(BlockMask {
            layer: layer.into(),
            grid_rows,
            grid_cols: din,
            bits: vec![true; grid_rows * din],
            frozen: false,
        })
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    pub fn weight_shape(&self) -> (usize, usize) {
        (self.grid_rows * BLOCK_ROWS, self.grid_cols)
    }

    pub fn total_blocks(&self) -> usize {
        self.bits.len()
    }

    pub fn alive_blocks(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.alive_blocks() as f64 / self.total_blocks() as f64
    }

    pub fn bit(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn prune(&mut self, idx: &[usize]) {
        for &i in idx {
            self.bits[i] = false;
        }
    }

    /// Directly prunes the given block indices (monotone: bits only clear).
    pub fn prune_blocks(&mut self, idx: &[usize]) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenMask {
                layer: self.layer.clone(),
            });
        }
        for &i in idx {
            if i >= self.bits.len() {
                return Err(Error::dim(
                    "prune_blocks",
                    format!("block {} of {}", i, self.bits.len()),
                ));
            }
        }
        self.prune(idx);
        Ok(())
    }

    /// 0/1 coefficients at weight granularity, row-major `[dout * din]`.
    pub fn expand(&self) -> Vec<f64> {
        let (dout, din) = self.weight_shape();
        let mut out = vec![0.0; dout * din];
        for r in 0..dout {
            let gr = r / BLOCK_ROWS;
            for c in 0..din {
                if self.bits[gr * self.grid_cols + c] {
                    out[r * din + c] = 1.0;
                }
            }
        }
        out
    }

    /// Packs bits row-major over the grid, LSB-first within each byte.
    pub fn packed_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    /// Writes the export format: one JSON header line, then the packed bitmap.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let header = MaskHeader {
            layer: self.layer.clone(),
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            block_shape: [BLOCK_ROWS, BLOCK_COLS],
            sparsity: self.sparsity(),
        };
        let mut f = fs::File::create(path)?;
        serde_json::to_writer(&mut f, &header)?;
        f.write_all(b"\n")?;
        f.write_all(&self.packed_bits())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: MaskHeader = serde_json::from_str(line.trim_end())?;
        let mut packed = Vec::new();
        reader.read_to_end(&mut packed)?;
        let n = header.grid_rows * header.grid_cols;
        if packed.len() != n.div_ceil(8) {
            return Err(Error::Checkpoint(format!(
                "mask {}: {} bitmap bytes for {} blocks",
                header.layer,
                packed.len(),
                n
            )));
        }
        let bits: Vec<bool> = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(BlockMask {
            layer: header.layer,
            grid_rows: header.grid_rows,
            grid_cols: header.grid_cols,
            bits,
            frozen: false,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MaskHeader {
    layer: String,
    grid_rows: usize,
    grid_cols: usize,
    block_shape: [usize; 2],
    sparsity: f64,
}

/// Cumulative sparsity after n pruning intervals at per-interval fraction p.
pub fn sparsity_after(p: f64, n: u32) -> f64 {
    1.0 - (1.0 - p).powi(n as i32)
}

fn check_grid(w: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if w.shape().len() != 2 {
        return Err(Error::dim(op, format!("weight rank {:?}", w.shape())));
    }
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    if dout % BLOCK_ROWS != 0 || dout == 0 || din == 0 {
        return Err(Error::dim(op, format!("{}x{} not divisible into 8x1 blocks", dout, din)));
    }
    Ok((dout / BLOCK_ROWS, din))
}

/// L1 magnitude of each block, in block-grid row-major order.
pub fn block_scores(w: &Tensor) -> Result<Vec<f64>> {
    let (grid_rows, grid_cols) = check_grid(w, "block_scores")?;
    let d = w.data();
    let mut scores = vec![0.0; grid_rows * grid_cols];
    for (i, s) in scores.iter_mut().enumerate() {
        let (g, c) = (i / grid_cols, i % grid_cols);
        for r in 0..BLOCK_ROWS {
            *s += d[(g * BLOCK_ROWS + r) * grid_cols + c].abs();
        }
    }
    Ok(scores)
}

/// L2 norm of each block, in block-grid row-major order.
pub fn block_norms(w: &Tensor) -> Result<Vec<f64>> {
    let (grid_rows, grid_cols) = check_grid(w, "block_norms")?;
    let d = w.data();
    let mut norms = vec![0.0; grid_rows * grid_cols];
    for (i, s) in norms.iter_mut().enumerate() {
        let (g, c) = (i / grid_cols, i % grid_cols);
        let mut acc = 0.0;
        for r in 0..BLOCK_ROWS {
            let v = d[(g * BLOCK_ROWS + r) * grid_cols + c];
            acc += v * v;
        }
        *s = acc.sqrt();
    }
    Ok(norms)
}

/// One magnitude-pruning event: keeps the `ceil(remaining_target * total)`
/// highest-scoring alive blocks and prunes the rest, lowest score first, ties
/// by lower block index. Returns the newly pruned block indices in ascending
/// order.
pub fn update_mask(w: &Tensor, mask: &mut BlockMask, remaining_target: f64) -> Result<Vec<usize>> {
    if mask.is_frozen() {
        return Err(Error::FrozenMask {
            layer: mask.layer().to_string(),
        });
    }
    let (grid_rows, grid_cols) = check_grid(w, "update_mask")?;
    if (grid_rows, grid_cols) != mask.grid() {
        return Err(Error::dim(
            "update_mask",
            format!("weight grid {}x{} vs mask {:?}", grid_rows, grid_cols, mask.grid()),
        ));
    }
    if !(0.0..=1.0).contains(&remaining_target) {
        return Err(Error::Schedule(format!("remaining target {remaining_target} outside [0,1]")));
    }
    let total = mask.total_blocks();
    let alive = mask.alive_blocks();
    let keep = (remaining_target * total as f64).ceil() as usize;
    if keep > alive {
        return Err(Error::Schedule(format!(
            "remaining target {remaining_target} keeps {keep} blocks but only {alive} alive"
        )));
    }
    let scores = block_scores(w)?;
    let mut candidates: Vec<usize> = (0..total).filter(|&i| mask.bit(i)).collect();
    candidates.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut newly: Vec<usize> = candidates[..alive - keep].to_vec();
    newly.sort_unstable();
    mask.prune(&newly);
    Ok(newly)
}

/// Masked weight view as a graph node: gradients at pruned entries are exactly
/// zero because the mask coefficients multiply the upstream gradient.
pub fn apply_mask(tape: &mut Tape, w: Var, mask: &BlockMask) -> Result<Var> {
    let shape = tape.value(w).shape();
    let (dout, din) = mask.weight_shape();
    if shape != [dout, din] {
        return Err(Error::dim(
            "apply_mask",
            format!("weight {:?} vs mask {}x{}", shape, dout, din),
        ));
    }
    tape.mul_const(w, &mask.expand())
}

/// Per-layer penalty scale: global lambda times the mean block L2 norm,
/// recomputed from the current weights on every call.
pub fn group_lasso_lambda(w: &Tensor, lambda: f64) -> Result<f64> {
    let norms = block_norms(w)?;
    Ok(lambda * norms.iter().sum::<f64>() / norms.len() as f64)
}

/// Proximal group-lasso step, decoupled from the loss gradient: each block
/// shrinks by factor max(0, 1 - lr * lambda_i / ||W_g||); blocks at the origin
/// (norm <= 1e-12) stay exactly unchanged. `skip_pruned` exempts dead blocks,
/// used on steps where every worker ran the masked path.
pub fn group_lasso_decay(
    w: &mut Tensor,
    lambda_i: f64,
    lr: f64,
    skip_pruned: Option<&BlockMask>,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Config(format!("lasso decay needs lr > 0, got {lr}")));
    }
    let (grid_rows, grid_cols) = check_grid(w, "group_lasso_decay")?;
    if let Some(m) = skip_pruned {
        if m.grid() != (grid_rows, grid_cols) {
            return Err(Error::dim(
                "group_lasso_decay",
                format!("mask {:?} vs grid {}x{}", m.grid(), grid_rows, grid_cols),
            ));
        }
    }
    let norms = block_norms(w)?;
    let d = w.data_mut();
    for (i, &norm) in norms.iter().enumerate() {
        if norm <= NORM_EPS {
            continue;
        }
        if let Some(m) = skip_pruned {
            if !m.bit(i) {
                continue;
            }
        }
        let factor = (1.0 - lr * lambda_i / norm).max(0.0);
        let (g, c) = (i / grid_cols, i % grid_cols);
        for r in 0..BLOCK_ROWS {
            d[(g * BLOCK_ROWS + r) * grid_cols + c] *= factor;
        }
    }
    Ok(())
}

/// Reporting-only total penalty: sum over layers of lambda_i times the sum of
/// block norms. Never enters the autodiff graph.
pub fn penalty_value(layers: &[&Tensor], lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for w in layers {
        let norms = block_norms(w)?;
        let lambda_i = lambda * norms.iter().sum::<f64>() / norms.len() as f64;
        total += lambda_i * norms.iter().sum::<f64>();
    }
    Ok(total)
}

/// Iterative magnitude-pruning plan: events at t0 + k * interval for
/// k in 1..=n, each keeping fraction (1-p)^k, frozen after the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub t0: usize,
    pub interval: usize,
    pub p: f64,
    pub n: u32,
}

impl PruneSchedule {
    pub fn new(t0: usize, interval: usize, p: f64, n: u32) -> Result<Self> {
        let s = PruneSchedule { t0, interval, p, n };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval < 1 {
            return Err(Error::Schedule("interval must be >= 1".into()));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Schedule(format!("p {} outside (0,1)", self.p)));
        }
        Ok(())
    }

    pub fn target_sparsity(&self) -> f64 {
        sparsity_after(self.p, self.n)
    }

    /// Fraction of blocks still alive after k events.
    pub fn remaining_after(&self, k: u32) -> f64 {
        (1.0 - self.p).powi(k.min(self.n) as i32)
    }

    pub fn prune_steps(&self) -> Vec<usize> {
        (1..=self.n as usize).map(|k| self.t0 + k * self.interval).collect()
    }

    pub fn freeze_step(&self) -> usize {
        self.t0 + self.n as usize * self.interval
    }

    /// Event index k if `step` is the k-th pruning step, else None.
    pub fn event_at(&self, step: usize) -> Option<u32> {
        if self.n == 0 || step <= self.t0 {
            return None;
        }
        let d = step - self.t0;
        if d % self.interval == 0 && d / self.interval <= self.n as usize {
            Some((d / self.interval) as u32)
        } else {
            None
        }
    }
}

/// Lasso window: decay runs on steps in (0, active_until), then turns off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLassoConfig {
    pub lambda: f64,
    pub active_until: usize,
}

impl GroupLassoConfig {
    pub fn new(lambda: f64, active_until: usize) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::Config(format!("lasso lambda {lambda} negative")));
        }
        Ok(GroupLassoConfig { lambda, active_until })
    }

    pub fn active_at(&self, step: usize) -> bool {
        self.lambda > 0.0 && step < self.active_until
    }
}
