//! Compressed storage and matvec kernels for 8x1 block-sparse matrices.
//!
//! Storage groups rows into bands of 8; each stored block contributes 8
//! contiguous output elements, so parallelism partitions output row-groups
//! with no shared writes. Accumulation order per output element is ascending
//! block column, which makes sequential and parallel results bitwise equal.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::sparsity::{BlockMask, BLOCK_ROWS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseMatrix {
    rows: usize,
    cols: usize,
    /// Stored-block range per row-group: blocks of group g live at
    /// `block_ptr[g]..block_ptr[g+1]`.
    block_ptr: Vec<usize>,
    /// Column index of each stored block, ascending within a row-group.
    block_cols: Vec<usize>,
    /// 8 values per stored block, output-row order.
    values: Vec<f64>,
}

impl BlockSparseMatrix {
    /// Gathers the alive blocks of `m ⊙ w`.
    pub fn from_masked(w: &Tensor, mask: &BlockMask) -> Result<Self> {
        let (dout, din) = mask.weight_shape();
        if w.shape() != [dout, din] {
            return Err(Error::dim(
                "from_masked",
                format!("weight {:?} vs mask {}x{}", w.shape(), dout, din),
            ));
        }
        let (grid_rows, grid_cols) = mask.grid();
        let d = w.data();
        let mut block_ptr = Vec::with_capacity(grid_rows + 1);
        let mut block_cols = Vec::new();
        let mut values = Vec::new();
        block_ptr.push(0);
        for g in 0..grid_rows {
            for c in 0..grid_cols {
                if mask.bit(g * grid_cols + c) {
                    block_cols.push(c);
                    for r in 0..BLOCK_ROWS {
                        values.push(d[(g * BLOCK_ROWS + r) * din + c]);
                    }
                }
            }
            block_ptr.push(block_cols.len());
        }
        Ok(BlockSparseMatrix {
            rows: dout,
            cols: din,
            block_ptr,
            block_cols,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz_blocks(&self) -> usize {
        self.block_cols.len()
    }

    pub fn sparsity(&self) -> f64 {
        let total = (self.rows / BLOCK_ROWS) * self.cols;
        1.0 - self.nnz_blocks() as f64 / total as f64
    }

    /// Dense reconstruction with zeros at pruned blocks.
    pub fn to_dense(&self) -> Tensor {
        let mut out = vec![0.0; self.rows * self.cols];
        for g in 0..self.rows / BLOCK_ROWS {
            for b in self.block_ptr[g]..self.block_ptr[g + 1] {
                let c = self.block_cols[b];
                for r in 0..BLOCK_ROWS {
                    out[(g * BLOCK_ROWS + r) * self.cols + c] = self.values[b * BLOCK_ROWS + r];
                }
            }
        }
        Tensor::new(vec![self.rows, self.cols], out).expect("consistent dims")
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.cols {
            return Err(Error::dim(
                "spmv",
                format!("input length {} vs {} columns", x.len(), self.cols),
            ));
        }
        Ok(())
    }

    fn group_into(&self, g: usize, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        for b in self.block_ptr[g]..self.block_ptr[g + 1] {
            let xv = x[self.block_cols[b]];
            let vals = &self.values[b * BLOCK_ROWS..(b + 1) * BLOCK_ROWS];
            for r in 0..BLOCK_ROWS {
                y[r] += vals[r] * xv;
            }
        }
    }

    pub fn spmv_seq_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        self.check_x(x)?;
        if y.len() != self.rows {
            return Err(Error::dim("spmv", format!("output length {} vs {} rows", y.len(), self.rows)));
        }
        for (g, band) in y.chunks_mut(BLOCK_ROWS).enumerate() {
            self.group_into(g, x, band);
        }
        Ok(())
    }

    #[cfg(feature = "parallel")]
    pub fn spmv_par_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        use rayon::prelude::*;
        self.check_x(x)?;
        if y.len() != self.rows {
            return Err(Error::dim("spmv", format!("output length {} vs {} rows", y.len(), self.rows)));
        }
        y.par_chunks_mut(BLOCK_ROWS)
            .enumerate()
            .for_each(|(g, band)| self.group_into(g, x, band));
        Ok(())
    }

    pub fn spmv_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        #[cfg(feature = "parallel")]
        {
            self.spmv_par_into(x, y)
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.spmv_seq_into(x, y)
        }
    }

    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.rows];
        self.spmv_into(x, &mut y)?;
        Ok(y)
    }

    /// Sequential matvec that also counts floating-point multiplies; the count
    /// must equal 8 x stored blocks.
    pub fn spmv_instrumented(&self, x: &[f64]) -> Result<(Vec<f64>, u64)> {
        self.check_x(x)?;
        let mut y = vec![0.0; self.rows];
        let mut mults = 0u64;
        for (g, band) in y.chunks_mut(BLOCK_ROWS).enumerate() {
            for b in self.block_ptr[g]..self.block_ptr[g + 1] {
                let xv = x[self.block_cols[b]];
                let vals = &self.values[b * BLOCK_ROWS..(b + 1) * BLOCK_ROWS];
                for r in 0..BLOCK_ROWS {
                    band[r] += vals[r] * xv;
                    mults += 1;
                }
            }
        }
        Ok((y, mults))
    }
}

pub fn dense_matvec_into(w: &Tensor, x: &[f64], y: &mut [f64]) -> Result<()> {
    if w.shape().len() != 2 || w.shape()[1] != x.len() || w.shape()[0] != y.len() {
        return Err(Error::dim(
            "dense_matvec",
            format!("{:?} vs x {} y {}", w.shape(), x.len(), y.len()),
        ));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let d = w.data();
    for r in 0..rows {
        let row = &d[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        y[r] = acc;
    }
    Ok(())
}

pub fn dense_matvec(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let mut y = vec![0.0; w.shape()[0]];
    dense_matvec_into(w, x, &mut y)?;
    Ok(y)
}

/// Random mask with exactly `round(sparsity * total)` pruned blocks.
pub fn random_mask(rows: usize, cols: usize, sparsity: f64, rng: &mut impl Rng) -> Result<BlockMask> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity {sparsity} outside [0,1]")));
    }
    let mut mask = BlockMask::dense("bench", rows, cols)?;
    let total = mask.total_blocks();
    let prune = (sparsity * total as f64).round() as usize;
    let mut idx: Vec<usize> = (0..total).collect();
    for i in (1..total).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    mask.prune_blocks(&idx[..prune])?;
    Ok(mask)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchResult {
    pub dim: usize,
    pub sparsity: f64,
    pub dense_ns: f64,
    pub sparse_ns: f64,
    pub speedup: f64,
}

fn median_ns(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Times dense vs block-sparse matvec on one random matrix at the given
/// sparsity. Buffers are reused across reps; reported numbers are medians.
pub fn bench(dim: usize, sparsity: f64, reps: usize, seed: u64) -> Result<BenchResult> {
    if dim == 0 || dim % BLOCK_ROWS != 0 {
        return Err(Error::Config(format!("bench dim {dim} must be a positive multiple of 8")));
    }
    if reps < 1 {
        return Err(Error::Config("bench reps must be >= 1".into()));
    }
    let mut r = rng::stream(seed, &[rng::purpose::BENCH, dim as u64]);
    let data: Vec<f64> = (0..dim * dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let w = Tensor::new(vec![dim, dim], data)?;
    let mask = random_mask(dim, dim, sparsity, &mut r)?;
    let x: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();

    let masked = {
        let mut m = w.clone();
        let coeff = mask.expand();
        for (v, c) in m.data_mut().iter_mut().zip(&coeff) {
            *v *= c;
        }
        m
    };
    let sparse = BlockSparseMatrix::from_masked(&w, &mask)?;

    let mut y = vec![0.0; dim];
    // warmup
    for _ in 0..3 {
        dense_matvec_into(&masked, &x, &mut y)?;
        std::hint::black_box(&y);
        sparse.spmv_seq_into(&x, &mut y)?;
        std::hint::black_box(&y);
    }

    let mut dense_samples = Vec::with_capacity(reps);
    let mut sparse_samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        dense_matvec_into(&masked, &x, &mut y)?;
        std::hint::black_box(&y);
        dense_samples.push(t.elapsed().as_nanos() as f64);

        let t = Instant::now();
        sparse.spmv_seq_into(&x, &mut y)?;
        std::hint::black_box(&y);
        sparse_samples.push(t.elapsed().as_nanos() as f64);
    }
    let dense_ns = median_ns(&mut dense_samples);
    let sparse_ns = median_ns(&mut sparse_samples);
    Ok(BenchResult {
        dim,
        sparsity,
        dense_ns,
        sparse_ns,
        speedup: dense_ns / sparse_ns,
    })
}
