//! Wengert-list reverse-mode autodiff over f64 tensors.
//!
//! A [`Tape`] owns an arena of nodes; [`Var`] is an index into it. The tape is
//! rebuilt for every forward pass, so graph topology may change freely between
//! steps. Every op validates shapes at construction and checks its output for
//! non-finite values; [`Tape::backward`] walks the arena in reverse creation
//! order, which is a valid topological order because inputs always precede
//! their consumers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean attention mask over queries x keys; `true` means the key is
/// visible to the query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllowMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl AllowMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::dim(
                "allow_mask",
                format!("{}x{} needs {} bits, got {}", rows, cols, rows * cols, bits.len()),
            ));
        }
        Ok(AllowMask { rows, cols, bits })
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        AllowMask {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.cols + k]
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.bits[q * self.cols + k] = v;
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: Option<usize> },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulConst { x: usize, c: Vec<f64> },
    AddConst { x: usize },
    Scale { x: usize, c: f64 },
    Relu { x: usize },
    Tanh { x: usize },
    Softmax { x: usize },
    LogSoftmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize> },
    SliceLast { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatLast { parts: Vec<usize> },
    OuterSum { a: usize, b: usize },
    RelPosBias { table: usize, head: usize, clip: usize },
    Attention { q: usize, k: usize, v: usize, bias: Option<usize>, weights: Vec<f64> },
    Sum { x: usize },
    Select { x: usize, flat: usize },
    LogAdd { a: usize, b: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Vec<f64>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node {
            op,
            value,
            grad,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable input; gradients flow into it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.clone(), true)
    }

    /// Fixed input; backward never propagates into it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.clone(), false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, Tensor::scalar(v), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── op constructors ──────────────────────────────────────────────

    /// `x @ w^T + b` applied to the last dimension: x `[..., din]`,
    /// w `[dout, din]`, b `[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if wv.shape().len() != 2 {
            return Err(Error::dim("linear", format!("weight rank {:?}", wv.shape())));
        }
        let (dout, din) = (wv.shape()[0], wv.shape()[1]);
        if xv.last_dim() != din {
            return Err(Error::dim(
                "linear",
                format!("input last dim {} vs weight {}x{}", xv.last_dim(), dout, din),
            ));
        }
        if let Some(bv) = b {
            let bs = self.nodes[bv.0].value.shape();
            if bs != [dout] {
                return Err(Error::dim("linear", format!("bias shape {:?} vs dout {}", bs, dout)));
            }
        }
        let rows = xv.leading();
        let mut out = vec![0.0; rows * dout];
        let xd = xv.data();
        let wd = wv.data();
        for r in 0..rows {
            let xr = &xd[r * din..(r + 1) * din];
            let or = &mut out[r * dout..(r + 1) * dout];
            for o in 0..dout {
                let wr = &wd[o * din..(o + 1) * din];
                let mut acc = 0.0;
                for i in 0..din {
                    acc += wr[i] * xr[i];
                }
                or[o] = acc;
            }
        }
        if let Some(bv) = b {
            let bd = self.nodes[bv.0].value.data();
            for r in 0..rows {
                for o in 0..dout {
                    out[r * dout + o] += bd[o];
                }
            }
        }
        check_finite("linear", &out)?;
        let mut shape = xv.shape()[..xv.shape().len() - 1].to_vec();
        shape.push(dout);
        let mut ins = vec![x.0, w.0];
        if let Some(bv) = b {
            ins.push(bv.0);
        }
        let req = self.requires(&ins);
        Ok(self.push(
            Op::Linear { x: x.0, w: w.0, b: b.map(|v| v.0) },
            Tensor::new(shape, out)?,
            req,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        check_finite("add", &out)?;
        let val = Tensor::new(av.shape().to_vec(), out)?;
        let req = self.requires(&[a.0, b.0]);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, val, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        check_finite("mul", &out)?;
        let val = Tensor::new(av.shape().to_vec(), out)?;
        let req = self.requires(&[a.0, b.0]);
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, val, req))
    }

    /// Elementwise product with a fixed coefficient buffer, e.g. a 0/1 mask.
    pub fn mul_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.numel() != c.len() {
            return Err(Error::dim("mul_const", format!("{} vs {}", xv.numel(), c.len())));
        }
        let out: Vec<f64> = xv.data().iter().zip(c).map(|(x, y)| x * y).collect();
        check_finite("mul_const", &out)?;
        let val = Tensor::new(xv.shape().to_vec(), out)?;
        let req = self.requires(&[x.0]);
        Ok(self.push(Op::MulConst { x: x.0, c: c.to_vec() }, val, req))
    }

    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.numel() != c.len() {
            return Err(Error::dim("add_const", format!("{} vs {}", xv.numel(), c.len())));
        }
        let out: Vec<f64> = xv.data().iter().zip(c).map(|(x, y)| x + y).collect();
        check_finite("add_const", &out)?;
        let val = Tensor::new(xv.shape().to_vec(), out)?;
        let req = self.requires(&[x.0]);
        Ok(self.push(Op::AddConst { x: x.0 }, val, req))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = xv.data().iter().map(|v| v * c).collect();
        check_finite("scale", &out)?;
        let val = Tensor::new(xv.shape().to_vec(), out)?;
        let req = self.requires(&[x.0]);
        Ok(self.push(Op::Scale { x: x.0, c }, val, req))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = xv.data().iter().map(|v| v.max(0.0)).collect();
        check_finite("relu", &out)?;
        let val = Tensor::new(xv.shape().to_vec(), out)?;
        let req = self.requires(&[x.0]);
        Ok(self.push(Op::Relu { x: x.0 }, val, req))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = xv.data().iter().map(|v| v.tanh()).collect();
        check_finite("tanh", &out)?;
        let val = Tensor::new(xv.shape().to_vec(), out)?;
        let req = self.requires(&[x.0]);
        Ok(self.push(Op::Tanh { x: x.0 }, val, req))
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let n = xv.last_dim();
        if n == 0 {
            return Err(Error::EmptyInput("softmax over empty last dimension".into()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        check_finite("softmax", &out)?;
        let val = Tensor::new(xv.shape().to_vec(), out)?;
        let req = self.requires(&[x.0]);
        Ok(self.push(Op::Softmax { x: x.0 }, val, req))
    }

    /// Log-softmax over the last dimension with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let n = xv.last_dim();
        if n == 0 {
            return Err(Error::EmptyInput("log_softmax over empty last dimension".into()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lz = m + z.ln();
            for v in row.iter_mut() {
                *v -= lz;
            }
        }
        check_finite("log_softmax", &out)?;
        let val = Tensor::new(xv.shape().to_vec(), out)?;
        let req = self.requires(&[x.0]);
        Ok(self.push(Op::LogSoftmax { x: x.0 }, val, req))
    }

    /// Normalizes each row over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let n = xv.last_dim();
        if n == 0 {
            return Err(Error::EmptyInput("layer_norm over empty last dimension".into()));
        }
        let gs = self.nodes[gamma.0].value.shape();
        let bs = self.nodes[beta.0].value.shape();
        if gs != [n] || bs != [n] {
            return Err(Error::dim(
                "layer_norm",
                format!("gamma {:?} beta {:?} vs width {}", gs, bs, n),
            ));
        }
        let rows = xv.leading();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let xd = xv.data();
        let mut out = vec![0.0; xv.numel()];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        for r in 0..rows {
            let xr = &xd[r * n..(r + 1) * n];
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            let or = &mut out[r * n..(r + 1) * n];
            for j in 0..n {
                or[j] = gd[j] * (xr[j] - mean) * rstd + bd[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let val = Tensor::new(xv.shape().to_vec(), out)?;
        let req = self.requires(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, mean: means, rstd: rstds },
            val,
            req,
        ))
    }

    /// Row gather: out[i, :] = table[ids[i], :].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.shape().len() != 2 {
            return Err(Error::dim("embedding", format!("table rank {:?}", tv.shape())));
        }
        let (v, e) = (tv.shape()[0], tv.shape()[1]);
        for &id in ids {
            if id >= v {
                return Err(Error::Label { label: id, vocab: v });
            }
        }
        let td = tv.data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            out.extend_from_slice(&td[id * e..(id + 1) * e]);
        }
        check_finite("embedding", &out)?;
        let val = Tensor::new(vec![ids.len(), e], out)?;
        let req = self.requires(&[table.0]);
        Ok(self.push(Op::Embedding { table: table.0, ids: ids.to_vec() }, val, req))
    }

    /// Slices `[start, start+len)` out of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let n = xv.last_dim();
        if start + len > n || len == 0 {
            return Err(Error::dim(
                "slice_last",
                format!("range {}..{} of last dim {}", start, start + len, n),
            ));
        }
        let rows = xv.leading();
        let xd = xv.data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * n + start..r * n + start + len]);
        }
        let mut shape = xv.shape()[..xv.shape().len() - 1].to_vec();
        shape.push(len);
        let val = Tensor::new(shape, out)?;
        let req = self.requires(&[x.0]);
        Ok(self.push(Op::SliceLast { x: x.0, start }, val, req))
    }

    /// Slices rows `[start, start+len)` of a matrix-shaped value.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let rows = xv.leading();
        let cols = xv.last_dim();
        if start + len > rows || len == 0 {
            return Err(Error::dim(
                "slice_rows",
                format!("range {}..{} of {} rows", start, start + len, rows),
            ));
        }
        let out = xv.data()[start * cols..(start + len) * cols].to_vec();
        let val = Tensor::new(vec![len, cols], out)?;
        let req = self.requires(&[x.0]);
        Ok(self.push(Op::SliceRows { x: x.0, start }, val, req))
    }

    /// Stacks matrix-shaped parts along the row dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows of no parts".into()));
        }
        let cols = self.nodes[parts[0].0].value.last_dim();
        let mut total = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.last_dim() != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column widths differ: {} vs {}", pv.last_dim(), cols),
                ));
            }
            total += pv.leading();
        }
        let mut out = Vec::with_capacity(total * cols);
        for p in parts {
            out.extend_from_slice(self.nodes[p.0].value.data());
        }
        let val = Tensor::new(vec![total, cols], out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let req = self.requires(&idx);
        Ok(self.push(Op::ConcatRows { parts: idx }, val, req))
    }

    /// Concatenates along the last dimension; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_last of no parts".into()));
        }
        let lead = self.nodes[parts[0].0].value.shape()[..self.nodes[parts[0].0].value.shape().len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let pv = &self.nodes[p.0].value;
            let plead = &pv.shape()[..pv.shape().len() - 1];
            if plead != lead.as_slice() {
                return Err(Error::dim(
                    "concat_last",
                    format!("leading shapes differ: {:?} vs {:?}", plead, lead),
                ));
            }
            widths.push(pv.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = self.nodes[p.0].value.data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let val = Tensor::new(shape, out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let req = self.requires(&idx);
        Ok(self.push(Op::ConcatLast { parts: idx }, val, req))
    }

    /// Broadcast sum of `[t, d]` and `[u, d]` into `[t, u, d]`.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.last_dim() != bv.last_dim() {
            return Err(Error::dim(
                "outer_sum",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let (t, u, d) = (av.shape()[0], bv.shape()[0], av.last_dim());
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; t * u * d];
        for i in 0..t {
            for j in 0..u {
                let o = &mut out[(i * u + j) * d..(i * u + j + 1) * d];
                for x in 0..d {
                    o[x] = ad[i * d + x] + bd[j * d + x];
                }
            }
        }
        check_finite("outer_sum", &out)?;
        let val = Tensor::new(vec![t, u, d], out)?;
        let req = self.requires(&[a.0, b.0]);
        Ok(self.push(Op::OuterSum { a: a.0, b: b.0 }, val, req))
    }

    /// Relative-position bias: out[i, j] = table[head, clip + clamp(j - i)].
    pub fn rel_pos_bias(&mut self, table: Var, head: usize, len: usize, clip: usize) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.shape().len() != 2 || tv.shape()[1] != 2 * clip + 1 {
            return Err(Error::dim(
                "rel_pos_bias",
                format!("table {:?} vs clip {}", tv.shape(), clip),
            ));
        }
        if head >= tv.shape()[0] {
            return Err(Error::dim("rel_pos_bias", format!("head {} of {}", head, tv.shape()[0])));
        }
        let width = 2 * clip + 1;
        let td = &tv.data()[head * width..(head + 1) * width];
        let mut out = vec![0.0; len * len];
        let c = clip as i64;
        for i in 0..len {
            for j in 0..len {
                let rel = (j as i64 - i as i64).clamp(-c, c);
                out[i * len + j] = td[(rel + c) as usize];
            }
        }
        check_finite("rel_pos_bias", &out)?;
        let val = Tensor::new(vec![len, len], out)?;
        let req = self.requires(&[table.0]);
        Ok(self.push(Op::RelPosBias { table: table.0, head, clip }, val, req))
    }

    /// Scaled dot-product attention for one head. `allow` restricts which keys
    /// each query may attend to; `None` behaves exactly like an all-true mask,
    /// down to the order of floating point operations.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        allow: Option<&AllowMask>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        if qv.shape().len() != 2 || kv.shape().len() != 2 || vv.shape().len() != 2 {
            return Err(Error::dim("attention", "q, k, v must be matrices"));
        }
        let (tq, d) = (qv.shape()[0], qv.shape()[1]);
        let (tk, dv) = (kv.shape()[0], vv.shape()[1]);
        if kv.shape()[1] != d || vv.shape()[0] != tk {
            return Err(Error::dim(
                "attention",
                format!("q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        if let Some(m) = allow {
            if m.rows() != tq || m.cols() != tk {
                return Err(Error::dim(
                    "attention",
                    format!("mask {}x{} vs scores {}x{}", m.rows(), m.cols(), tq, tk),
                ));
            }
        }
        if let Some(b) = bias {
            let bs = self.nodes[b.0].value.shape();
            if bs != [tq, tk] {
                return Err(Error::dim("attention", format!("bias {:?} vs {}x{}", bs, tq, tk)));
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let qd = qv.data();
        let kd = kv.data();
        let vd = vv.data();
        let bd = bias.map(|b| self.nodes[b.0].value.data().to_vec());
        let mut weights = vec![0.0; tq * tk];
        let mut out = vec![0.0; tq * dv];
        let mut scores = vec![0.0; tk];
        for t in 0..tq {
            let allowed = |j: usize| allow.map_or(true, |m| m.at(t, j));
            let mut max = f64::NEG_INFINITY;
            for j in 0..tk {
                if allowed(j) {
                    let mut s = 0.0;
                    for x in 0..d {
                        s += qd[t * d + x] * kd[j * d + x];
                    }
                    s *= scale;
                    if let Some(b) = &bd {
                        s += b[t * tk + j];
                    }
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow { row: t });
            }
            let mut z = 0.0;
            for j in 0..tk {
                if allowed(j) {
                    let e = (scores[j] - max).exp();
                    weights[t * tk + j] = e;
                    z += e;
                }
            }
            for j in 0..tk {
                if allowed(j) {
                    weights[t * tk + j] /= z;
                    let w = weights[t * tk + j];
                    for x in 0..dv {
                        out[t * dv + x] += w * vd[j * dv + x];
                    }
                }
            }
        }
        check_finite("attention", &out)?;
        let val = Tensor::new(vec![tq, dv], out)?;
        let mut ins = vec![q.0, k.0, v.0];
        if let Some(b) = bias {
            ins.push(b.0);
        }
        let req = self.requires(&ins);
        Ok(self.push(
            Op::Attention { q: q.0, k: k.0, v: v.0, bias: bias.map(|b| b.0), weights },
            val,
            req,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let s: f64 = xv.data().iter().sum();
        check_finite("sum", &[s])?;
        let req = self.requires(&[x.0]);
        Ok(self.push(Op::Sum { x: x.0 }, Tensor::scalar(s), req))
    }

    /// Extracts one element as a scalar.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if idx.len() != xv.shape().len() {
            return Err(Error::dim(
                "select",
                format!("index rank {} vs shape {:?}", idx.len(), xv.shape()),
            ));
        }
        for (d, &i) in idx.iter().enumerate() {
            if i >= xv.shape()[d] {
                return Err(Error::dim(
                    "select",
                    format!("index {:?} out of shape {:?}", idx, xv.shape()),
                ));
            }
        }
        let flat = crate::tensor::flat_index(xv.shape(), idx);
        let v = xv.data()[flat];
        let req = self.requires(&[x.0]);
        Ok(self.push(Op::Select { x: x.0, flat }, Tensor::scalar(v), req))
    }

    /// log(exp(a) + exp(b)) for scalars, stable against large magnitudes and
    /// defined for -inf inputs (identity element).
    pub fn logadd(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if !av.is_scalar() || !bv.is_scalar() {
            return Err(Error::dim("logadd", "scalar operands required"));
        }
        let (x, y) = (av.data()[0], bv.data()[0]);
        let out = if x == f64::NEG_INFINITY {
            y
        } else if y == f64::NEG_INFINITY {
            x
        } else {
            let m = x.max(y);
            m + ((x - m).exp() + (y - m).exp()).ln()
        };
        check_finite("logadd", &[out])?;
        let req = self.requires(&[a.0, b.0]);
        Ok(self.push(Op::LogAdd { a: a.0, b: b.0 }, Tensor::scalar(out), req))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from `loss` (a scalar). Gradients accumulate into every
    /// node with `requires_grad`; leaves keep theirs for reading via `grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::dim(
                "backward",
                format!("loss shape {:?} is not scalar", self.nodes[loss.0].value.shape()),
            ));
        }
        self.nodes[loss.0].grad[0] += 1.0;
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (prev, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = &node.grad;
            // Each arm pushes (input index, contribution) pairs; duplicates
            // accumulate, which makes e.g. mul(x, x) correct.
            let mut contribs: Vec<(usize, Vec<f64>)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let xv = &prev[*x].value;
                    let wv = &prev[*w].value;
                    let (dout, din) = (wv.shape()[0], wv.shape()[1]);
                    let rows = xv.leading();
                    let xd = xv.data();
                    let wd = wv.data();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dw = vec![0.0; wd.len()];
                    for r in 0..rows {
                        let gr = &g[r * dout..(r + 1) * dout];
                        let xr = &xd[r * din..(r + 1) * din];
                        let dxr = &mut dx[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let go = gr[o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wd[o * din..(o + 1) * din];
                            let dwr = &mut dw[o * din..(o + 1) * din];
                            for in_ in 0..din {
                                dxr[in_] += go * wr[in_];
                                dwr[in_] += go * xr[in_];
                            }
                        }
                    }
                    contribs.push((*x, dx));
                    contribs.push((*w, dw));
                    if let Some(b) = b {
                        let mut db = vec![0.0; dout];
                        for r in 0..rows {
                            for o in 0..dout {
                                db[o] += g[r * dout + o];
                            }
                        }
                        contribs.push((*b, db));
                    }
                }
                Op::Add { a, b } => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g.clone()));
                }
                Op::Mul { a, b } => {
                    let ad = prev[*a].value.data();
                    let bd = prev[*b].value.data();
                    contribs.push((*a, g.iter().zip(bd).map(|(gi, bi)| gi * bi).collect()));
                    contribs.push((*b, g.iter().zip(ad).map(|(gi, ai)| gi * ai).collect()));
                }
                Op::MulConst { x, c } => {
                    contribs.push((*x, g.iter().zip(c).map(|(gi, ci)| gi * ci).collect()));
                }
                Op::AddConst { x } => contribs.push((*x, g.clone())),
                Op::Scale { x, c } => {
                    contribs.push((*x, g.iter().map(|gi| gi * c).collect()));
                }
                Op::Relu { x } => {
                    let xd = prev[*x].value.data();
                    contribs.push((
                        *x,
                        g.iter()
                            .zip(xd)
                            .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                            .collect(),
                    ));
                }
                Op::Tanh { x } => {
                    let yd = node.value.data();
                    contribs.push((*x, g.iter().zip(yd).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect()));
                }
                Op::Softmax { x } => {
                    let yd = node.value.data();
                    let n = node.value.last_dim();
                    let mut dx = vec![0.0; yd.len()];
                    for r in 0..yd.len() / n {
                        let yr = &yd[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                        for j in 0..n {
                            dx[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    contribs.push((*x, dx));
                }
                Op::LogSoftmax { x } => {
                    let yd = node.value.data();
                    let n = node.value.last_dim();
                    let mut dx = vec![0.0; yd.len()];
                    for r in 0..yd.len() / n {
                        let yr = &yd[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            dx[r * n + j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                    contribs.push((*x, dx));
                }
                Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                    let xv = &prev[*x].value;
                    let n = xv.last_dim();
                    let rows = xv.leading();
                    let xd = xv.data();
                    let gd = prev[*gamma].value.data();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for r in 0..rows {
                        let xr = &xd[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut mg = 0.0;
                        let mut mgx = 0.0;
                        for j in 0..n {
                            let xhat = (xr[j] - mu) * rs;
                            let gh = gr[j] * gd[j];
                            mg += gh;
                            mgx += gh * xhat;
                            dgamma[j] += gr[j] * xhat;
                            dbeta[j] += gr[j];
                        }
                        mg /= n as f64;
                        mgx /= n as f64;
                        for j in 0..n {
                            let xhat = (xr[j] - mu) * rs;
                            dx[r * n + j] = rs * (gr[j] * gd[j] - mg - xhat * mgx);
                        }
                    }
                    contribs.push((*x, dx));
                    contribs.push((*gamma, dgamma));
                    contribs.push((*beta, dbeta));
                }
                Op::Embedding { table, ids } => {
                    let tv = &prev[*table].value;
                    let e = tv.shape()[1];
                    let mut dt = vec![0.0; tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..e {
                            dt[id * e + j] += g[r * e + j];
                        }
                    }
                    contribs.push((*table, dt));
                }
                Op::SliceLast { x, start } => {
                    let xv = &prev[*x].value;
                    let n = xv.last_dim();
                    let len = node.value.last_dim();
                    let rows = xv.leading();
                    let mut dx = vec![0.0; xv.numel()];
                    for r in 0..rows {
                        for j in 0..len {
                            dx[r * n + start + j] = g[r * len + j];
                        }
                    }
                    contribs.push((*x, dx));
                }
                Op::SliceRows { x, start } => {
                    let xv = &prev[*x].value;
                    let cols = xv.last_dim();
                    let len = node.value.leading();
                    let mut dx = vec![0.0; xv.numel()];
                    dx[start * cols..(start + len) * cols].copy_from_slice(g);
                    contribs.push((*x, dx));
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = prev[p].value.numel();
                        contribs.push((p, g[off..off + len].to_vec()));
                        off += len;
                    }
                }
                Op::ConcatLast { parts } => {
                    let total = node.value.last_dim();
                    let rows = node.value.leading();
                    let mut off = 0;
                    for &p in parts {
                        let w = prev[p].value.last_dim();
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        contribs.push((p, dp));
                        off += w;
                    }
                }
                Op::OuterSum { a, b } => {
                    let (t, d) = (prev[*a].value.shape()[0], prev[*a].value.last_dim());
                    let u = prev[*b].value.shape()[0];
                    let mut da = vec![0.0; t * d];
                    let mut db = vec![0.0; u * d];
                    for i in 0..t {
                        for j in 0..u {
                            let gr = &g[(i * u + j) * d..(i * u + j + 1) * d];
                            for x in 0..d {
                                da[i * d + x] += gr[x];
                                db[j * d + x] += gr[x];
                            }
                        }
                    }
                    contribs.push((*a, da));
                    contribs.push((*b, db));
                }
                Op::RelPosBias { table, head, clip } => {
                    let tv = &prev[*table].value;
                    let width = 2 * clip + 1;
                    let len = node.value.shape()[0];
                    let mut dt = vec![0.0; tv.numel()];
                    let c = *clip as i64;
                    for i in 0..len {
                        for j in 0..len {
                            let rel = (j as i64 - i as i64).clamp(-c, c);
                            dt[head * width + (rel + c) as usize] += g[i * len + j];
                        }
                    }
                    contribs.push((*table, dt));
                }
                Op::Attention { q, k, v, bias, weights } => {
                    let qv = &prev[*q].value;
                    let kv = &prev[*k].value;
                    let vv = &prev[*v].value;
                    let (tq, d) = (qv.shape()[0], qv.shape()[1]);
                    let (tk, dvw) = (kv.shape()[0], vv.shape()[1]);
                    let scale = 1.0 / (d as f64).sqrt();
                    let qd = qv.data();
                    let kd = kv.data();
                    let vd = vv.data();
                    let mut dq = vec![0.0; qd.len()];
                    let mut dk = vec![0.0; kd.len()];
                    let mut dvb = vec![0.0; vd.len()];
                    let mut ds = vec![0.0; tq * tk];
                    for t in 0..tq {
                        let gr = &g[t * dvw..(t + 1) * dvw];
                        let wr = &weights[t * tk..(t + 1) * tk];
                        // d(weights) and softmax backward in one pass
                        let mut da = vec![0.0; tk];
                        for j in 0..tk {
                            if wr[j] != 0.0 {
                                let vr = &vd[j * dvw..(j + 1) * dvw];
                                let mut acc = 0.0;
                                for x in 0..dvw {
                                    acc += gr[x] * vr[x];
                                    dvb[j * dvw + x] += wr[j] * gr[x];
                                }
                                da[j] = acc;
                            }
                        }
                        let dot: f64 = wr.iter().zip(&da).map(|(w, a)| w * a).sum();
                        for j in 0..tk {
                            let s = wr[j] * (da[j] - dot);
                            ds[t * tk + j] = s;
                            if s != 0.0 {
                                for x in 0..d {
                                    dq[t * d + x] += scale * s * kd[j * d + x];
                                    dk[j * d + x] += scale * s * qd[t * d + x];
                                }
                            }
                        }
                    }
                    contribs.push((*q, dq));
                    contribs.push((*k, dk));
                    contribs.push((*v, dvb));
                    if let Some(b) = bias {
                        contribs.push((*b, ds));
                    }
                }
                Op::Sum { x } => {
                    contribs.push((*x, vec![g[0]; prev[*x].value.numel()]));
                }
                Op::Select { x, flat } => {
                    let mut dx = vec![0.0; prev[*x].value.numel()];
                    dx[*flat] = g[0];
                    contribs.push((*x, dx));
                }
                Op::LogAdd { a, b } => {
                    let av = prev[*a].value.data()[0];
                    let bv = prev[*b].value.data()[0];
                    let out = node.value.data()[0];
                    let da = if av == f64::NEG_INFINITY { 0.0 } else { (av - out).exp() };
                    let db = if bv == f64::NEG_INFINITY { 0.0 } else { (bv - out).exp() };
                    contribs.push((*a, vec![g[0] * da]));
                    contribs.push((*b, vec![g[0] * db]));
                }
            }
            for (idx, buf) in contribs {
                if !prev[idx].requires_grad {
                    continue;
                }
                let dst = &mut prev[idx].grad;
                for (d, s) in dst.iter_mut().zip(&buf) {
                    *d += s;
                }
            }
        }
        for node in &self.nodes {
            if node.requires_grad {
                check_finite("backward", &node.grad)?;
            }
        }
        Ok(())
    }
}

/// Compares analytic gradients against central differences (h = 1e-6) for a
/// scalar function of the given parameters. Returns the worst relative error
/// max(|a - n|) / max(1e-8, |a| + |n|) over all coordinates.
pub fn grad_check<F>(params: &[Tensor], mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    const H: f64 = 1e-6;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::dim("grad_check", "function output must be scalar"));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad(*v).to_vec()).collect();

    let mut eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p)).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).data()[0])
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + H;
            let fp = eval(&work)?;
            work[pi].data_mut()[j] = orig - H;
            let fm = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * H);
            let a = analytic[pi][j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
