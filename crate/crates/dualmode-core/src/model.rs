//! The dual-mode transducer network: a chunked-attention encoder, a recurrent
//! label predictor, and an additive joiner, all built on the autodiff tape.
//!
//! One parameter store serves both operating modes. Block masks never touch
//! the stored weights; the streaming forward path multiplies each prunable
//! matrix by its mask on the tape, so the dense path always reads the full
//! weights. Checkpoints are a directory: manifest.json, one raw f64 file per
//! tensor, and one mask file per prunable matrix.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::chunking::SegmentLayout;
use crate::data;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::rnnt::JointScorer;
use crate::sparsity::{apply_mask, BlockMask};
use crate::tape::{AllowMask, Tape, Var};
use crate::tensor::Tensor;

/// Blank symbol index; real labels are 1..=vocab.
pub const BLANK: usize = 0;

pub const CHECKPOINT_FORMAT: &str = "dual-mode-rnnt-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub input_dim: usize,
    pub feature_stride: usize,
    pub pred_embed: usize,
    pub pred_hidden: usize,
    pub joint_dim: usize,
    pub vocab: usize,
    pub rel_pos_clip: usize,
}

impl ModelConfig {
    /// Small preset sized for minutes-long CPU runs.
    pub fn desk_default() -> Self {
        ModelConfig {
            num_layers: 2,
            embed_dim: 64,
            ffn_dim: 128,
            num_heads: 4,
            input_dim: 8,
            feature_stride: 6,
            pred_embed: 32,
            pred_hidden: 32,
            joint_dim: 64,
            vocab: 16,
            rel_pos_clip: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("input_dim", self.input_dim),
            ("feature_stride", self.feature_stride),
            ("pred_embed", self.pred_embed),
            ("pred_hidden", self.pred_hidden),
            ("joint_dim", self.joint_dim),
            ("vocab", self.vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("pred_hidden", self.pred_hidden),
        ] {
            if v % 8 != 0 {
                return Err(Error::Config(format!(
                    "model.{name} {} must be divisible by the mask block height 8",
                    v
                )));
            }
        }
        Ok(())
    }

    pub fn stacked_dim(&self) -> usize {
        self.input_dim * self.feature_stride
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn logits_dim(&self) -> usize {
        self.vocab + 1
    }
}

/// Named tensors in stable insertion order; the only copy of the weights.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), index: HashMap::new(), tensors: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::Config(format!("unknown parameter {name}"))),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tensors.iter().map(Tensor::numel).collect()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// One block mask per prunable matrix, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct MaskSet {
    masks: BTreeMap<String, BlockMask>,
}

impl MaskSet {
    /// All-alive masks for the given layers, with shapes from the store.
    pub fn dense_for(store: &ParamStore, layers: &[String]) -> Result<Self> {
        let mut masks = BTreeMap::new();
        for name in layers {
            let t = store.get(name)?;
            let shape = t.shape();
            if shape.len() != 2 {
                return Err(Error::dim("mask_set", format!("{name} has shape {shape:?}")));
            }
            masks.insert(name.clone(), BlockMask::dense(name.clone(), shape[0], shape[1])?);
        }
        Ok(MaskSet { masks })
    }

    pub fn empty() -> Self {
        MaskSet { masks: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn contains(&self, layer: &str) -> bool {
        self.masks.contains_key(layer)
    }

    pub fn get(&self, layer: &str) -> Option<&BlockMask> {
        self.masks.get(layer)
    }

    pub fn get_mut(&mut self, layer: &str) -> Option<&mut BlockMask> {
        self.masks.get_mut(layer)
    }

    pub fn insert(&mut self, mask: BlockMask) {
        self.masks.insert(mask.layer().to_string(), mask);
    }

    pub fn layers(&self) -> impl Iterator<Item = &str> {
        self.masks.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BlockMask)> {
        self.masks.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut BlockMask)> {
        self.masks.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn freeze_all(&mut self) {
        for m in self.masks.values_mut() {
            m.freeze();
        }
    }

    pub fn sparsity_by_layer(&self) -> BTreeMap<String, f64> {
        self.masks.iter().map(|(k, m)| (k.clone(), m.sparsity())).collect()
    }

    /// One `<layer>.mask` file per entry.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, mask) in &self.masks {
            mask.write_file(&dir.join(format!("{name}.mask")))?;
        }
        Ok(())
    }

    /// Reads every `.mask` file in `dir`; masks load unfrozen.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut masks = BTreeMap::new();
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "mask"))
            .collect();
        paths.sort();
        for path in paths {
            let mask = BlockMask::read_file(&path)?;
            masks.insert(mask.layer().to_string(), mask);
        }
        Ok(MaskSet { masks })
    }
}

/// Matrices eligible for pruning: attention and feed-forward weights in every
/// encoder layer, plus the predictor recurrence and projection.
pub fn prunable_layers(cfg: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..cfg.num_layers {
        for w in ["wq", "wk", "wv", "wo", "ffn.w1", "ffn.w2"] {
            out.push(format!("encoder.{l}.{w}"));
        }
    }
    out.push("pred.w_ih".into());
    out.push("pred.w_hh".into());
    out.push("pred.proj.w".into());
    out
}

fn name_id(name: &str) -> u64 {
    // FNV-1a, so initialization depends on the parameter name, not insertion order.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn init_matrix(seed: u64, name: &str, rows: usize, cols: usize) -> Tensor {
    use rand::Rng;
    let mut r = rng::stream(seed, &[purpose::INIT, name_id(name)]);
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| (r.random::<f64>() * 2.0 - 1.0) * a).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape)
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("shape matches data")
}

fn insert_encoder_params(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<()> {
    let d = cfg.embed_dim;
    store.insert("frontend.w", init_matrix(seed, "frontend.w", d, cfg.stacked_dim()))?;
    store.insert("frontend.b", zeros(vec![d]))?;
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("encoder.{l}.{s}");
        store.insert(p("ln1.gamma"), ones(d))?;
        store.insert(p("ln1.beta"), zeros(vec![d]))?;
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(p(w), init_matrix(seed, &p(w), d, d))?;
        }
        for b in ["bq", "bk", "bv", "bo"] {
            store.insert(p(b), zeros(vec![d]))?;
        }
        store.insert(p("relpos"), zeros(vec![cfg.num_heads, 2 * cfg.rel_pos_clip + 1]))?;
        store.insert(p("ln2.gamma"), ones(d))?;
        store.insert(p("ln2.beta"), zeros(vec![d]))?;
        store.insert(p("ffn.w1"), init_matrix(seed, &p("ffn.w1"), cfg.ffn_dim, d))?;
        store.insert(p("ffn.b1"), zeros(vec![cfg.ffn_dim]))?;
        store.insert(p("ffn.w2"), init_matrix(seed, &p("ffn.w2"), d, cfg.ffn_dim))?;
        store.insert(p("ffn.b2"), zeros(vec![d]))?;
    }
    store.insert("encoder.ln_f.gamma", ones(d))?;
    store.insert("encoder.ln_f.beta", zeros(vec![d]))?;
    Ok(())
}

fn build_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    insert_encoder_params(&mut store, cfg, seed)?;
    store.insert("pred.embed", init_matrix(seed, "pred.embed", cfg.logits_dim(), cfg.pred_embed))?;
    store.insert("pred.w_ih", init_matrix(seed, "pred.w_ih", cfg.pred_hidden, cfg.pred_embed))?;
    store.insert("pred.b_ih", zeros(vec![cfg.pred_hidden]))?;
    store.insert("pred.w_hh", init_matrix(seed, "pred.w_hh", cfg.pred_hidden, cfg.pred_hidden))?;
    store.insert("pred.proj.w", init_matrix(seed, "pred.proj.w", cfg.pred_hidden, cfg.pred_hidden))?;
    store.insert("pred.proj.b", zeros(vec![cfg.pred_hidden]))?;
    store.insert("joint.enc.w", init_matrix(seed, "joint.enc.w", cfg.joint_dim, cfg.embed_dim))?;
    store.insert("joint.pred.w", init_matrix(seed, "joint.pred.w", cfg.joint_dim, cfg.pred_hidden))?;
    store.insert("joint.b", zeros(vec![cfg.joint_dim]))?;
    store.insert("joint.out.w", init_matrix(seed, "joint.out.w", cfg.logits_dim(), cfg.joint_dim))?;
    Ok(store)
}

/// The full transducer: one weight store plus one mask per prunable matrix.
#[derive(Debug, Clone)]
pub struct RnntModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub masks: MaskSet,
}

impl RnntModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = build_params(&cfg, seed)?;
        let masks = MaskSet::dense_for(&params, &prunable_layers(&cfg))?;
        Ok(RnntModel { cfg, params, masks })
    }
}

/// Encoder-only model with a reconstruction head for masked-frame training.
#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub masks: MaskSet,
}

impl PretrainModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        insert_encoder_params(&mut params, &cfg, seed)?;
        params.insert("recon.w", init_matrix(seed, "recon.w", cfg.stacked_dim(), cfg.embed_dim))?;
        params.insert("recon.b", zeros(vec![cfg.stacked_dim()]))?;
        let encoder_layers: Vec<String> = prunable_layers(&cfg)
            .into_iter()
            .filter(|n| n.starts_with("encoder."))
            .collect();
        let masks = MaskSet::dense_for(&params, &encoder_layers)?;
        Ok(PretrainModel { cfg, params, masks })
    }
}

/// Tape variables for store parameters, keyed by name.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Binds every parameter (or those under the given prefixes) onto the
    /// tape; `trainable` decides leaf vs constant.
    pub fn bind(
        tape: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        prefixes: Option<&[&str]>,
    ) -> Bound {
        let mut vars = HashMap::new();
        for (name, t) in store.iter() {
            if prefixes.is_some_and(|ps| !ps.iter().any(|p| name.starts_with(p))) {
                continue;
            }
            let v = if trainable { tape.leaf(t) } else { tape.constant(t) };
            vars.insert(name.to_string(), v);
        }
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} not bound")))
    }
}

/// The named weight, multiplied by its mask when one is supplied.
fn weight(tape: &mut Tape, bound: &Bound, masks: Option<&MaskSet>, name: &str) -> Result<Var> {
    let w = bound.var(name)?;
    match masks.and_then(|m| m.get(name)) {
        Some(mask) => apply_mask(tape, w, mask),
        None => Ok(w),
    }
}

/// Encoder over pre-stacked feature windows `[T', stride * input_dim]`.
/// `allow` restricts attention; `None` means full context.
pub fn encode_windows(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    masks: Option<&MaskSet>,
    windows: &Tensor,
    allow: Option<&AllowMask>,
) -> Result<Var> {
    let shape = windows.shape();
    if shape.len() != 2 || shape[1] != cfg.stacked_dim() {
        return Err(Error::dim(
            "encode",
            format!("windows {:?} vs stacked dim {}", shape, cfg.stacked_dim()),
        ));
    }
    let frames = shape[0];
    let hd = cfg.head_dim();
    let xin = tape.constant(windows);
    let wf = bound.var("frontend.w")?;
    let bf = bound.var("frontend.b")?;
    let mut x = tape.linear(xin, wf, Some(bf))?;
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("encoder.{l}.{s}");
        let g1 = bound.var(&p("ln1.gamma"))?;
        let b1 = bound.var(&p("ln1.beta"))?;
        let h = tape.layer_norm(x, g1, b1)?;
        let wq = weight(tape, bound, masks, &p("wq"))?;
        let wk = weight(tape, bound, masks, &p("wk"))?;
        let wv = weight(tape, bound, masks, &p("wv"))?;
        let bq = bound.var(&p("bq"))?;
        let bk = bound.var(&p("bk"))?;
        let bv = bound.var(&p("bv"))?;
        let q = tape.linear(h, wq, Some(bq))?;
        let k = tape.linear(h, wk, Some(bk))?;
        let v = tape.linear(h, wv, Some(bv))?;
        let relpos = bound.var(&p("relpos"))?;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for i in 0..cfg.num_heads {
            let qh = tape.slice_last(q, i * hd, hd)?;
            let kh = tape.slice_last(k, i * hd, hd)?;
            let vh = tape.slice_last(v, i * hd, hd)?;
            let bias = tape.rel_pos_bias(relpos, i, frames, cfg.rel_pos_clip)?;
            heads.push(tape.attention(qh, kh, vh, Some(bias), allow)?);
        }
        let cat = tape.concat_last(&heads)?;
        let wo = weight(tape, bound, masks, &p("wo"))?;
        let bo = bound.var(&p("bo"))?;
        let o = tape.linear(cat, wo, Some(bo))?;
        x = tape.add(x, o)?;
        let g2 = bound.var(&p("ln2.gamma"))?;
        let b2 = bound.var(&p("ln2.beta"))?;
        let h2 = tape.layer_norm(x, g2, b2)?;
        let w1 = weight(tape, bound, masks, &p("ffn.w1"))?;
        let b1f = bound.var(&p("ffn.b1"))?;
        let w2 = weight(tape, bound, masks, &p("ffn.w2"))?;
        let b2f = bound.var(&p("ffn.b2"))?;
        let f1 = tape.linear(h2, w1, Some(b1f))?;
        let r = tape.relu(f1)?;
        let f2 = tape.linear(r, w2, Some(b2f))?;
        x = tape.add(x, f2)?;
    }
    let gf = bound.var("encoder.ln_f.gamma")?;
    let bf2 = bound.var("encoder.ln_f.beta")?;
    tape.layer_norm(x, gf, bf2)
}

/// Encoder over raw frames under a segment layout. The layout must describe
/// the stacked frame count; streaming layouts become an attention mask.
pub fn encode(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    masks: Option<&MaskSet>,
    features: &Tensor,
    layout: &SegmentLayout,
) -> Result<Var> {
    let windows = data::window_stack(features, cfg.feature_stride)?;
    if layout.frames != windows.shape()[0] {
        return Err(Error::dim(
            "encode",
            format!("layout frames {} vs stacked windows {}", layout.frames, windows.shape()[0]),
        ));
    }
    let allow = if layout.is_full_context() { None } else { Some(layout.attention_allow()) };
    encode_windows(tape, cfg, bound, masks, &windows, allow.as_ref())
}

/// Predictor states for blank-prefixed `labels`: `[U+1, pred_hidden]` where
/// row u conditions on the first u labels.
pub fn predict(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    masks: Option<&MaskSet>,
    labels: &[usize],
) -> Result<Var> {
    for &l in labels {
        if l == BLANK || l > cfg.vocab {
            return Err(Error::Label { label: l, vocab: cfg.vocab });
        }
    }
    let mut ids = Vec::with_capacity(labels.len() + 1);
    ids.push(BLANK);
    ids.extend_from_slice(labels);
    let table = bound.var("pred.embed")?;
    let emb = tape.embedding(table, &ids)?;
    let w_ih = weight(tape, bound, masks, "pred.w_ih")?;
    let b_ih = bound.var("pred.b_ih")?;
    let w_hh = weight(tape, bound, masks, "pred.w_hh")?;
    let h0 = tape.constant(&Tensor::zeros(vec![1, cfg.pred_hidden]));
    let mut h_prev = h0;
    let mut rows = Vec::with_capacity(ids.len());
    for u in 0..ids.len() {
        let e_u = tape.slice_rows(emb, u, 1)?;
        let a = tape.linear(e_u, w_ih, Some(b_ih))?;
        let b = tape.linear(h_prev, w_hh, None)?;
        let s = tape.add(a, b)?;
        let h = tape.tanh(s)?;
        rows.push(h);
        h_prev = h;
    }
    let states = tape.concat_rows(&rows)?;
    let proj_w = weight(tape, bound, masks, "pred.proj.w")?;
    let proj_b = bound.var("pred.proj.b")?;
    tape.linear(states, proj_w, Some(proj_b))
}

/// Joint logits `[T, U+1, V+1]` from encoder rows and predictor rows:
/// `W_out tanh(P_enc h_enc + P_pred h_pred + b)`.
pub fn join(tape: &mut Tape, bound: &Bound, h_enc: Var, h_pred: Var) -> Result<Var> {
    let w_enc = bound.var("joint.enc.w")?;
    let b = bound.var("joint.b")?;
    let w_pred = bound.var("joint.pred.w")?;
    let w_out = bound.var("joint.out.w")?;
    let pe = tape.linear(h_enc, w_enc, Some(b))?;
    let pp = tape.linear(h_pred, w_pred, None)?;
    let z = tape.outer_sum(pe, pp)?;
    let a = tape.tanh(z)?;
    tape.linear(a, w_out, None)
}

/// Full forward to per-node log posteriors `[T, U+1, V+1]`.
pub fn forward_log_probs(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    masks: Option<&MaskSet>,
    features: &Tensor,
    labels: &[usize],
    layout: &SegmentLayout,
) -> Result<Var> {
    let h_enc = encode(tape, cfg, bound, masks, features, layout)?;
    let h_pred = predict(tape, cfg, bound, masks, labels)?;
    let logits = join(tape, bound, h_enc, h_pred)?;
    tape.log_softmax(logits)
}

/// Transducer loss for one utterance under the given layout and masks.
pub fn forward_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    masks: Option<&MaskSet>,
    features: &Tensor,
    labels: &[usize],
    layout: &SegmentLayout,
) -> Result<Var> {
    let log_probs = forward_log_probs(tape, cfg, bound, masks, features, labels, layout)?;
    crate::rnnt::rnnt_loss(tape, log_probs, labels, BLANK)
}

/// Per-segment inference encoder: runs the whole stack independently on each
/// contextual window and keeps only the center rows, so right context never
/// compounds across layers. No gradients.
pub fn encode_sequential(
    cfg: &ModelConfig,
    params: &ParamStore,
    masks: Option<&MaskSet>,
    features: &Tensor,
    layout: &SegmentLayout,
) -> Result<Tensor> {
    let windows = data::window_stack(features, cfg.feature_stride)?;
    if layout.frames != windows.shape()[0] {
        return Err(Error::dim(
            "encode_sequential",
            format!("layout frames {} vs stacked windows {}", layout.frames, windows.shape()[0]),
        ));
    }
    let mut out = vec![0.0; layout.frames * cfg.embed_dim];
    for seg in &layout.segments {
        let slice = windows.slice_rows(seg.left_start, seg.right_end - seg.left_start)?;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, params, false, Some(&["frontend.", "encoder."]));
        let h = encode_windows(&mut tape, cfg, &bound, masks, &slice, None)?;
        let hv = tape.value(h);
        let local = seg.center_start - seg.left_start;
        for (row, q) in (seg.center_start..seg.center_end).enumerate() {
            let src = (local + row) * cfg.embed_dim;
            out[q * cfg.embed_dim..(q + 1) * cfg.embed_dim]
                .copy_from_slice(&hv.data()[src..src + cfg.embed_dim]);
        }
    }
    Tensor::new(vec![layout.frames, cfg.embed_dim], out)
}

/// Greedy-decode adapter: scores one (t, u) joint cell on a throwaway tape.
pub struct ModelScorer<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore,
    pub masks: Option<&'a MaskSet>,
}

impl JointScorer for ModelScorer<'_> {
    fn blank(&self) -> usize {
        BLANK
    }

    fn logits(&self, _t: usize, h_enc_t: &[f64], history: &[usize]) -> Result<Vec<f64>> {
        if h_enc_t.len() != self.cfg.embed_dim {
            return Err(Error::dim(
                "scorer",
                format!("encoder row {} vs embed {}", h_enc_t.len(), self.cfg.embed_dim),
            ));
        }
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, self.params, false, Some(&["pred.", "joint."]));
        let h_pred = predict(&mut tape, self.cfg, &bound, self.masks, history)?;
        let last = tape.slice_rows(h_pred, history.len(), 1)?;
        let enc = tape.constant(&Tensor::new(vec![1, self.cfg.embed_dim], h_enc_t.to_vec())?);
        let logits = join(&mut tape, &bound, enc, last)?;
        Ok(tape.value(logits).data().to_vec())
    }
}

/// Prune-event bookkeeping carried inside checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ScheduleState {
    pub prune_events_done: u32,
    pub frozen: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    step: usize,
    config: BTreeMap<String, Value>,
    metrics: BTreeMap<String, f64>,
    schedule: ScheduleState,
    tensors: Vec<TensorEntry>,
}

/// Parameters, masks, and bookkeeping loaded from a checkpoint directory.
pub struct Checkpoint {
    pub step: usize,
    pub config: BTreeMap<String, Value>,
    pub metrics: BTreeMap<String, f64>,
    pub schedule: ScheduleState,
    pub params: ParamStore,
    pub masks: MaskSet,
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ParamStore,
    masks: &MaskSet,
    step: usize,
    config: &BTreeMap<String, Value>,
    metrics: &BTreeMap<String, f64>,
    schedule: &ScheduleState,
) -> Result<()> {
    let tensor_dir = dir.join("tensors");
    fs::create_dir_all(&tensor_dir)?;
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        step,
        config: config.clone(),
        metrics: metrics.clone(),
        schedule: schedule.clone(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() })
            .collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    for (name, t) in params.iter() {
        crate::tensor::save(&tensor_dir, name, t)?;
    }
    masks.write_dir(&dir.join("masks"))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    let tensor_dir = dir.join("tensors");
    let mut params = ParamStore::new();
    for entry in &manifest.tensors {
        let t = crate::tensor::load(&tensor_dir, &entry.name)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {}: manifest shape {:?} vs file {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        params.insert(entry.name.clone(), t)?;
    }
    let mask_dir = dir.join("masks");
    let mut masks = if mask_dir.is_dir() { MaskSet::read_dir(&mask_dir)? } else { MaskSet::empty() };
    for layer in &manifest.schedule.frozen {
        if let Some(m) = masks.get_mut(layer) {
            m.freeze();
        }
    }
    Ok(Checkpoint {
        step: manifest.step,
        config: manifest.config,
        metrics: manifest.metrics,
        schedule: manifest.schedule,
        params,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunking::segment;
    use crate::data::{synthesize, DataConfig, Split};
    use crate::sparsity::update_mask;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            embed_dim: 16,
            ffn_dim: 16,
            num_heads: 2,
            input_dim: 4,
            feature_stride: 3,
            pred_embed: 8,
            pred_hidden: 8,
            joint_dim: 8,
            vocab: 5,
            rel_pos_clip: 8,
        }
    }

    fn data_cfg() -> DataConfig {
        DataConfig {
            num_train: 4,
            num_valid: 2,
            t_min: 24,
            t_max: 30,
            feature_dim: 4,
            vocab: 5,
            stride: 3,
        }
    }

    #[test]
    fn validate_rejects_bad_dims() {
        let mut c = tiny_cfg();
        c.embed_dim = 20;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.pred_hidden = 12;
        assert!(c.validate().is_err());
    }

    #[test]
    fn store_rejects_duplicates() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(vec![2])).is_err());
        assert!(s.get("b").is_err());
    }

    #[test]
    fn every_prunable_matrix_has_one_mask() {
        let m = RnntModel::new(tiny_cfg(), 1).unwrap();
        let layers = prunable_layers(&tiny_cfg());
        assert_eq!(layers.len(), 2 * 6 + 3);
        assert_eq!(m.masks.len(), layers.len());
        for name in &layers {
            let mask = m.masks.get(name).expect("mask present");
            let t = m.params.get(name).unwrap();
            assert_eq!(mask.weight_shape(), (t.shape()[0], t.shape()[1]));
            assert_eq!(mask.sparsity(), 0.0);
        }
    }

    #[test]
    fn init_is_seed_deterministic_and_name_keyed() {
        let a = RnntModel::new(tiny_cfg(), 7).unwrap();
        let b = RnntModel::new(tiny_cfg(), 7).unwrap();
        let c = RnntModel::new(tiny_cfg(), 8).unwrap();
        for (name, t) in a.params.iter() {
            assert_eq!(t.data(), b.params.get(name).unwrap().data(), "{name}");
        }
        assert_ne!(
            a.params.get("encoder.0.wq").unwrap().data(),
            c.params.get("encoder.0.wq").unwrap().data()
        );
        // Shared names initialize identically in the pretrain store.
        let p = PretrainModel::new(tiny_cfg(), 7).unwrap();
        assert_eq!(
            a.params.get("encoder.1.ffn.w1").unwrap().data(),
            p.params.get("encoder.1.ffn.w1").unwrap().data()
        );
        assert!(p.params.contains("recon.w"));
        assert!(!p.params.contains("pred.embed"));
        assert!(p.masks.contains("encoder.0.wq"));
        assert!(!p.masks.contains("pred.w_ih"));
    }

    fn first_utterance() -> crate::data::Utterance {
        synthesize(&data_cfg(), 5, Split::Train).unwrap().utterances[0].clone()
    }

    #[test]
    fn full_context_none_equals_all_true_mask_bitwise() {
        let cfg = tiny_cfg();
        let m = RnntModel::new(cfg, 3).unwrap();
        let u = first_utterance();
        let frames = u.windows.shape()[0];

        let mut t1 = Tape::new();
        let b1 = Bound::bind(&mut t1, &m.params, false, None);
        let h1 = encode_windows(&mut t1, &cfg, &b1, None, &u.windows, None).unwrap();

        let all = AllowMask::all(frames, frames);
        let mut t2 = Tape::new();
        let b2 = Bound::bind(&mut t2, &m.params, false, None);
        let h2 = encode_windows(&mut t2, &cfg, &b2, None, &u.windows, Some(&all)).unwrap();

        let (d1, d2) = (t1.value(h1).data(), t2.value(h2).data());
        assert!(d1.iter().zip(d2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn all_true_masks_equal_no_masks_bitwise() {
        let cfg = tiny_cfg();
        let m = RnntModel::new(cfg, 3).unwrap();
        let u = first_utterance();
        let layout = segment(u.windows.shape()[0], 3, 4, 1).unwrap();
        let allow = layout.attention_allow();

        let mut t1 = Tape::new();
        let b1 = Bound::bind(&mut t1, &m.params, false, None);
        let h1 = encode_windows(&mut t1, &cfg, &b1, None, &u.windows, Some(&allow)).unwrap();
        let mut t2 = Tape::new();
        let b2 = Bound::bind(&mut t2, &m.params, false, None);
        let h2 = encode_windows(&mut t2, &cfg, &b2, Some(&m.masks), &u.windows, Some(&allow)).unwrap();

        let (d1, d2) = (t1.value(h1).data(), t2.value(h2).data());
        assert!(d1.iter().zip(d2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn predict_is_pure_and_handles_empty_history() {
        let cfg = tiny_cfg();
        let m = RnntModel::new(cfg, 9).unwrap();
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &m.params, false, None);
        let empty = predict(&mut tape, &cfg, &bound, None, &[]).unwrap();
        assert_eq!(tape.value(empty).shape(), &[1, cfg.pred_hidden]);

        let a = predict(&mut tape, &cfg, &bound, None, &[1, 2, 3]).unwrap();
        let b = predict(&mut tape, &cfg, &bound, None, &[1, 2, 3]).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());

        assert!(predict(&mut tape, &cfg, &bound, None, &[0]).is_err());
        assert!(predict(&mut tape, &cfg, &bound, None, &[6]).is_err());
    }

    #[test]
    fn predict_matches_hand_tanh_recursion() {
        let cfg = ModelConfig {
            num_layers: 1,
            embed_dim: 8,
            ffn_dim: 8,
            num_heads: 1,
            input_dim: 2,
            feature_stride: 2,
            pred_embed: 8,
            pred_hidden: 8,
            joint_dim: 8,
            vocab: 2,
            rel_pos_clip: 2,
        };
        let mut m = RnntModel::new(cfg, 1).unwrap();
        let h = cfg.pred_hidden;
        let eye: Vec<f64> = (0..h * h).map(|i| if i / h == i % h { 1.0 } else { 0.0 }).collect();
        *m.params.get_mut("pred.w_ih").unwrap() = Tensor::new(vec![h, h], eye.clone()).unwrap();
        *m.params.get_mut("pred.w_hh").unwrap() = Tensor::new(vec![h, h], eye.clone()).unwrap();
        *m.params.get_mut("pred.proj.w").unwrap() = Tensor::new(vec![h, h], eye).unwrap();

        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &m.params, false, None);
        let out = predict(&mut tape, &cfg, &bound, None, &[1]).unwrap();
        let got = tape.value(out).data().to_vec();

        let table = m.params.get("pred.embed").unwrap().data().to_vec();
        let e = |id: usize| &table[id * h..(id + 1) * h];
        let mut s0 = vec![0.0; h];
        for i in 0..h {
            s0[i] = f64::tanh(e(0)[i]);
        }
        let mut s1 = vec![0.0; h];
        for i in 0..h {
            s1[i] = f64::tanh(e(1)[i] + s0[i]);
        }
        for i in 0..h {
            assert!((got[i] - s0[i]).abs() < 1e-15);
            assert!((got[h + i] - s1[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn join_zero_inputs_zero_bias_gives_zero_logits() {
        let cfg = tiny_cfg();
        let m = RnntModel::new(cfg, 2).unwrap();
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &m.params, false, None);
        let he = tape.constant(&Tensor::zeros(vec![3, cfg.embed_dim]));
        let hp = tape.constant(&Tensor::zeros(vec![2, cfg.pred_hidden]));
        let z = join(&mut tape, &bound, he, hp).unwrap();
        assert_eq!(tape.value(z).shape(), &[3, 2, cfg.logits_dim()]);
        assert!(tape.value(z).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_loss_is_finite_and_produces_grads() {
        let cfg = tiny_cfg();
        let m = RnntModel::new(cfg, 11).unwrap();
        let u = first_utterance();
        let layout = segment(u.windows.shape()[0], 3, 4, 1).unwrap();
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &m.params, true, None);
        let loss =
            forward_loss(&mut tape, &cfg, &bound, Some(&m.masks), &u.features, &u.labels, &layout)
                .unwrap();
        assert!(tape.value(loss).is_scalar());
        assert!(tape.value(loss).data()[0].is_finite());
        tape.backward(loss).unwrap();
        let gw = tape.grad(bound.var("encoder.0.wq").unwrap());
        assert!(gw.iter().any(|&g| g != 0.0));
        let gp = tape.grad(bound.var("pred.w_hh").unwrap());
        assert!(gp.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn weight_sharing_mutation_visible_in_both_modes() {
        let cfg = tiny_cfg();
        let mut m = RnntModel::new(cfg, 13).unwrap();
        let u = first_utterance();
        let frames = u.windows.shape()[0];
        let streaming = segment(frames, 3, 4, 1).unwrap();
        let run = |m: &RnntModel, layout: &SegmentLayout, masked: bool| {
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, &m.params, false, None);
            let masks = if masked { Some(&m.masks) } else { None };
            let h = encode(&mut tape, &cfg, &bound, masks, &u.features, layout).unwrap();
            tape.value(h).data().to_vec()
        };
        let before = run(&m, &streaming, true);
        m.params.get_mut("encoder.0.wq").unwrap().data_mut()[0] += 0.5;
        let after = run(&m, &streaming, true);
        assert_ne!(before, after);
    }

    #[test]
    fn pruned_coordinates_do_not_influence_streaming_path() {
        let cfg = tiny_cfg();
        let mut m = RnntModel::new(cfg, 17).unwrap();
        let u = first_utterance();
        let layout = segment(u.windows.shape()[0], 3, 4, 1).unwrap();
        // Prune half the blocks of one attention matrix by magnitude.
        let name = "encoder.0.wv";
        let w = m.params.get(name).unwrap().clone();
        let mask = m.masks.get_mut(name).unwrap();
        update_mask(&w, mask, 0.5).unwrap();
        let pruned_unit = m
            .masks
            .get(name)
            .unwrap()
            .expand()
            .iter()
            .position(|&c| c == 0.0)
            .expect("some pruned coordinate");

        let run = |m: &RnntModel, masked: bool| {
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, &m.params, false, None);
            let masks = if masked { Some(&m.masks) } else { None };
            let h = encode(&mut tape, &cfg, &bound, masks, &u.features, &layout).unwrap();
            tape.value(h).data().to_vec()
        };
        let masked_before = run(&m, true);
        let dense_before = run(&m, false);
        m.params.get_mut(name).unwrap().data_mut()[pruned_unit] += 1.0;
        let masked_after = run(&m, true);
        let dense_after = run(&m, false);
        assert!(masked_before
            .iter()
            .zip(&masked_after)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_ne!(dense_before, dense_after);
    }

    #[test]
    fn lookahead_stays_bounded_under_streaming_layout() {
        let cfg = tiny_cfg();
        let m = RnntModel::new(cfg, 19).unwrap();
        let mut features = first_utterance().features;
        let frames = features.shape()[0];
        let layout = segment(frames.div_ceil(cfg.feature_stride), 3, 4, 1).unwrap();
        assert!(layout.frames >= 9, "need a long utterance for this check");
        let run = |f: &Tensor, m: &RnntModel| {
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, &m.params, false, None);
            let h = encode(&mut tape, &cfg, &bound, Some(&m.masks), f, &layout).unwrap();
            tape.value(h).data()[..cfg.embed_dim].to_vec()
        };
        let before = run(&features, &m);
        // Perturb the final raw frame: it lands in the last stacked window,
        // beyond frame 0's reach even after two layers of look-ahead growth.
        let dim = cfg.input_dim;
        features.data_mut()[(frames - 1) * dim] += 10.0;
        let after = run(&features, &m);
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn sequential_matches_masked_attention_at_depth_one() {
        let mut cfg = tiny_cfg();
        cfg.num_layers = 1;
        let m = RnntModel::new(cfg, 23).unwrap();
        let u = first_utterance();
        let frames = u.windows.shape()[0];
        let layout = segment(frames, 3, 4, 1).unwrap();

        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &m.params, false, None);
        let h = encode(&mut tape, &cfg, &bound, Some(&m.masks), &u.features, &layout).unwrap();
        let masked = tape.value(h).data().to_vec();

        let seq = encode_sequential(&cfg, &m.params, Some(&m.masks), &u.features, &layout).unwrap();
        for (a, b) in masked.iter().zip(seq.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn sequential_matches_full_context_exactly() {
        let cfg = tiny_cfg();
        let m = RnntModel::new(cfg, 29).unwrap();
        let u = first_utterance();
        let frames = u.windows.shape()[0];
        let layout = segment(frames, frames.max(64), 20, 0).unwrap();

        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &m.params, false, None);
        let h = encode(&mut tape, &cfg, &bound, None, &u.features, &layout).unwrap();
        let masked = tape.value(h).data().to_vec();
        let seq = encode_sequential(&cfg, &m.params, None, &u.features, &layout).unwrap();
        for (a, b) in masked.iter().zip(seq.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scorer_emits_full_logit_rows() {
        let cfg = tiny_cfg();
        let m = RnntModel::new(cfg, 31).unwrap();
        let scorer = ModelScorer { cfg: &cfg, params: &m.params, masks: Some(&m.masks) };
        let row = vec![0.1; cfg.embed_dim];
        let l0 = scorer.logits(0, &row, &[]).unwrap();
        assert_eq!(l0.len(), cfg.logits_dim());
        let l1 = scorer.logits(0, &row, &[2, 4]).unwrap();
        assert_eq!(l1.len(), cfg.logits_dim());
        assert_ne!(l0, l1);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let cfg = tiny_cfg();
        let mut m = RnntModel::new(cfg, 37).unwrap();
        let name = "pred.w_ih";
        let w = m.params.get(name).unwrap().clone();
        update_mask(&w, m.masks.get_mut(name).unwrap(), 0.5).unwrap();
        m.masks.get_mut(name).unwrap().freeze();

        let dir = tempfile::tempdir().unwrap();
        let config: BTreeMap<String, Value> =
            [("seed".to_string(), Value::from(37u64))].into_iter().collect();
        let metrics: BTreeMap<String, f64> =
            [("streaming_loss".to_string(), 1.25)].into_iter().collect();
        let schedule = ScheduleState { prune_events_done: 2, frozen: vec![name.to_string()] };
        save_checkpoint(dir.path(), &m.params, &m.masks, 123, &config, &metrics, &schedule)
            .unwrap();

        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.step, 123);
        assert_eq!(ck.metrics["streaming_loss"], 1.25);
        assert_eq!(ck.schedule, schedule);
        assert_eq!(ck.params.len(), m.params.len());
        for (n, t) in m.params.iter() {
            let loaded = ck.params.get(n).unwrap();
            assert_eq!(t.shape(), loaded.shape());
            assert!(t.data().iter().zip(loaded.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(ck.masks.len(), m.masks.len());
        assert_eq!(ck.masks.get(name).unwrap().bits(), m.masks.get(name).unwrap().bits());
        assert!(ck.masks.get(name).unwrap().is_frozen());
        assert!(!ck.masks.get("pred.w_hh").unwrap().is_frozen());
    }

    #[test]
    fn load_rejects_bad_format() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("manifest.json"),
            r#"{"format":"other","step":0,"config":{},"metrics":{},"schedule":{"prune_events_done":0,"frozen":[]},"tensors":[]}"#,
        )
        .unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
