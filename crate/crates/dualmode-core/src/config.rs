//! Run configuration: a flat JSON object with dotted keys, e.g.
//! `{"schedule.t0": 300, "model.embed_dim": 64}`. Unknown keys are rejected,
//! missing keys take defaults, and every run writes the fully-resolved form
//! back to its output directory. Checkpoints embed the same flat form so they
//! are self-describing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::chunking::ModeSampler;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sparsity::{GroupLassoConfig, PruneSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub out_dir: String,

    pub data_num_train: usize,
    pub data_num_valid: usize,
    pub data_t_min: usize,
    pub data_t_max: usize,
    pub data_feature_dim: usize,
    pub data_vocab: usize,

    pub model_num_layers: usize,
    pub model_embed_dim: usize,
    pub model_ffn_dim: usize,
    pub model_num_heads: usize,
    pub model_feature_stride: usize,
    pub model_pred_embed: usize,
    pub model_pred_hidden: usize,
    pub model_joint_dim: usize,
    pub model_rel_pos_clip: usize,

    pub train_steps: usize,
    pub train_pretrain_steps: usize,
    pub train_batch_per_worker: usize,
    pub train_eval_interval: usize,
    pub train_dense_warmup_steps: usize,

    pub schedule_t0: usize,
    pub schedule_interval: usize,
    pub schedule_p: f64,
    pub schedule_n: u32,

    pub lasso_lambda: f64,

    pub opt_lr_peak: f64,
    pub opt_beta1: f64,
    pub opt_beta2: f64,
    pub opt_weight_decay: f64,

    pub lr_warmup_frac: f64,
    pub lr_hold_frac: f64,
    pub lr_decay_floor: f64,

    pub chunk_left: usize,
    pub chunk_center: usize,
    pub chunk_right: usize,
    pub chunk_tau1: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            workers: 2,
            out_dir: "runs/default".into(),
            data_num_train: 1024,
            data_num_valid: 64,
            data_t_min: 36,
            data_t_max: 96,
            data_feature_dim: 8,
            data_vocab: 16,
            model_num_layers: 2,
            model_embed_dim: 64,
            model_ffn_dim: 128,
            model_num_heads: 4,
            model_feature_stride: 6,
            model_pred_embed: 32,
            model_pred_hidden: 32,
            model_joint_dim: 64,
            model_rel_pos_clip: 64,
            train_steps: 3000,
            train_pretrain_steps: 800,
            train_batch_per_worker: 4,
            train_eval_interval: 200,
            train_dense_warmup_steps: 300,
            schedule_t0: 300,
            schedule_interval: 50,
            schedule_p: 0.2,
            schedule_n: 5,
            lasso_lambda: 0.0,
            opt_lr_peak: 2e-3,
            opt_beta1: 0.9,
            opt_beta2: 0.98,
            opt_weight_decay: 0.01,
            lr_warmup_frac: 0.1,
            lr_hold_frac: 0.4,
            lr_decay_floor: 0.05,
            chunk_left: 20,
            chunk_center: 3,
            chunk_right: 1,
            chunk_tau1: 64,
        }
    }
}

macro_rules! keys {
    ($($key:literal => $field:ident : $kind:ident),+ $(,)?) => {
        fn apply_key(cfg: &mut RunConfig, key: &str, value: &Value) -> Result<()> {
            match key {
                $($key => { cfg.$field = parse::$kind(key, value)?; Ok(()) })+
                _ => Err(Error::Config(format!("unknown config key: {key}"))),
            }
        }

        fn to_flat_map(cfg: &RunConfig) -> BTreeMap<String, Value> {
            let mut m = BTreeMap::new();
            $(m.insert($key.to_string(), parse::emit(&cfg.$field));)+
            m
        }
    };
}

mod parse {
    use super::*;

    pub fn usize(key: &str, v: &Value) -> Result<usize> {
        v.as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| Error::Config(format!("{key}: expected non-negative integer, got {v}")))
    }

    pub fn u64(key: &str, v: &Value) -> Result<u64> {
        v.as_u64()
            .ok_or_else(|| Error::Config(format!("{key}: expected non-negative integer, got {v}")))
    }

    pub fn u32(key: &str, v: &Value) -> Result<u32> {
        v.as_u64()
            .and_then(|x| u32::try_from(x).ok())
            .ok_or_else(|| Error::Config(format!("{key}: expected 32-bit integer, got {v}")))
    }

    pub fn f64(key: &str, v: &Value) -> Result<f64> {
        v.as_f64()
            .ok_or_else(|| Error::Config(format!("{key}: expected number, got {v}")))
    }

    pub fn string(key: &str, v: &Value) -> Result<String> {
        v.as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Config(format!("{key}: expected string, got {v}")))
    }

    pub trait Emit {
        fn to_value(&self) -> Value;
    }

    impl Emit for std::primitive::usize {
        fn to_value(&self) -> Value {
            Value::from(*self as std::primitive::u64)
        }
    }

    impl Emit for std::primitive::u64 {
        fn to_value(&self) -> Value {
            Value::from(*self)
        }
    }

    impl Emit for std::primitive::u32 {
        fn to_value(&self) -> Value {
            Value::from(*self)
        }
    }

    impl Emit for std::primitive::f64 {
        fn to_value(&self) -> Value {
            Value::from(*self)
        }
    }

    impl Emit for String {
        fn to_value(&self) -> Value {
            Value::from(self.clone())
        }
    }

    pub fn emit<T: Emit>(x: &T) -> Value {
        x.to_value()
    }
}

keys! {
    "seed" => seed: u64,
    "workers" => workers: usize,
    "out_dir" => out_dir: string,
    "data.num_train" => data_num_train: usize,
    "data.num_valid" => data_num_valid: usize,
    "data.t_min" => data_t_min: usize,
    "data.t_max" => data_t_max: usize,
    "data.feature_dim" => data_feature_dim: usize,
    "data.vocab" => data_vocab: usize,
    "model.num_layers" => model_num_layers: usize,
    "model.embed_dim" => model_embed_dim: usize,
    "model.ffn_dim" => model_ffn_dim: usize,
    "model.num_heads" => model_num_heads: usize,
    "model.feature_stride" => model_feature_stride: usize,
    "model.pred_embed" => model_pred_embed: usize,
    "model.pred_hidden" => model_pred_hidden: usize,
    "model.joint_dim" => model_joint_dim: usize,
    "model.rel_pos_clip" => model_rel_pos_clip: usize,
    "train.steps" => train_steps: usize,
    "train.pretrain_steps" => train_pretrain_steps: usize,
    "train.batch_per_worker" => train_batch_per_worker: usize,
    "train.eval_interval" => train_eval_interval: usize,
    "train.dense_warmup_steps" => train_dense_warmup_steps: usize,
    "schedule.t0" => schedule_t0: usize,
    "schedule.interval" => schedule_interval: usize,
    "schedule.p" => schedule_p: f64,
    "schedule.n" => schedule_n: u32,
    "lasso.lambda" => lasso_lambda: f64,
    "opt.lr_peak" => opt_lr_peak: f64,
    "opt.beta1" => opt_beta1: f64,
    "opt.beta2" => opt_beta2: f64,
    "opt.weight_decay" => opt_weight_decay: f64,
    "lr.warmup_frac" => lr_warmup_frac: f64,
    "lr.hold_frac" => lr_hold_frac: f64,
    "lr.decay_floor" => lr_decay_floor: f64,
    "chunk.left" => chunk_left: usize,
    "chunk.center" => chunk_center: usize,
    "chunk.right" => chunk_right: usize,
    "chunk.tau1" => chunk_tau1: usize,
}

impl RunConfig {
    /// Applies a flat key/value map over the defaults; unknown keys error.
    pub fn from_flat(map: &Map<String, Value>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (key, value) in map {
            apply_key(&mut cfg, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let map = v
            .as_object()
            .ok_or_else(|| Error::Config("config root must be a JSON object".into()))?;
        Self::from_flat(map)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        to_flat_map(self)
    }

    /// Writes the fully-resolved flat config as pretty JSON.
    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.to_flat())?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_t_min < 1 || self.data_t_min > self.data_t_max {
            return Err(Error::Config(format!(
                "data.t_min {} must be in [1, data.t_max {}]",
                self.data_t_min, self.data_t_max
            )));
        }
        if self.data_vocab < 1 {
            return Err(Error::Config("data.vocab must be >= 1".into()));
        }
        if self.workers < 1 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.train_batch_per_worker < 1 {
            return Err(Error::Config("train.batch_per_worker must be >= 1".into()));
        }
        if self.train_eval_interval < 1 {
            return Err(Error::Config("train.eval_interval must be >= 1".into()));
        }
        self.model_config().validate()?;
        self.schedule()?;
        self.sampler()?;
        self.lasso(0)?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.model_num_layers,
            embed_dim: self.model_embed_dim,
            ffn_dim: self.model_ffn_dim,
            num_heads: self.model_num_heads,
            input_dim: self.data_feature_dim,
            feature_stride: self.model_feature_stride,
            pred_embed: self.model_pred_embed,
            pred_hidden: self.model_pred_hidden,
            joint_dim: self.model_joint_dim,
            vocab: self.data_vocab,
            rel_pos_clip: self.model_rel_pos_clip,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            num_train: self.data_num_train,
            num_valid: self.data_num_valid,
            t_min: self.data_t_min,
            t_max: self.data_t_max,
            feature_dim: self.data_feature_dim,
            vocab: self.data_vocab,
            stride: self.model_feature_stride,
        }
    }

    pub fn schedule(&self) -> Result<PruneSchedule> {
        PruneSchedule::new(self.schedule_t0, self.schedule_interval, self.schedule_p, self.schedule_n)
    }

    pub fn sampler(&self) -> Result<ModeSampler> {
        ModeSampler::new(self.chunk_center, self.chunk_tau1)
    }

    /// Lasso window bounded by the freeze step of the owning phase's schedule.
    pub fn lasso(&self, freeze_step: usize) -> Result<GroupLassoConfig> {
        GroupLassoConfig::new(self.lasso_lambda, freeze_step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_json(r#"{"schedule.t00": 5}"#).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("unknown config key"), "{msg}");
        assert!(msg.contains("schedule.t00"), "{msg}");
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_json(
            r#"{"seed": 7, "schedule.p": 0.3, "model.embed_dim": 32, "out_dir": "x"}"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.schedule_p, 0.3);
        assert_eq!(cfg.model_embed_dim, 32);
        assert_eq!(cfg.out_dir, "x");
        assert_eq!(cfg.workers, RunConfig::default().workers);
    }

    #[test]
    fn type_mismatch_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": "abc"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schedule.p": "high"}"#).is_err());
    }

    #[test]
    fn flat_roundtrip_is_identity() {
        let cfg = RunConfig::from_json(r#"{"seed": 9, "lasso.lambda": 0.5}"#).unwrap();
        let flat = cfg.to_flat();
        let as_map: Map<String, Value> = flat.clone().into_iter().collect();
        let back = RunConfig::from_flat(&as_map).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn resolved_file_rereads(){
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let path = dir.path().join("config.json");
        cfg.write_resolved(&path).unwrap();
        let back = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invalid_combinations_rejected() {
        assert!(RunConfig::from_json(r#"{"data.t_min": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"workers": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schedule.p": 1.5}"#).is_err());
        assert!(RunConfig::from_json(r#"{"chunk.center": 0}"#).is_err());
    }
}
