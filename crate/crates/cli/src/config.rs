//! Run configuration: one JSON file, defaults for every key, dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use qv2x_core::calib::CalibConfig;
use qv2x_core::codebook::{JointConfig, Stage1Config};
use qv2x_core::comms::{ChannelModel, LatencyProfile, SystemConfig};
use qv2x_core::pipeline::{ModelConfig, PoseNoise, TrainConfig};
use qv2x_core::scene::ScenarioParams;
use qv2x_core::RngStream;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scenes: SceneSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub codebook: CodebookSection,
    pub calibration: CalibSection,
    pub system: SystemSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: SceneSection::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            codebook: CodebookSection::default(),
            calibration: CalibSection::default(),
            system: SystemSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub train_scenarios: usize,
    pub eval_scenarios: usize,
    pub agents: usize,
    pub objects: usize,
    pub frames: usize,
    pub frame_dt_ms: f64,
    pub params: ScenarioParams,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            train_scenarios: 20,
            eval_scenarios: 5,
            agents: 3,
            objects: 8,
            frames: 10,
            frame_dt_ms: 100.0,
            params: ScenarioParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub lambda_offset: f64,
    pub val_fraction: f64,
    pub clip_norm: Option<f64>,
    pub pose_noise: PoseNoise,
    /// When set, `train` also fits a model with a `C → C/ratio → C` bottleneck.
    pub compressed_ratio: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            momentum: d.momentum,
            batch: d.batch,
            lambda_offset: d.lambda_offset,
            val_fraction: d.val_fraction,
            clip_norm: d.clip_norm,
            pose_noise: d.pose_noise,
            compressed_ratio: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookSection {
    pub n_l: usize,
    pub n_r: usize,
    pub stage1_iters: usize,
    pub max_vectors: usize,
    pub jitter: f64,
    pub joint_epochs: usize,
    pub joint_lr: f64,
    pub joint_momentum: f64,
    pub joint_batch: usize,
    pub lambda_rec: f64,
}

impl Default for CodebookSection {
    fn default() -> Self {
        let s = Stage1Config::default();
        let j = JointConfig::default();
        Self {
            n_l: s.n_l,
            n_r: s.n_r,
            stage1_iters: s.iters,
            max_vectors: s.max_vectors,
            jitter: s.jitter,
            joint_epochs: j.epochs,
            joint_lr: j.lr,
            joint_momentum: j.momentum,
            joint_batch: j.batch,
            lambda_rec: j.lambda_rec,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// The full-precision model from `train`.
    Fp,
    /// The model jointly trained with the codebook.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibSection {
    pub source: ModelSource,
    pub fraction: f64,
    pub w_bits: u32,
    pub a_bits: u32,
    pub steps: usize,
    pub adaround_lr: f64,
    pub adaround_reg: f64,
    pub adaround_batch_rows: usize,
    pub scale_alpha: f64,
    pub scale_beta: f64,
    pub scale_grid: usize,
    pub lambda_hetero: f64,
    pub lambda_spatial: f64,
    pub use_scale_search: bool,
    pub use_adaround: bool,
    pub skip_fusion: bool,
    pub max_rows: usize,
    pub pose_noise: PoseNoise,
}

impl Default for CalibSection {
    fn default() -> Self {
        let c = CalibConfig::default();
        Self {
            source: ModelSource::Joint,
            fraction: c.fraction,
            w_bits: c.w_bits,
            a_bits: c.a_bits,
            steps: c.steps,
            adaround_lr: c.adaround_lr,
            adaround_reg: c.adaround_reg,
            adaround_batch_rows: c.adaround_batch_rows,
            scale_alpha: c.scale_alpha,
            scale_beta: c.scale_beta,
            scale_grid: c.scale_grid,
            lambda_hetero: c.lambda_hetero,
            lambda_spatial: c.lambda_spatial,
            use_scale_search: c.use_scale_search,
            use_adaround: c.use_adaround,
            skip_fusion: c.skip_fusion,
            max_rows: c.max_rows,
            pose_noise: c.pose_noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub channel: ChannelModel,
    pub latency_fp32: LatencyProfile,
    pub latency_int8: LatencyProfile,
    pub pose_noise: PoseNoise,
    pub extra_latency_ms: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            channel: ChannelModel::default(),
            latency_fp32: LatencyProfile::fp32(),
            latency_int8: LatencyProfile::int8(),
            pose_noise: PoseNoise::NONE,
            extra_latency_ms: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Translation pose-error levels (m) for `eval-ideal`.
    pub pose_noise_sweep: Vec<f64>,
    pub rot_noise_rad: f64,
    /// Also score a plain max-min quantization at the calibrated bit widths.
    pub include_maxmin: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            pose_noise_sweep: vec![0.0, 0.1, 0.2, 0.5],
            rot_noise_rad: 0.0,
            include_maxmin: true,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Sets `path` (dot separated) in `root`; the key must already exist.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| config_err(format!("`{}` is not a section", keys[..i].join("."))))?;
        let slot = obj.get_mut(*key).ok_or_else(|| config_err(format!("unknown key `{path}`")))?;
        if i + 1 == keys.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(config_err("empty override path"))
}

/// Recursively overlays `src` onto `dst`; keys missing from `dst` are kept so
/// that deserialization can reject them.
fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

impl RunConfig {
    /// Defaults, then the file, then `--set` overrides, then `--seed`.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            let user: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            if !user.is_object() {
                return Err(config_err("config root must be a JSON object"));
            }
            merge(&mut value, user);
        }
        for o in overrides {
            let (path, raw) = o.split_once('=').ok_or_else(|| config_err(format!("override `{o}` is not KEY=VALUE")))?;
            apply_override(&mut value, path.trim(), raw.trim())?;
        }
        if let Some(s) = seed {
            value["seed"] = Value::from(s);
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.scenes;
        if s.train_scenarios == 0 || s.eval_scenarios == 0 || s.agents == 0 || s.frames == 0 {
            return Err(config_err("scene counts must be positive"));
        }
        if !(s.frame_dt_ms > 0.0) {
            return Err(config_err("scenes.frame_dt_ms must be positive"));
        }
        if self.model.channels == 0 || self.model.hidden == 0 {
            return Err(config_err("model channels and hidden width must be positive"));
        }
        if self.train.epochs == 0 || self.train.batch == 0 {
            return Err(config_err("train.epochs and train.batch must be positive"));
        }
        if matches!(self.train.compressed_ratio, Some(r) if r == 0 || self.model.channels % r != 0) {
            return Err(config_err("train.compressed_ratio must divide model.channels"));
        }
        if self.codebook.n_l < 2 || self.codebook.n_l > u16::MAX as usize || self.codebook.n_r == 0 {
            return Err(config_err("codebook.n_l must be in 2..=65535 and codebook.n_r positive"));
        }
        if self.eval.pose_noise_sweep.iter().any(|s| !(*s >= 0.0)) {
            return Err(config_err("eval.pose_noise_sweep entries must be non-negative"));
        }
        self.calib_config().validate().map_err(|e| config_err(e.to_string()))?;
        self.system_config(self.system.latency_fp32)
            .channel
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        Ok(())
    }

    /// Short SHA-256 of the canonical JSON of `v`.
    pub fn hash_of<T: Serialize>(v: &T) -> String {
        let bytes = serde_json::to_vec(v).expect("config serializes");
        Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash(&self) -> String {
        Self::hash_of(self)
    }

    /// Fingerprints of the inputs that determine each stage's artifact.
    pub fn scenes_hash(&self) -> String {
        Self::hash_of(&(self.seed, &self.scenes))
    }

    pub fn train_hash(&self) -> String {
        Self::hash_of(&(self.scenes_hash(), &self.model, &self.train))
    }

    pub fn codebook_hash(&self) -> String {
        Self::hash_of(&(self.train_hash(), &self.codebook))
    }

    pub fn calib_hash(&self) -> String {
        let upstream = match self.calibration.source {
            ModelSource::Fp => self.train_hash(),
            ModelSource::Joint => self.codebook_hash(),
        };
        Self::hash_of(&(upstream, &self.calibration))
    }

    pub fn scenario_seed(&self, split: u64, i: usize) -> u64 {
        RngStream::new(self.seed).derive(split).derive(i as u64).seed()
    }

    pub fn train_config(&self, compressed: bool) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            model: ModelConfig {
                compress_ratio: if compressed { t.compressed_ratio } else { None },
                ..self.model.clone()
            },
            epochs: t.epochs,
            lr: t.lr,
            momentum: t.momentum,
            batch: t.batch,
            seed: self.seed,
            lambda_offset: t.lambda_offset,
            val_fraction: t.val_fraction,
            clip_norm: t.clip_norm,
            pose_noise: t.pose_noise,
        }
    }

    pub fn stage1_config(&self) -> Stage1Config {
        let c = &self.codebook;
        Stage1Config {
            n_l: c.n_l,
            n_r: c.n_r,
            iters: c.stage1_iters,
            seed: self.seed,
            max_vectors: c.max_vectors,
            jitter: c.jitter,
        }
    }

    pub fn joint_config(&self) -> JointConfig {
        let c = &self.codebook;
        JointConfig {
            epochs: c.joint_epochs,
            lr: c.joint_lr,
            momentum: c.joint_momentum,
            lambda_rec: c.lambda_rec,
            lambda_offset: self.train.lambda_offset,
            batch: c.joint_batch,
            seed: self.seed,
            n_r: c.n_r,
            val_fraction: self.train.val_fraction,
            clip_norm: self.train.clip_norm,
            pose_noise: self.train.pose_noise,
        }
    }

    pub fn calib_config(&self) -> CalibConfig {
        let c = &self.calibration;
        CalibConfig {
            fraction: c.fraction,
            w_bits: c.w_bits,
            a_bits: c.a_bits,
            steps: c.steps,
            adaround_lr: c.adaround_lr,
            adaround_reg: c.adaround_reg,
            adaround_batch_rows: c.adaround_batch_rows,
            scale_alpha: c.scale_alpha,
            scale_beta: c.scale_beta,
            scale_grid: c.scale_grid,
            lambda_hetero: c.lambda_hetero,
            lambda_spatial: c.lambda_spatial,
            use_scale_search: c.use_scale_search,
            use_adaround: c.use_adaround,
            skip_fusion: c.skip_fusion,
            max_rows: c.max_rows,
            pose_noise: c.pose_noise,
            seed: self.seed,
        }
    }

    pub fn system_config(&self, latency: LatencyProfile) -> SystemConfig {
        SystemConfig {
            channel: self.system.channel,
            latency,
            pose_noise: self.system.pose_noise,
            extra_latency_ms: self.system.extra_latency_ms,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn dotted_override_sets_nested_key() {
        let cfg = RunConfig::resolve(None, &["calibration.w_bits=4".into(), "train.compressed_ratio=16".into()], Some(9)).unwrap();
        assert_eq!(cfg.calibration.w_bits, 4);
        assert_eq!(cfg.train.compressed_ratio, Some(16));
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::resolve(None, &["train.epoch=3".into()], None), Err(CliError::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model": {"channels": 8, "colour": 1}}"#).unwrap();
        assert!(matches!(RunConfig::resolve(Some(&p), &[], None), Err(CliError::Config(_))));
    }

    #[test]
    fn stage_hashes_track_their_inputs() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.eval.include_maxmin = false;
        assert_eq!(a.train_hash(), b.train_hash());
        assert_ne!(a.hash(), b.hash());
        b.train.epochs += 1;
        assert_ne!(a.train_hash(), b.train_hash());
        assert_eq!(a.scenes_hash(), b.scenes_hash());
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::resolve(None, &["calibration.fraction=0".into()], None).is_err());
        assert!(RunConfig::resolve(None, &["train.compressed_ratio=3".into()], None).is_err());
    }
}
