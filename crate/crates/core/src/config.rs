//! Run configuration: a TOML file with one table per section, plus
//! `section.key = value` overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{OcclusionScheme, Perturbation};
use crate::backbone::{BackboneConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::navsim::SFMParams;
use crate::pose_encoder::PoseEncoderConfig;
use crate::synth::{CameraConfig, GaitModel, WorldConfig};
use crate::train::TrainConfig;

/// Environment variable naming the default run-directory root.
pub const RUN_ROOT_ENV: &str = "POSECAST_RUN_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSection {
    /// Scenes written by `generate` (the training corpus).
    pub n_scenes: usize,
    /// Held-out scenes written by `generate`.
    pub n_test: usize,
    /// Index offset of the held-out scenes.
    pub test_offset: u64,
    /// Pose coordinates per joint in generated corpora; 2 projects through `camera`.
    pub pose_dims: usize,
    pub camera: CameraConfig,
    #[serde(flatten)]
    pub generator: WorldConfig,
}

impl Default for WorldSection {
    fn default() -> Self {
        WorldSection {
            n_scenes: 2000,
            n_test: 400,
            test_offset: 1_000_000,
            pose_dims: 3,
            camera: CameraConfig::default(),
            generator: WorldConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSection {
    pub enabled: bool,
    /// Coordinates per joint the model expects.
    pub dims: usize,
    /// Joint subset kept before training and evaluation; empty keeps all.
    pub joints: Vec<usize>,
    #[serde(flatten)]
    pub encoder: PoseEncoderConfig,
}

impl Default for PoseSection {
    fn default() -> Self {
        PoseSection { enabled: true, dims: 3, joints: Vec::new(), encoder: PoseEncoderConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Samples per scene for min-of-k metrics.
    pub k: usize,
    /// `none`, `noise`, `strip_pose`, or an occlusion scheme name.
    pub perturbation: String,
    pub noise_std: f64,
    pub noise_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k: 1, perturbation: "none".into(), noise_std: 0.2, noise_fraction: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavSection {
    pub episodes: usize,
    /// `none`, `oracle` or `model` (the checkpoint at `paths.checkpoint`).
    pub predictor: String,
    pub exclude_timeouts: bool,
    #[serde(flatten)]
    pub sfm: SFMParams,
}

impl Default for NavSection {
    fn default() -> Self {
        NavSection { episodes: 100, predictor: "oracle".into(), exclude_timeouts: false, sfm: SFMParams::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    /// Root for run directories; empty uses the environment or `runs`.
    pub run_root: String,
    /// Training corpus, or the corpus to perturb or plot.
    pub corpus: String,
    /// Evaluation corpus; also the validation set during training.
    pub test_corpus: String,
    pub checkpoint: String,
    /// Second checkpoint drawn in blue on trajectory plots.
    pub pose_checkpoint: String,
    /// Report or episode log read by `plot`.
    pub input: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; copied into the world, training and model seeds.
    pub seed: u64,
    pub world: WorldSection,
    pub gait: GaitModel,
    pub backbone: BackboneConfig,
    pub pose: PoseSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub navsim: NavSection,
    pub paths: PathsSection,
}

/// Keys that are valid but absent from the serialized defaults.
const OPTIONAL_KEYS: [&str; 1] = ["train.lr"];

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), message: message.into() }
}

/// Rejects keys that no section defines, naming the first offender.
fn check_keys(value: &toml::Value, reference: &toml::Value, prefix: &str) -> Result<()> {
    let (toml::Value::Table(t), toml::Value::Table(r)) = (value, reference) else { return Ok(()) };
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            // tagged enums carry variant-specific fields
            Some(sub @ toml::Value::Table(st)) if !st.contains_key("kind") => check_keys(v, sub, &key)?,
            Some(_) => {}
            None if OPTIONAL_KEYS.contains(&key.as_str()) => {}
            None => return Err(config_err(&key, "unknown key")),
        }
    }
    Ok(())
}

/// Parses a flag value as a TOML value, falling back to a bare string.
pub fn parse_value(text: &str) -> toml::Value {
    match format!("v = {text}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.into())),
        Err(_) => toml::Value::String(text.into()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| config_err(key, "not a table"))?;
        cur = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur.as_table_mut().ok_or_else(|| config_err(key, "not a table"))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn first_key(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "config".into())
}

impl RunConfig {
    /// Builds a config from optional TOML text and ordered overrides.
    pub fn from_parts(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = match text {
            Some(t) => toml::Value::Table(t.parse::<toml::Table>().map_err(|e| config_err("config", e.message()))?),
            None => toml::Value::Table(toml::Table::new()),
        };
        for (k, v) in overrides {
            set_path(&mut value, k, parse_value(v))?;
        }
        let reference = toml::Value::try_from(RunConfig::default()).map_err(|e| config_err("config", e.to_string()))?;
        check_keys(&value, &reference, "")?;
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            config_err(&first_key(&msg), msg)
        })?;
        cfg.synced().validated()
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| config_err("config", format!("{}: {e}", p.display())))?),
            None => None,
        };
        Self::from_parts(text.as_deref(), overrides)
    }

    fn synced(mut self) -> Self {
        self.world.generator.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    fn validated(self) -> Result<Self> {
        self.world.generator.validate().map_err(|e| config_err("world", e.to_string()))?;
        self.gait.validate().map_err(|e| config_err("gait", e.to_string()))?;
        self.train.validate()?;
        self.navsim.sfm.validate()?;
        self.model_config().validate()?;
        if !(self.world.pose_dims == 2 || self.world.pose_dims == 3) {
            return Err(config_err("world.pose_dims", "must be 2 or 3"));
        }
        if self.eval.k == 0 {
            return Err(config_err("eval.k", "must be at least 1"));
        }
        self.perturbation()?;
        if !["none", "oracle", "model"].contains(&self.navsim.predictor.as_str()) {
            return Err(config_err("navsim.predictor", "expected none, oracle or model"));
        }
        Ok(self)
    }

    pub fn model_config(&self) -> ModelConfig {
        let pose = self.pose.enabled.then(|| self.pose.encoder.clone());
        let mut m = ModelConfig::new(self.backbone.clone(), pose, self.seed);
        m.t_obs = self.world.generator.t_obs;
        m.t_pred = self.world.generator.t_pred;
        if self.pose.enabled {
            m.pose_dims = self.pose.dims;
            if !self.pose.joints.is_empty() {
                m.joints = self.pose.joints.len();
            }
        }
        m
    }

    /// Perturbation selected by the `eval` section, seeded by the master seed.
    pub fn perturbation(&self) -> Result<Option<Perturbation>> {
        let e = &self.eval;
        Ok(match e.perturbation.as_str() {
            "none" => None,
            "noise" => Some(Perturbation::GaussianNoise { std: e.noise_std, fraction: e.noise_fraction, seed: self.seed }),
            "strip_pose" => Some(Perturbation::StripPose),
            other => {
                let scheme: OcclusionScheme = serde_json::from_value(serde_json::Value::String(other.into()))
                    .map_err(|_| config_err("eval.perturbation", format!("unknown perturbation `{other}`")))?;
                Some(Perturbation::Occlusion { scheme, seed: self.seed })
            }
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    /// First 12 hex digits of the sha256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_root(&self) -> PathBuf {
        if !self.paths.run_root.is_empty() {
            return PathBuf::from(&self.paths.run_root);
        }
        std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
    }
}
