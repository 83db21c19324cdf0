//! The contract every vision-language backend satisfies.
//!
//! A backend generates text for a clip and prompt, takes masked-loss training
//! steps, round-trips its parameters through checkpoints and (optionally)
//! exports attention. Backends declare what they support through
//! [`Capabilities`]; unsupported operations return
//! [`BackendError::Unsupported`] rather than emulating.

#[cfg(feature = "remote")]
pub mod remote;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fusion::FrameClip;

pub const CHECKPOINT_SCHEMA: &str = "rbft-checkpoint/1";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("context length overflow: sequence needs {required} tokens, context holds {available}")]
    ContextOverflow { required: usize, available: usize },
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("example {0:?} has an empty loss mask")]
    EmptyLossMask(String),
    #[error("non-finite loss in batch [{}]", .0.join(", "))]
    NonFiniteLoss(Vec<String>),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub generate: bool,
    pub train: bool,
    pub attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    /// `0` selects greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 512,
            temperature: 0.0,
            top_p: 1.0,
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_new_tokens < 1 {
            return Err(BackendError::InvalidInput("max_new_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidInput("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidInput("top_p must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Canonical text form used in cache keys.
    pub fn canonical(&self) -> String {
        format!(
            "max_new_tokens={};temperature={:?};top_p={:?};seed={}",
            self.max_new_tokens, self.temperature, self.top_p, self.seed
        )
    }
}

/// Parameter groups with separate learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    LanguageAndMerger,
    VisionTower,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 2] = [ParamGroup::LanguageAndMerger, ParamGroup::VisionTower];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::LanguageAndMerger => "language_and_merger",
            ParamGroup::VisionTower => "vision_tower",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One training sequence: a clip, its text token ids and a per-token mask
/// selecting which text tokens are predicted in the loss.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub clip: FrameClip,
    pub token_ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl TrainExample {
    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Optimizer settings for one update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSettings {
    pub step: usize,
    pub lr_by_group: BTreeMap<ParamGroup, f64>,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepStats {
    pub step: usize,
    pub loss: f64,
    pub lr_by_group: BTreeMap<String, f64>,
    pub grad_norm_preclip: f64,
    pub tokens_in_loss: usize,
}

/// Attention from one query position to every video token, per layer and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionCapture {
    pub layers: usize,
    pub heads: usize,
    pub n_video: usize,
    /// Absolute position of the query token in the fused sequence.
    pub query_position: usize,
    /// `layers x heads x n_video`, row-major.
    pub weights: Vec<f64>,
}

impl AttentionCapture {
    pub fn row(&self, layer: usize, head: usize) -> &[f64] {
        let start = (layer * self.heads + head) * self.n_video;
        &self.weights[start..start + self.n_video]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.layers, self.heads, self.n_video)
    }
}

/// A token with the byte range it covers in the encoded text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

pub trait Tokenizer: Send + Sync {
    /// Tokens with byte offsets; special tokens are not added.
    fn encode(&self, text: &str) -> Vec<Token>;
    fn decode(&self, ids: &[u32]) -> String;
    fn vocab_size(&self) -> usize;
    fn bos(&self) -> u32;
    fn eos(&self) -> u32;
    fn fingerprint(&self) -> String;
}

pub trait Backend: Send + Sync {
    /// Identifies the architecture and current weights.
    fn model_id(&self) -> String;
    fn capabilities(&self) -> Capabilities;
    fn tokenizer(&self) -> Option<&dyn Tokenizer>;
    /// Configuration recorded in checkpoints and compared on load.
    fn config_values(&self) -> BTreeMap<String, String>;

    fn generate(&self, clip: &FrameClip, prompt: &str, params: &GenerationParams) -> Result<String, BackendError>;

    /// Resets optimizer state; called at the start of every stage.
    fn begin_stage(&mut self) -> Result<(), BackendError> {
        Err(BackendError::Unsupported("training"))
    }

    fn train_step(&mut self, batch: &[TrainExample], settings: &StepSettings) -> Result<TrainStepStats, BackendError> {
        let _ = (batch, settings);
        Err(BackendError::Unsupported("training"))
    }

    /// Mean masked-token loss without updating anything.
    fn eval_loss(&self, batch: &[TrainExample]) -> Result<f64, BackendError> {
        let _ = batch;
        Err(BackendError::Unsupported("training"))
    }

    fn capture_attention(&self, clip: &FrameClip, prompt: &str) -> Result<AttentionCapture, BackendError> {
        let _ = (clip, prompt);
        Err(BackendError::Unsupported("attention capture"))
    }

    fn export_parameters(&self) -> Result<Vec<u8>, BackendError> {
        Err(BackendError::Unsupported("checkpointing"))
    }

    fn import_parameters(&mut self, blob: &[u8]) -> Result<(), BackendError> {
        let _ = blob;
        Err(BackendError::Unsupported("checkpointing"))
    }
}

pub fn config_hash(values: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in values {
        h.update(k.as_bytes());
        h.update([0x1f]);
        h.update(v.as_bytes());
        h.update([0x1e]);
    }
    hex::encode(&h.finalize()[..12])
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema: String,
    pub stage: String,
    pub tag: String,
    pub step: usize,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub parameter_digest: String,
    /// Tag of the checkpoint training started from, if any.
    pub source: Option<String>,
    #[serde(default)]
    pub direct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub dir: PathBuf,
    /// Config keys whose values differ from the loading backend's.
    pub differing_keys: Vec<String>,
}

/// `<root>/<stage>/<tag>/` holding `params.bin`, `meta.json` and `tokenizer.txt`.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    pub root: PathBuf,
}

impl CheckpointStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dir(&self, stage: &str, tag: &str) -> PathBuf {
        self.root.join(stage).join(tag)
    }

    pub fn exists(&self, stage: &str, tag: &str) -> bool {
        self.dir(stage, tag).join("meta.json").is_file()
    }

    pub fn save(
        &self,
        backend: &dyn Backend,
        stage: &str,
        tag: &str,
        step: usize,
        source: Option<String>,
        direct: bool,
    ) -> Result<CheckpointMeta, BackendError> {
        let dir = self.dir(stage, tag);
        let err = |message: String| BackendError::Checkpoint {
            path: dir.clone(),
            message,
        };
        fs::create_dir_all(&dir).map_err(|e| err(e.to_string()))?;
        let blob = backend.export_parameters()?;
        let config = backend.config_values();
        let meta = CheckpointMeta {
            schema: CHECKPOINT_SCHEMA.into(),
            stage: stage.into(),
            tag: tag.into(),
            step,
            config_hash: config_hash(&config),
            config,
            parameter_digest: digest_bytes(&blob),
            source,
            direct,
        };
        let tokenizer = backend.tokenizer().map(|t| t.fingerprint()).unwrap_or_default();
        fs::write(dir.join("params.bin"), &blob).map_err(|e| err(e.to_string()))?;
        fs::write(dir.join("tokenizer.txt"), tokenizer).map_err(|e| err(e.to_string()))?;
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(dir.join("meta.json"), json).map_err(|e| err(e.to_string()))?;
        Ok(meta)
    }

    pub fn read_meta(dir: &Path) -> Result<CheckpointMeta, BackendError> {
        let err = |message: String| BackendError::Checkpoint {
            path: dir.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(dir.join("meta.json")).map_err(|e| err(format!("missing metadata: {e}")))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| err(format!("corrupt metadata: {e}")))?;
        if meta.schema != CHECKPOINT_SCHEMA {
            return Err(err(format!("unsupported schema {:?}", meta.schema)));
        }
        Ok(meta)
    }

    pub fn load(&self, backend: &mut dyn Backend, stage: &str, tag: &str) -> Result<LoadedCheckpoint, BackendError> {
        Self::load_dir(backend, &self.dir(stage, tag))
    }

    pub fn load_dir(backend: &mut dyn Backend, dir: &Path) -> Result<LoadedCheckpoint, BackendError> {
        let err = |message: String| BackendError::Checkpoint {
            path: dir.to_path_buf(),
            message,
        };
        let meta = Self::read_meta(dir)?;
        let blob = fs::read(dir.join("params.bin")).map_err(|e| err(format!("missing parameters: {e}")))?;
        if digest_bytes(&blob) != meta.parameter_digest {
            return Err(err("parameter blob does not match its recorded digest".into()));
        }
        if let Some(tok) = backend.tokenizer() {
            let stored = fs::read_to_string(dir.join("tokenizer.txt")).unwrap_or_default();
            if stored != tok.fingerprint() {
                return Err(err("tokenizer fingerprint differs from the loading backend".into()));
            }
        }
        let current = backend.config_values();
        let mut differing: Vec<String> = meta
            .config
            .iter()
            .filter(|(k, v)| current.get(*k) != Some(*v))
            .map(|(k, _)| k.clone())
            .collect();
        differing.extend(current.keys().filter(|k| !meta.config.contains_key(*k)).cloned());
        differing.sort();
        differing.dedup();
        if !differing.is_empty() {
            log::warn!(
                "checkpoint {} was written with a different config; differing keys: {}",
                dir.display(),
                differing.join(", ")
            );
        }
        backend.import_parameters(&blob)?;
        Ok(LoadedCheckpoint {
            meta,
            dir: dir.to_path_buf(),
            differing_keys: differing,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_params_validation() {
        assert!(GenerationParams::default().validate().is_ok());
        assert!(GenerationParams { max_new_tokens: 0, ..Default::default() }.validate().is_err());
        assert!(GenerationParams { top_p: 0.0, ..Default::default() }.validate().is_err());
        assert!(GenerationParams { temperature: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn config_hash_depends_on_values() {
        let a = BTreeMap::from([("k".to_string(), "1".to_string())]);
        let b = BTreeMap::from([("k".to_string(), "2".to_string())]);
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
    }

    #[test]
    fn attention_rows_index_layer_major() {
        let cap = AttentionCapture {
            layers: 2,
            heads: 2,
            n_video: 3,
            query_position: 9,
            weights: (0..12).map(f64::from).collect(),
        };
        assert_eq!(cap.row(1, 0), &[6.0, 7.0, 8.0]);
    }
}
