//! Stage-I data construction: generate rationales with the base model, mix
//! them with ground-truth annotations and lay out the training targets.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, BackendError, GenerationParams};
use crate::data::{CompositionMode, DataError, DatasetManifest, RationaleRecord, Split};
use crate::fusion::{FrameSource, FusionConfig, FusionError};
use crate::prompts::{serialize_target, ClassificationPromptSpec, PromptError, TargetSerialization};

pub const STAGE1_SCHEMA: &str = "rbft-stage1/1";

#[derive(Debug, Error)]
pub enum RationaleError {
    #[error("invalid mix policy: {0}")]
    Policy(String),
    #[error("{pool} rationale pool is missing samples: {}", .missing.join(", "))]
    Coverage { pool: &'static str, missing: Vec<String> },
    #[error("no rationale produced for: {}", .failed.join(", "))]
    Generation {
        failed: Vec<String>,
        manifest: Box<GenerationManifest>,
    },
    #[error("backend cannot generate text")]
    Unsupported,
    #[error("train split is empty")]
    EmptyTrainSplit,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl ToString) -> RationaleError {
    RationaleError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[serde(rename = "self")]
    SelfGenerated,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPolicy {
    /// Fraction `q` of training samples that use self-generated rationales.
    pub self_ratio: f64,
    pub seed: u64,
    pub ground_truth_source: Option<PathBuf>,
}

impl MixPolicy {
    pub fn all_self(seed: u64) -> Self {
        Self {
            self_ratio: 1.0,
            seed,
            ground_truth_source: None,
        }
    }

    pub fn validate(&self) -> Result<(), RationaleError> {
        let q = self.self_ratio;
        if !(0.0..=1.0).contains(&q) {
            return Err(RationaleError::Policy(format!("self_ratio {q} outside [0, 1]")));
        }
        match (q == 1.0, &self.ground_truth_source) {
            (true, Some(_)) => Err(RationaleError::Policy("self_ratio = 1 takes no ground-truth source".into())),
            (false, None) => Err(RationaleError::Policy(format!("self_ratio {q} < 1 needs a ground-truth source"))),
            _ => Ok(()),
        }
    }
}

/// `round(q * n)` with halves rounded up.
pub fn self_count(q: f64, n: usize) -> usize {
    // The epsilon absorbs representation error such as 0.35 * 10 = 3.4999...
    ((q * n as f64 + 0.5 + 1e-9).floor() as usize).min(n)
}

/// Cache key over everything that determines a generation.
pub fn cache_key(video_id: &str, prompt_id: &str, model_id: &str, params: &GenerationParams) -> String {
    let mut h = Sha256::new();
    for part in [video_id, prompt_id, model_id, &params.canonical()] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct GenerationOptions {
    pub cache_dir: Option<PathBuf>,
    /// Attempts per sample before it counts as failed.
    pub retries: usize,
    pub workers: usize,
    /// Fixed `created_at` for byte-reproducible output; `None` stamps the clock.
    pub created_at: Option<String>,
    pub split: Split,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            cache_dir: None,
            retries: 3,
            workers: 1,
            created_at: None,
            split: Split::Train,
        }
    }
}

/// Summary of one generation run, written next to the rationale file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub requested: usize,
    pub generated: usize,
    pub cached: usize,
    /// Failed attempts per video id (only ids with failures).
    pub failures: BTreeMap<String, usize>,
    pub failed_samples: Vec<String>,
    /// Last error message of each failed sample.
    pub errors: BTreeMap<String, String>,
    pub elapsed_s: f64,
    pub model_id: String,
    pub prompt_id: String,
    pub decoding: GenerationParams,
    pub config_hash: String,
}

impl GenerationManifest {
    pub fn total_failures(&self) -> usize {
        self.failures.values().sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), RationaleError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json).map_err(|e| io_err(path, e))
    }
}

fn read_cached(dir: &Path, key: &str) -> Option<RationaleRecord> {
    let text = fs::read_to_string(dir.join(format!("{key}.json"))).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_cached(dir: &Path, key: &str, record: &RationaleRecord) -> Result<(), RationaleError> {
    let path = dir.join(format!("{key}.json"));
    let tmp = dir.join(format!(".{key}.{}.tmp", std::process::id()));
    let json = serde_json::to_string(record).expect("record serializes");
    fs::write(&tmp, json).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
}

enum Outcome {
    Cached(RationaleRecord),
    Generated(RationaleRecord, usize),
    Failed(usize, String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRun {
    pub records: Vec<RationaleRecord>,
    pub manifest: GenerationManifest,
}

/// Produces one rationale per sample of `opts.split`, in manifest order.
///
/// Completed records are looked up in the cache first. Each remaining sample
/// gets up to `opts.retries` attempts; the run fails if any sample is left
/// without a rationale, and the error carries the run manifest.
#[allow(clippy::too_many_arguments)]
pub fn generate_rationales(
    manifest: &DatasetManifest,
    frames: &dyn FrameSource,
    fusion: &FusionConfig,
    prompt: &str,
    prompt_id: &str,
    backend: &dyn Backend,
    params: &GenerationParams,
    opts: &GenerationOptions,
) -> Result<GenerationRun, RationaleError> {
    if !backend.capabilities().generate {
        return Err(RationaleError::Unsupported);
    }
    params.validate()?;
    let samples: Vec<_> = manifest.split(opts.split).collect();
    if samples.is_empty() {
        return Err(RationaleError::EmptyTrainSplit);
    }
    if let Some(dir) = &opts.cache_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let started = Instant::now();
    let model_id = backend.model_id();
    let created_at = opts
        .created_at
        .clone()
        .unwrap_or_else(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));

    let run_one = |sample: &&crate::data::Sample| -> Result<Outcome, RationaleError> {
        let id = &sample.video.id;
        let key = cache_key(id, prompt_id, &model_id, params);
        if let Some(dir) = &opts.cache_dir {
            if let Some(rec) = read_cached(dir, &key) {
                return Ok(Outcome::Cached(rec));
            }
        }
        let clip = fusion.prepare(frames, &sample.video)?;
        let mut failures = 0;
        let mut last_error = String::new();
        for _ in 0..opts.retries.max(1) {
            match backend.generate(&clip, prompt, params) {
                Ok(text) if !text.trim().is_empty() => {
                    let rec = RationaleRecord {
                        video_id: id.clone(),
                        rationale_text: text,
                        generator_model_id: model_id.clone(),
                        prompt_id: prompt_id.to_string(),
                        decoding: params.clone(),
                        created_at: created_at.clone(),
                    };
                    if let Some(dir) = &opts.cache_dir {
                        write_cached(dir, &key, &rec)?;
                    }
                    return Ok(Outcome::Generated(rec, failures));
                }
                Ok(_) => last_error = "empty generation".into(),
                Err(e) => last_error = e.to_string(),
            }
            failures += 1;
            log::warn!("generation for {id} failed (attempt {failures}): {last_error}");
        }
        Ok(Outcome::Failed(failures, last_error))
    };

    let outcomes: Vec<Result<Outcome, RationaleError>> = run_parallel(&samples, opts.workers, run_one);

    let mut records = Vec::with_capacity(samples.len());
    let mut report = GenerationManifest {
        requested: samples.len(),
        generated: 0,
        cached: 0,
        failures: BTreeMap::new(),
        failed_samples: Vec::new(),
        errors: BTreeMap::new(),
        elapsed_s: 0.0,
        model_id: model_id.clone(),
        prompt_id: prompt_id.to_string(),
        decoding: params.clone(),
        config_hash: String::new(),
    };
    for (sample, outcome) in samples.iter().zip(outcomes) {
        let id = sample.video.id.clone();
        match outcome? {
            Outcome::Cached(rec) => {
                report.cached += 1;
                records.push(rec);
            }
            Outcome::Generated(rec, failures) => {
                report.generated += 1;
                if failures > 0 {
                    report.failures.insert(id, failures);
                }
                records.push(rec);
            }
            Outcome::Failed(failures, message) => {
                report.failures.insert(id.clone(), failures);
                report.errors.insert(id.clone(), message);
                report.failed_samples.push(id);
            }
        }
    }
    report.elapsed_s = started.elapsed().as_secs_f64();
    let mut cfg: BTreeMap<String, String> = fusion.key_values();
    cfg.insert("generation.decoding".into(), params.canonical());
    cfg.insert("generation.prompt_id".into(), prompt_id.into());
    cfg.insert("generation.model_id".into(), model_id);
    report.config_hash = crate::backend::config_hash(&cfg);
    if !report.failed_samples.is_empty() {
        return Err(RationaleError::Generation {
            failed: report.failed_samples.clone(),
            manifest: Box::new(report),
        });
    }
    Ok(GenerationRun {
        records,
        manifest: report,
    })
}

/// Maps `f` over `items` on up to `workers` threads, preserving order.
pub(crate) fn run_parallel<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    if workers > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
    }
    let _ = workers;
    items.iter().map(f).collect()
}

/// Verbatim conversion of dataset annotations into ground-truth records.
pub fn ground_truth_records(annotations: &[(String, String)], source: &str) -> Vec<RationaleRecord> {
    annotations
        .iter()
        .map(|(id, text)| RationaleRecord {
            video_id: id.clone(),
            rationale_text: text.clone(),
            generator_model_id: crate::toy::scene::GROUND_TRUTH_MODEL.into(),
            prompt_id: format!("annotation/{source}"),
            decoding: GenerationParams::default(),
            created_at: crate::toy::scene::FIXED_TIMESTAMP.into(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub video_id: String,
    pub provenance: Provenance,
    pub record: RationaleRecord,
}

/// Chooses `round(q * N)` samples (seeded shuffle of the ids) to use
/// self-generated rationales; the rest use ground truth. Output follows the
/// order of `train_ids`.
pub fn mix_rationales(
    train_ids: &[String],
    self_records: &[RationaleRecord],
    ground_truth: Option<&[RationaleRecord]>,
    policy: &MixPolicy,
) -> Result<Vec<Assignment>, RationaleError> {
    if !(0.0..=1.0).contains(&policy.self_ratio) {
        return Err(RationaleError::Policy(format!("self_ratio {} outside [0, 1]", policy.self_ratio)));
    }
    let n_self = self_count(policy.self_ratio, train_ids.len());
    let self_ix: HashMap<&str, &RationaleRecord> = self_records.iter().map(|r| (r.video_id.as_str(), r)).collect();
    let gt_ix: HashMap<&str, &RationaleRecord> = ground_truth
        .unwrap_or_default()
        .iter()
        .map(|r| (r.video_id.as_str(), r))
        .collect();

    let mut order: Vec<usize> = (0..train_ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(policy.seed));
    let mut is_self = vec![false; train_ids.len()];
    for &i in &order[..n_self] {
        is_self[i] = true;
    }

    let missing = |pool: &HashMap<&str, &RationaleRecord>, want: bool| -> Vec<String> {
        train_ids
            .iter()
            .zip(&is_self)
            .filter(|(id, s)| **s == want && !pool.contains_key(id.as_str()))
            .map(|(id, _)| id.clone())
            .collect()
    };
    let gap = missing(&self_ix, true);
    if !gap.is_empty() {
        return Err(RationaleError::Coverage {
            pool: "self-generated",
            missing: gap,
        });
    }
    let gap = missing(&gt_ix, false);
    if !gap.is_empty() {
        return Err(RationaleError::Coverage {
            pool: "ground-truth",
            missing: gap,
        });
    }
    Ok(train_ids
        .iter()
        .zip(is_self)
        .map(|(id, s)| {
            let (provenance, rec) = if s {
                (Provenance::SelfGenerated, self_ix[id.as_str()])
            } else {
                (Provenance::GroundTruth, gt_ix[id.as_str()])
            };
            Assignment {
                video_id: id.clone(),
                provenance,
                record: rec.clone(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Entry {
    pub video_id: String,
    pub label_index: usize,
    pub serialization: TargetSerialization,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Dataset {
    pub mode: CompositionMode,
    pub entries: Vec<Stage1Entry>,
    /// Hash of the rationale generation manifest the entries came from.
    pub generation_hash: String,
}

/// Joins prompt and target in every serialized training text.
pub const PROMPT_JOINER: &str = " ";
/// Separates label and rationale inside label-bearing targets.
pub const LABEL_SEPARATOR: &str = " ";

impl Stage1Dataset {
    pub fn provenance_counts(&self) -> (usize, usize) {
        let n_self = self.entries.iter().filter(|e| e.provenance == Provenance::SelfGenerated).count();
        (n_self, self.entries.len() - n_self)
    }

    pub fn save(&self, path: &Path) -> Result<(), RationaleError> {
        let mut w = BufWriter::new(fs::File::create(path).map_err(|e| io_err(path, e))?);
        let header = serde_json::json!({
            "schema": STAGE1_SCHEMA,
            "mode": self.mode,
            "generation_hash": self.generation_hash,
        });
        writeln!(w, "{header}").map_err(|e| io_err(path, e))?;
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e).expect("entry serializes")).map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, RationaleError> {
        let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header: serde_json::Value = lines
            .next()
            .ok_or_else(|| io_err(path, "empty file"))?
            .map_err(|e| io_err(path, e))
            .and_then(|l| serde_json::from_str(&l).map_err(|e| io_err(path, e)))?;
        if header["schema"] != STAGE1_SCHEMA {
            return Err(io_err(path, format!("unsupported schema {}", header["schema"])));
        }
        let mode: CompositionMode = serde_json::from_value(header["mode"].clone()).map_err(|e| io_err(path, e))?;
        let generation_hash = header["generation_hash"].as_str().unwrap_or_default().to_string();
        let mut entries = Vec::new();
        for line in lines {
            let line = line.map_err(|e| io_err(path, e))?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line).map_err(|e| io_err(path, e))?);
            }
        }
        Ok(Self {
            mode,
            entries,
            generation_hash,
        })
    }
}

/// The instruction a Stage-I entry is trained under.
pub fn stage1_prompt(mode: CompositionMode, rationale_prompt: &str, cls: &ClassificationPromptSpec) -> String {
    if mode.has_label() {
        cls.label_and_rationale_prompt()
    } else {
        rationale_prompt.to_string()
    }
}

/// Lays out one entry per assigned train sample.
pub fn build_stage1_dataset(
    manifest: &DatasetManifest,
    assignment: &[Assignment],
    mode: CompositionMode,
    rationale_prompt: &str,
    cls: &ClassificationPromptSpec,
    generation_hash: &str,
) -> Result<Stage1Dataset, RationaleError> {
    let by_id: HashMap<&str, &Assignment> = assignment.iter().map(|a| (a.video_id.as_str(), a)).collect();
    let missing: Vec<String> = manifest
        .split(Split::Train)
        .filter(|s| !by_id.contains_key(s.video.id.as_str()))
        .map(|s| s.video.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(RationaleError::Coverage {
            pool: "assigned",
            missing,
        });
    }
    let prompt = stage1_prompt(mode, rationale_prompt, cls);
    let mut entries = Vec::new();
    for sample in manifest.split(Split::Train) {
        let a = by_id[sample.video.id.as_str()];
        let target = serialize_target(
            mode,
            &a.record.rationale_text,
            cls.surface(sample.label_index),
            LABEL_SEPARATOR,
        )?;
        entries.push(Stage1Entry {
            video_id: sample.video.id.clone(),
            label_index: sample.label_index,
            serialization: target.with_prompt(&prompt, PROMPT_JOINER),
            provenance: a.provenance,
        });
    }
    Ok(Stage1Dataset {
        mode,
        entries,
        generation_hash: generation_hash.to_string(),
    })
}
