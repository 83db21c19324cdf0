//! Two-stage orchestration: rationale fine-tuning, then label fine-tuning
//! from the resulting weights, with a warmup-cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    Backend, BackendError, CheckpointMeta, CheckpointStore, ParamGroup, StepSettings, Token, Tokenizer, TrainExample,
    TrainStepStats,
};
use crate::data::{DatasetManifest, Split};
use crate::fusion::{FrameClip, FrameSource, FusionConfig, FusionError};
use crate::prompts::{label_target, ClassificationPromptSpec, TargetSerialization};
use crate::rationale::{Stage1Dataset, PROMPT_JOINER};

pub const DEFAULT_SHUFFLE_SEED: u64 = 17;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("stage dataset is empty")]
    EmptyDataset,
    #[error("target span of {0:?} is empty")]
    EmptyTarget(String),
    #[error("{0}")]
    Refused(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("non-finite loss at step {step} in batch [{}]", .ids.join(", "))]
    NonFinite { step: usize, ids: Vec<String> },
    #[error("backend has no tokenizer; training needs token offsets")]
    NoTokenizer,
    #[error(transparent)]
    Backend(BackendError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl From<BackendError> for TrainingError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::NonFiniteLoss(ids) => TrainingError::NonFinite { step: 0, ids },
            other => TrainingError::Backend(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr_by_group: BTreeMap<ParamGroup, f64>,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub global_batch: usize,
    pub epochs_per_stage: usize,
    /// Floor of the cosine decay.
    pub min_lr: f64,
    pub shuffle_seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr_by_group: BTreeMap::from([(ParamGroup::LanguageAndMerger, 1e-5), (ParamGroup::VisionTower, 2e-6)]),
            warmup_fraction: 0.03,
            total_steps: 0,
            weight_decay: 0.1,
            clip_norm: 1.0,
            global_batch: 16,
            epochs_per_stage: 1,
            min_lr: 0.0,
            shuffle_seed: DEFAULT_SHUFFLE_SEED,
        }
    }
}

impl ScheduleConfig {
    pub fn steps_for(n: usize, epochs: usize, batch: usize) -> usize {
        (n * epochs).div_ceil(batch.max(1))
    }

    /// Copy with `total_steps` derived from a dataset of `n` examples.
    pub fn for_dataset(&self, n: usize) -> Self {
        Self {
            total_steps: Self::steps_for(n, self.epochs_per_stage, self.global_batch),
            ..self.clone()
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let mut problems = Vec::new();
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            problems.push(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction));
        }
        if self.global_batch == 0 {
            problems.push("global_batch must be >= 1".into());
        }
        if self.epochs_per_stage == 0 {
            problems.push("epochs_per_stage must be >= 1".into());
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 || self.min_lr < 0.0 {
            problems.push("weight_decay, clip_norm and min_lr must be >= 0".into());
        }
        for (g, lr) in &self.peak_lr_by_group {
            if !(lr.is_finite() && *lr >= 0.0) {
                problems.push(format!("peak lr for {g} must be finite and >= 0"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainingError::Schedule(problems.join("; ")))
        }
    }

    pub fn settings(&self, step: usize) -> StepSettings {
        StepSettings {
            step,
            lr_by_group: ParamGroup::ALL.iter().map(|&g| (g, lr_at_step(step, g, self))).collect(),
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }
}

/// Linear warmup over `floor(warmup_fraction * T)` steps, then cosine decay
/// to `min_lr` at `T`. Update `k` (0-based) runs at `lr_at_step(k)`.
pub fn lr_at_step(step: usize, group: ParamGroup, cfg: &ScheduleConfig) -> f64 {
    let peak = cfg.peak_lr_by_group.get(&group).copied().unwrap_or(0.0);
    let total = cfg.total_steps;
    let warmup = cfg.warmup_steps();
    let step = step.min(total);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    let floor = cfg.min_lr.min(peak);
    floor + (peak - floor) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Marks every token whose byte range intersects the target span. Tokens that
/// straddle the span boundary are included and logged.
pub fn make_loss_mask(ser: &TargetSerialization, tokens: &[Token]) -> Result<Vec<bool>, TrainingError> {
    let span = ser.target_span;
    if span.is_empty() {
        return Err(TrainingError::EmptyTarget(ser.full_text.clone()));
    }
    Ok(tokens
        .iter()
        .map(|t| {
            let hit = span.intersects(t.start, t.end);
            if hit && (t.start < span.start || t.end > span.end) {
                log::warn!(
                    "token [{}, {}) straddles the target span [{}, {}); including it",
                    t.start,
                    t.end,
                    span.start,
                    span.end
                );
            }
            hit
        })
        .collect())
}

/// Tokenizes a serialization into a training example.
pub fn to_train_example(
    id: &str,
    clip: FrameClip,
    ser: &TargetSerialization,
    tokenizer: &dyn Tokenizer,
) -> Result<TrainExample, TrainingError> {
    let tokens = tokenizer.encode(&ser.full_text);
    let loss_mask = make_loss_mask(ser, &tokens)?;
    Ok(TrainExample {
        id: id.to_string(),
        clip,
        token_ids: tokens.iter().map(|t| t.id).collect(),
        loss_mask,
    })
}

/// Stage-I examples, clips prepared from `frames`.
pub fn stage1_examples(
    dataset: &Stage1Dataset,
    manifest: &DatasetManifest,
    frames: &dyn FrameSource,
    fusion: &FusionConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<TrainExample>, TrainingError> {
    dataset
        .entries
        .iter()
        .map(|e| {
            let sample = manifest
                .get(&e.video_id)
                .ok_or_else(|| TrainingError::Missing(format!("video {:?} is not in the manifest", e.video_id)))?;
            let clip = fusion.prepare(frames, &sample.video)?;
            to_train_example(&e.video_id, clip, &e.serialization, tokenizer)
        })
        .collect()
}

/// Stage-II serialization: the classification prompt followed by the label.
pub fn label_serialization(cls: &ClassificationPromptSpec, label_index: usize) -> TargetSerialization {
    label_target(cls.surface(label_index)).with_prompt(cls.prompt(), PROMPT_JOINER)
}

/// Label-only examples for every sample of `split`.
pub fn stage2_examples(
    manifest: &DatasetManifest,
    split: Split,
    frames: &dyn FrameSource,
    fusion: &FusionConfig,
    cls: &ClassificationPromptSpec,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<TrainExample>, TrainingError> {
    manifest
        .split(split)
        .map(|s| {
            let clip = fusion.prepare(frames, &s.video)?;
            to_train_example(&s.video.id, clip, &label_serialization(cls, s.label_index), tokenizer)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    /// Caption pretraining of the toy base model.
    Pretrain,
    Rationale,
    Classify,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Pretrain => "pretrain",
            StageKind::Rationale => "rationale",
            StageKind::Classify => "classify",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRun {
    pub stage: StageKind,
    pub dataset_ref: String,
    pub source_tag: Option<String>,
    pub produced_tag: String,
    pub direct: bool,
    pub steps: Vec<TrainStepStats>,
    pub final_mean_loss: f64,
    pub shuffle_seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl StageRun {
    pub fn first_loss(&self) -> f64 {
        self.steps.first().map_or(f64::NAN, |s| s.loss)
    }

    pub fn last_loss(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.loss)
    }

    /// `step,loss,lr_<group>...,grad_norm_preclip,tokens_in_loss` rows.
    pub fn steps_csv(&self) -> String {
        let groups: Vec<&str> = ParamGroup::ALL.iter().map(|g| g.name()).collect();
        let mut out = format!(
            "step,loss,{},grad_norm_preclip,tokens_in_loss\n",
            groups.iter().map(|g| format!("lr_{g}")).collect::<Vec<_>>().join(",")
        );
        for s in &self.steps {
            let lrs: Vec<String> = groups
                .iter()
                .map(|g| format!("{:e}", s.lr_by_group.get(*g).copied().unwrap_or(0.0)))
                .collect();
            out.push_str(&format!(
                "{},{:.12},{},{:.12},{}\n",
                s.step,
                s.loss,
                lrs.join(","),
                s.grad_norm_preclip,
                s.tokens_in_loss
            ));
        }
        out
    }
}

/// Where a stage starts from and what it produces.
#[derive(Debug, Clone)]
pub struct StageSpec<'a> {
    pub stage: StageKind,
    pub tag: String,
    /// Metadata of the checkpoint currently loaded in the backend.
    pub source: Option<&'a CheckpointMeta>,
    pub direct: bool,
    /// Identifies the input dataset in the run record.
    pub dataset_ref: String,
}

/// Seeded example order for the whole stage, one shuffle per epoch.
pub fn batch_order(n: usize, epochs: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = Vec::with_capacity(n * epochs);
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        stream.extend(order);
    }
    stream.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn guard(spec: &StageSpec<'_>) -> Result<(), TrainingError> {
    if spec.stage != StageKind::Classify || spec.direct {
        return Ok(());
    }
    match spec.source {
        Some(meta) if meta.stage == StageKind::Rationale.name() => Ok(()),
        Some(meta) => Err(TrainingError::Refused(format!(
            "classification stage must start from a rationale-stage checkpoint, got {:?} ({}); run train-stage1 first or pass --direct for Direct-SFT",
            meta.tag, meta.stage
        ))),
        None => Err(TrainingError::Refused(
            "classification stage needs a rationale-stage checkpoint; run train-stage1 first or pass --direct for Direct-SFT".into(),
        )),
    }
}

/// Trains one stage over `examples` and, given a store, checkpoints the
/// result under `<root>/<stage>/<tag>/` with the step log beside it.
pub fn run_stage(
    spec: &StageSpec<'_>,
    schedule: &ScheduleConfig,
    backend: &mut dyn Backend,
    examples: &[TrainExample],
    store: Option<&CheckpointStore>,
) -> Result<StageRun, TrainingError> {
    if examples.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    guard(spec)?;
    let schedule = schedule.for_dataset(examples.len());
    schedule.validate()?;
    backend.begin_stage()?;
    let batches = batch_order(
        examples.len(),
        schedule.epochs_per_stage,
        schedule.global_batch,
        schedule.shuffle_seed,
    );
    debug_assert_eq!(batches.len(), schedule.total_steps);
    let mut steps = Vec::with_capacity(batches.len());
    for (step, idx) in batches.iter().enumerate() {
        let batch: Vec<TrainExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        let ids = || batch.iter().map(|e| e.id.clone()).collect::<Vec<_>>();
        let stats = match backend.train_step(&batch, &schedule.settings(step)) {
            Ok(s) => s,
            Err(BackendError::NonFiniteLoss(_)) => return Err(TrainingError::NonFinite { step, ids: ids() }),
            Err(e) => return Err(e.into()),
        };
        if !stats.loss.is_finite() {
            return Err(TrainingError::NonFinite { step, ids: ids() });
        }
        log::debug!("{} step {step}: loss {:.5}", spec.stage, stats.loss);
        steps.push(stats);
    }
    let tail = steps.len().div_ceil(10).max(1);
    let final_mean_loss = steps[steps.len() - tail..].iter().map(|s| s.loss).sum::<f64>() / tail as f64;
    let mut run = StageRun {
        stage: spec.stage,
        dataset_ref: spec.dataset_ref.clone(),
        source_tag: spec.source.map(|m| m.tag.clone()),
        produced_tag: spec.tag.clone(),
        direct: spec.direct,
        steps,
        final_mean_loss,
        shuffle_seed: schedule.shuffle_seed,
        checkpoint_dir: None,
    };
    if let Some(store) = store {
        let stage = spec.stage.name();
        store.save(&*backend, stage, &spec.tag, run.steps.len(), run.source_tag.clone(), spec.direct)?;
        let dir = store.dir(stage, &spec.tag);
        write_file(&dir.join("steps.csv"), run.steps_csv().as_bytes())?;
        let json = serde_json::to_string_pretty(&run).expect("run serializes");
        write_file(&dir.join("stage_run.json"), json.as_bytes())?;
        run.checkpoint_dir = Some(dir);
    }
    Ok(run)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TrainingError> {
    let err = |e: std::io::Error| TrainingError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut f = fs::File::create(path).map_err(err)?;
    f.write_all(bytes).map_err(err)
}

/// Stage-I then Stage-II from the Stage-I weights. Returns both runs.
pub fn run_rbft(
    backend: &mut dyn Backend,
    base: &CheckpointMeta,
    stage1: &[TrainExample],
    stage2: &[TrainExample],
    schedules: (&ScheduleConfig, &ScheduleConfig),
    tags: (&str, &str),
    store: &CheckpointStore,
) -> Result<(StageRun, StageRun), TrainingError> {
    if stage1.is_empty() {
        return Err(TrainingError::Missing(
            "Stage-1 dataset is empty or missing; run gen-rationales and build-stage1 first".into(),
        ));
    }
    let s1 = run_stage(
        &StageSpec {
            stage: StageKind::Rationale,
            tag: tags.0.into(),
            source: Some(base),
            direct: false,
            dataset_ref: "stage1".into(),
        },
        schedules.0,
        backend,
        stage1,
        Some(store),
    )?;
    let inter = CheckpointStore::read_meta(&store.dir(StageKind::Rationale.name(), tags.0))?;
    let s2 = run_stage(
        &StageSpec {
            stage: StageKind::Classify,
            tag: tags.1.into(),
            source: Some(&inter),
            direct: false,
            dataset_ref: "stage2".into(),
        },
        schedules.1,
        backend,
        stage2,
        Some(store),
    )?;
    Ok((s1, s2))
}

/// Label-only fine-tuning straight from the base checkpoint.
pub fn run_direct_sft(
    backend: &mut dyn Backend,
    base: &CheckpointMeta,
    examples: &[TrainExample],
    schedule: &ScheduleConfig,
    tag: &str,
    store: &CheckpointStore,
) -> Result<StageRun, TrainingError> {
    run_stage(
        &StageSpec {
            stage: StageKind::Classify,
            tag: tag.into(),
            source: Some(base),
            direct: true,
            dataset_ref: "stage2".into(),
        },
        schedule,
        backend,
        examples,
        Some(store),
    )
}
