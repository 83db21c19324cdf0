//! End-to-end comparison of RB-FT and Direct-SFT on synthetic scenes.
//!
//! A base model is pretrained once on captions from a daylight-only source
//! domain. Each seed then draws a smart-home benchmark, bootstraps rationales
//! from the base model, runs both methods from the same base weights with
//! equal classify-stage budgets, and evaluates them on original, object-masked
//! and randomly masked frames.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ablation::{
    attention_heatmap, masked_evaluation, write_heatmaps, AblationError, Condition, MaskSettings, Reduction,
};
use crate::backend::{Backend, BackendError, CheckpointMeta, CheckpointStore, GenerationParams, ParamGroup, TrainExample};
use crate::data::{save_rationales, CompositionMode, DataError, DatasetManifest, Split};
use crate::evaluation::{
    report_header, report_row, write_table, EvalError, EvalOptions, MetricsReport,
};
use crate::fusion::{FusionError, MemoryFrameSource};
use crate::prompts::{build_rationale_prompt, ClassificationPromptSpec, PromptError, RationalePromptSpec, DEFAULT_QUESTION};
use crate::rationale::{
    build_stage1_dataset, generate_rationales, mix_rationales, GenerationManifest, GenerationOptions, MixPolicy,
    RationaleError,
};
use crate::training::{
    run_direct_sft, run_stage, stage1_examples, stage2_examples, to_train_example, ScheduleConfig, StageKind,
    StageRun, StageSpec, TrainingError,
};

use super::backend::{make_toy_backend, ToyBackend};
use super::model::ToyModelConfig;
use super::scene::{gen_synthetic_dataset, SceneFamily, SyntheticDataset, FIXED_TIMESTAMP};

pub const METHOD_RBFT: &str = "rbft";
pub const METHOD_DIRECT: &str = "direct_sft";
const BASE_TAG: &str = "base";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Rationale(#[from] RationaleError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ablation(#[from] AblationError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid toybench config: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl ToString) -> ExperimentError {
    ExperimentError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBenchConfig {
    pub seeds: Vec<u64>,
    /// Seeds model initialization and the pretraining corpus.
    pub root_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub pretrain_scenes: usize,
    pub model: ToyModelConfig,
    pub pretrain: ScheduleConfig,
    pub stage1: ScheduleConfig,
    /// Shared by RB-FT Stage-II and Direct-SFT.
    pub stage2: ScheduleConfig,
    pub mode: CompositionMode,
    pub self_ratio: f64,
    pub rationale_max_tokens: usize,
    pub eval: EvalOptions,
    pub mask: MaskSettings,
    /// Test samples whose attention heatmaps are rendered per method.
    pub heatmap_samples: usize,
    /// Reuse this pretrained base instead of training one.
    pub base_checkpoint: Option<PathBuf>,
}

fn schedule(lr: f64, vision_lr: f64, epochs: usize) -> ScheduleConfig {
    ScheduleConfig {
        peak_lr_by_group: BTreeMap::from([(ParamGroup::LanguageAndMerger, lr), (ParamGroup::VisionTower, vision_lr)]),
        epochs_per_stage: epochs,
        weight_decay: 0.01,
        warmup_fraction: 0.05,
        ..ScheduleConfig::default()
    }
}

impl Default for ToyBenchConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            root_seed: 0,
            n_train: 64,
            n_test: 32,
            pretrain_scenes: 256,
            model: ToyModelConfig {
                d: 64,
                layers: 2,
                ..ToyModelConfig::default()
            },
            pretrain: schedule(3e-3, 3e-3, 50),
            stage1: schedule(5e-4, 5e-4, 12),
            stage2: schedule(3e-3, 3e-3, 40),
            mode: CompositionMode::PR,
            self_ratio: 1.0,
            rationale_max_tokens: 120,
            eval: EvalOptions {
                max_new_tokens: 4,
                ..EvalOptions::default()
            },
            mask: MaskSettings::default(),
            heatmap_samples: 4,
            base_checkpoint: None,
        }
    }
}

impl ToyBenchConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let mut problems = Vec::new();
        if self.seeds.is_empty() {
            problems.push("at least one seed is required".to_string());
        }
        if self.n_train == 0 || self.n_test == 0 || self.pretrain_scenes == 0 {
            problems.push("n_train, n_test and pretrain_scenes must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.self_ratio) {
            problems.push(format!("self_ratio {} outside [0, 1]", self.self_ratio));
        }
        if let Err(e) = self.model.validate() {
            problems.push(e.to_string());
        }
        for (name, s) in [("pretrain", &self.pretrain), ("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if let Err(e) = s.for_dataset(1).validate() {
                problems.push(format!("{name}: {e}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ExperimentError::Config(problems.join("; ")))
        }
    }
}

/// Everything measured for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub stage1: StageRun,
    pub stage2: StageRun,
    pub direct: StageRun,
    pub reports: Vec<MetricsReport>,
    /// Mean rationale loss on held-out self-rationales.
    pub heldout_loss_before: f64,
    pub heldout_loss_after: f64,
    pub generation: GenerationManifest,
    pub rationale_file: PathBuf,
    pub heatmaps: Vec<PathBuf>,
}

impl SeedResult {
    pub fn accuracy(&self, method: &str, condition: Condition) -> Option<f64> {
        self.reports
            .iter()
            .find(|r| r.method == method && r.condition == condition.name())
            .map(|r| r.accuracy)
    }

    /// `(object_gap, random_gap)`: accuracy lost under each masking.
    pub fn gaps(&self, method: &str) -> Option<(f64, f64)> {
        let o = self.accuracy(method, Condition::Original)?;
        Some((
            o - self.accuracy(method, Condition::Object)?,
            o - self.accuracy(method, Condition::Random)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBenchResult {
    pub seeds: Vec<SeedResult>,
    pub base_checkpoint: PathBuf,
    pub runs_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub gaps_csv: PathBuf,
    pub training_csv: PathBuf,
    pub pretrain: Option<StageRun>,
    pub elapsed_s: f64,
}

impl ToyBenchResult {
    /// Mean `(object_gap, random_gap)` over seeds.
    pub fn mean_gaps(&self, method: &str) -> Option<(f64, f64)> {
        let gaps: Vec<(f64, f64)> = self.seeds.iter().map(|s| s.gaps(method)).collect::<Option<_>>()?;
        let n = gaps.len() as f64;
        Some((gaps.iter().map(|g| g.0).sum::<f64>() / n, gaps.iter().map(|g| g.1).sum::<f64>() / n))
    }
}

pub fn classification_spec(manifest: &DatasetManifest) -> Result<ClassificationPromptSpec, PromptError> {
    ClassificationPromptSpec::for_labels(&manifest.label_space, DEFAULT_QUESTION)
}

pub fn rationale_prompt() -> String {
    build_rationale_prompt(&RationalePromptSpec::default(), "")
}

pub fn rationale_prompt_id() -> String {
    RationalePromptSpec::default().prompt_id()
}

/// Rationale-prompt examples whose target is each sample's given text.
pub fn rationale_examples(
    manifest: &DatasetManifest,
    texts: &[(String, String)],
    frames: &MemoryFrameSource,
    backend: &ToyBackend,
) -> Result<Vec<TrainExample>, ExperimentError> {
    let prompt = rationale_prompt();
    let fusion = &backend.model().config().fusion;
    texts
        .iter()
        .map(|(id, text)| {
            let sample = manifest
                .get(id)
                .ok_or_else(|| ExperimentError::Invariant(format!("rationale for unknown video {id:?}")))?;
            let clip = fusion.prepare(frames, &sample.video)?;
            let ser = crate::prompts::serialize_target(CompositionMode::PR, text, "", " ")?
                .with_prompt(&prompt, crate::rationale::PROMPT_JOINER);
            Ok(to_train_example(id, clip, &ser, backend.toy_tokenizer())?)
        })
        .collect()
}

/// Source-domain corpus for the base model.
pub fn pretrain_dataset(cfg: &ToyBenchConfig) -> SyntheticDataset {
    gen_synthetic_dataset(cfg.pretrain_scenes, 1, cfg.root_seed ^ 0x5eed_0000, &SceneFamily::daylight_source())
}

/// Trains the base model on source-domain captions and stores it under
/// `<store>/pretrain/base`.
pub fn pretrain_base(cfg: &ToyBenchConfig, store: &CheckpointStore) -> Result<(ToyBackend, StageRun), ExperimentError> {
    let mut backend = make_toy_backend(cfg.model.clone(), cfg.root_seed)?;
    let source = pretrain_dataset(cfg);
    let texts: Vec<(String, String)> = source
        .ground_truth
        .iter()
        .filter(|r| source.manifest.get(&r.video_id).is_some_and(|s| s.split == Split::Train))
        .map(|r| (r.video_id.clone(), r.rationale_text.clone()))
        .collect();
    let examples = rationale_examples(&source.manifest, &texts, &source.frames, &backend)?;
    let run = run_stage(
        &StageSpec {
            stage: StageKind::Pretrain,
            tag: BASE_TAG.into(),
            source: None,
            direct: false,
            dataset_ref: source.manifest.name.clone(),
        },
        &cfg.pretrain,
        &mut backend,
        &examples,
        Some(store),
    )?;
    Ok((backend, run))
}

fn load_base(cfg: &ToyBenchConfig, dir: &Path) -> Result<(ToyBackend, CheckpointMeta), ExperimentError> {
    let mut backend = make_toy_backend(cfg.model.clone(), cfg.root_seed)?;
    let loaded = CheckpointStore::load_dir(&mut backend, dir)?;
    if !loaded.differing_keys.is_empty() {
        return Err(ExperimentError::Config(format!(
            "base checkpoint {} was trained with different settings: {}",
            dir.display(),
            loaded.differing_keys.join(", ")
        )));
    }
    Ok((backend, loaded.meta))
}

/// Writes the per-seed dataset and, unless one is supplied, pretrains the
/// base model. Returns the base checkpoint directory.
pub fn prepare_base(
    cfg: &ToyBenchConfig,
    out: &Path,
) -> Result<(PathBuf, Option<StageRun>), ExperimentError> {
    if let Some(dir) = &cfg.base_checkpoint {
        load_base(cfg, dir)?;
        return Ok((dir.clone(), None));
    }
    let store = CheckpointStore::new(out.join("checkpoints"));
    let (_, run) = pretrain_base(cfg, &store)?;
    Ok((store.dir(StageKind::Pretrain.name(), BASE_TAG), Some(run)))
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub fn seed_dataset(cfg: &ToyBenchConfig, seed: u64) -> SyntheticDataset {
    gen_synthetic_dataset(cfg.n_train, cfg.n_test, seed, &SceneFamily::smart_home())
}

fn self_rationales(
    data: &SyntheticDataset,
    backend: &ToyBackend,
    cfg: &ToyBenchConfig,
    split: Split,
    cache: &Path,
) -> Result<crate::rationale::GenerationRun, ExperimentError> {
    Ok(generate_rationales(
        &data.manifest,
        &data.frames,
        &backend.model().config().fusion,
        &rationale_prompt(),
        &rationale_prompt_id(),
        backend,
        &GenerationParams::greedy(cfg.rationale_max_tokens),
        &GenerationOptions {
            cache_dir: Some(cache.to_path_buf()),
            created_at: Some(FIXED_TIMESTAMP.into()),
            split,
            ..GenerationOptions::default()
        },
    )?)
}

fn evaluate_method(
    backend: &ToyBackend,
    data: &SyntheticDataset,
    cfg: &ToyBenchConfig,
    seed: u64,
    method: &str,
    run_dir: &Path,
) -> Result<(Vec<MetricsReport>, Vec<PathBuf>), ExperimentError> {
    let cls = classification_spec(&data.manifest)?;
    let fusion = &backend.model().config().fusion;
    let mask = MaskSettings {
        seed,
        ..cfg.mask.clone()
    };
    let model = {
        let c = backend.model().config();
        format!("toy-d{}-l{}-h{}", c.d, c.layers, c.heads)
    };
    let mut reports = Vec::new();
    for condition in Condition::ALL {
        let eval = masked_evaluation(backend, &data.manifest, &data.frames, fusion, &cls, condition, &mask, &cfg.eval)?;
        let json = serde_json::to_string_pretty(&eval.predictions).expect("predictions serialize");
        let path = run_dir.join(format!("predictions_{}.json", condition.name()));
        fs::write(&path, json).map_err(|e| io_err(&path, e))?;
        reports.push(MetricsReport::from_matrix(
            &eval.matrix,
            data.manifest.label_space.names(),
            &data.manifest.name,
            &model,
            method,
            condition.name(),
            &format!("seed{seed}"),
        )?);
    }
    let mut heatmaps = Vec::new();
    let attn = run_dir.join("attn");
    for sample in data.manifest.split(Split::Test).take(cfg.heatmap_samples) {
        let clip = fusion.prepare(&data.frames, &sample.video)?;
        let capture = backend.capture_attention(&clip, cls.prompt())?;
        let grid = backend.model().patches(&clip)?.grid;
        let map = attention_heatmap(&capture, &grid, Reduction::default())?;
        heatmaps.extend(write_heatmaps(&attn, &sample.video.id, &clip, &map, fusion.temporal_span)?);
    }
    Ok((reports, heatmaps))
}

/// One seed: data, rationales, both methods, evaluation and heatmaps.
pub fn run_seed(
    cfg: &ToyBenchConfig,
    seed: u64,
    base_dir: &Path,
    out: &Path,
) -> Result<SeedResult, ExperimentError> {
    let dir = seed_dir(out, seed);
    let data = seed_dataset(cfg, seed);
    data.write(&dir.join("dataset"))?;
    let (mut backend, base_meta) = load_base(cfg, base_dir)?;

    let cache = dir.join("rationale_cache");
    let train = self_rationales(&data, &backend, cfg, Split::Train, &cache)?;
    let heldout = self_rationales(&data, &backend, cfg, Split::Test, &cache)?;
    let rationale_file = dir.join("rationales.jsonl");
    save_rationales(&train.records, &rationale_file)?;
    save_rationales(&heldout.records, &dir.join("heldout_rationales.jsonl"))?;
    train.manifest.save(&dir.join("generation_manifest.json"))?;

    let train_ids: Vec<String> = data.manifest.split(Split::Train).map(|s| s.video.id.clone()).collect();
    let policy = MixPolicy {
        self_ratio: cfg.self_ratio,
        seed,
        ground_truth_source: None,
    };
    let assignment = mix_rationales(&train_ids, &train.records, Some(&data.ground_truth), &policy)?;
    let cls = classification_spec(&data.manifest)?;
    let stage1_data = build_stage1_dataset(
        &data.manifest,
        &assignment,
        cfg.mode,
        &rationale_prompt(),
        &cls,
        &train.manifest.config_hash,
    )?;
    stage1_data.save(&dir.join("stage1.json"))?;

    let fusion = backend.model().config().fusion.clone();
    let tokenizer = backend.toy_tokenizer().clone();
    let stage1 = stage1_examples(&stage1_data, &data.manifest, &data.frames, &fusion, &tokenizer)?;
    let stage2 = stage2_examples(&data.manifest, Split::Train, &data.frames, &fusion, &cls, &tokenizer)?;
    let heldout_texts: Vec<(String, String)> = heldout
        .records
        .iter()
        .map(|r| (r.video_id.clone(), r.rationale_text.clone()))
        .collect();
    let heldout_examples = rationale_examples(&data.manifest, &heldout_texts, &data.frames, &backend)?;

    let store = CheckpointStore::new(dir.join("checkpoints"));
    let heldout_loss_before = backend.eval_loss(&heldout_examples)?;
    let s1 = run_stage(
        &StageSpec {
            stage: StageKind::Rationale,
            tag: METHOD_RBFT.into(),
            source: Some(&base_meta),
            direct: false,
            dataset_ref: "stage1.json".into(),
        },
        &cfg.stage1,
        &mut backend,
        &stage1,
        Some(&store),
    )?;
    let heldout_loss_after = backend.eval_loss(&heldout_examples)?;
    let inter = CheckpointStore::read_meta(&store.dir(StageKind::Rationale.name(), METHOD_RBFT))?;
    let s2 = run_stage(
        &StageSpec {
            stage: StageKind::Classify,
            tag: METHOD_RBFT.into(),
            source: Some(&inter),
            direct: false,
            dataset_ref: "manifest.jsonl".into(),
        },
        &cfg.stage2,
        &mut backend,
        &stage2,
        Some(&store),
    )?;
    let rbft_dir = dir.join(METHOD_RBFT);
    fs::create_dir_all(&rbft_dir).map_err(|e| io_err(&rbft_dir, e))?;
    let (mut reports, mut heatmaps) = evaluate_method(&backend, &data, cfg, seed, METHOD_RBFT, &rbft_dir)?;

    let (mut backend, base_meta) = load_base(cfg, base_dir)?;
    let direct = run_direct_sft(&mut backend, &base_meta, &stage2, &cfg.stage2, METHOD_DIRECT, &store)?;
    if direct.steps.len() != s2.steps.len() {
        return Err(ExperimentError::Invariant(format!(
            "Direct-SFT ran {} classify steps but RB-FT Stage-II ran {}",
            direct.steps.len(),
            s2.steps.len()
        )));
    }
    let direct_dir = dir.join(METHOD_DIRECT);
    fs::create_dir_all(&direct_dir).map_err(|e| io_err(&direct_dir, e))?;
    let (r, h) = evaluate_method(&backend, &data, cfg, seed, METHOD_DIRECT, &direct_dir)?;
    reports.extend(r);
    heatmaps.extend(h);

    Ok(SeedResult {
        seed,
        dir,
        stage1: s1,
        stage2: s2,
        direct,
        reports,
        heldout_loss_before,
        heldout_loss_after,
        generation: train.manifest,
        rationale_file,
        heatmaps,
    })
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn f(x: f64) -> String {
    format!("{x:.4}")
}

fn write_outputs(results: &[SeedResult], out: &Path) -> Result<[PathBuf; 4], ExperimentError> {
    let classes: Vec<String> = results
        .first()
        .and_then(|r| r.reports.first())
        .map(|r| r.class_names.clone())
        .unwrap_or_default();

    let mut header = report_header(&classes);
    header.extend(["seed".to_string(), "stage1_steps".to_string()]);
    let mut rows = Vec::new();
    for r in results {
        let mut reports: Vec<&MetricsReport> = r.reports.iter().collect();
        reports.sort_by(|a, b| (&a.method, &a.condition).cmp(&(&b.method, &b.condition)));
        for rep in reports {
            let mut row = report_row(rep);
            let s1 = if rep.method == METHOD_RBFT { r.stage1.steps.len() } else { 0 };
            row.extend([r.seed.to_string(), s1.to_string()]);
            rows.push(row);
        }
    }
    let runs = out.join("toybench_runs.csv");
    write_table(&header, &rows, &runs)?;

    let mut header = vec!["method".to_string(), "condition".into(), "n_seeds".into(), "accuracy_mean".into(), "accuracy_sd".into()];
    for c in &classes {
        header.extend([format!("f1_{c}_mean"), format!("f1_{c}_sd")]);
    }
    let mut rows = Vec::new();
    for method in [METHOD_DIRECT, METHOD_RBFT] {
        for condition in Condition::ALL {
            let picked: Vec<&MetricsReport> = results
                .iter()
                .flat_map(|r| &r.reports)
                .filter(|r| r.method == method && r.condition == condition.name())
                .collect();
            if picked.is_empty() {
                continue;
            }
            let (m, s) = mean_sd(&picked.iter().map(|r| r.accuracy).collect::<Vec<_>>());
            let mut row = vec![method.to_string(), condition.name().into(), picked.len().to_string(), f(m), f(s)];
            for k in 0..classes.len() {
                let (m, s) = mean_sd(&picked.iter().map(|r| r.f1_per_class[k]).collect::<Vec<_>>());
                row.extend([f(m), f(s)]);
            }
            rows.push(row);
        }
    }
    let summary = out.join("toybench_summary.csv");
    write_table(&header, &rows, &summary)?;

    let header: Vec<String> = ["seed", "method", "acc_original", "acc_object", "acc_random", "object_gap", "random_gap"]
        .map(String::from)
        .to_vec();
    let mut rows = Vec::new();
    for method in [METHOD_DIRECT, METHOD_RBFT] {
        let mut cols: [Vec<f64>; 5] = Default::default();
        for r in results {
            let acc = |c| r.accuracy(method, c).unwrap_or(f64::NAN);
            let vals = [
                acc(Condition::Original),
                acc(Condition::Object),
                acc(Condition::Random),
                acc(Condition::Original) - acc(Condition::Object),
                acc(Condition::Original) - acc(Condition::Random),
            ];
            vals.iter().zip(cols.iter_mut()).for_each(|(v, c)| c.push(*v));
            let mut row = vec![r.seed.to_string(), method.to_string()];
            row.extend(vals.map(f));
            rows.push(row);
        }
        let mut row = vec!["mean".to_string(), method.to_string()];
        row.extend(cols.iter().map(|c| f(mean_sd(c).0)));
        rows.push(row);
    }
    let gaps = out.join("toybench_gaps.csv");
    write_table(&header, &rows, &gaps)?;

    let header: Vec<String> = [
        "seed",
        "stage1_steps",
        "stage1_loss_first",
        "stage1_loss_last",
        "stage2_steps",
        "stage2_loss_first",
        "stage2_loss_last",
        "direct_steps",
        "direct_loss_first",
        "direct_loss_last",
        "heldout_rationale_loss_before",
        "heldout_rationale_loss_after",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                r.stage1.steps.len().to_string(),
                f(r.stage1.first_loss()),
                f(r.stage1.last_loss()),
                r.stage2.steps.len().to_string(),
                f(r.stage2.first_loss()),
                f(r.stage2.last_loss()),
                r.direct.steps.len().to_string(),
                f(r.direct.first_loss()),
                f(r.direct.last_loss()),
                f(r.heldout_loss_before),
                f(r.heldout_loss_after),
            ]
        })
        .collect();
    let training = out.join("toybench_training.csv");
    write_table(&header, &rows, &training)?;
    Ok([runs, summary, gaps, training])
}

/// Runs every seed and writes the comparison tables under `out`.
pub fn run_toy_experiment(cfg: &ToyBenchConfig, out: &Path) -> Result<ToyBenchResult, ExperimentError> {
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let config_json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(out.join("toybench_config.json"), config_json).map_err(|e| io_err(out, e))?;
    let (base_dir, pretrain) = prepare_base(cfg, out)?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let t = Instant::now();
        let r = run_seed(cfg, seed, &base_dir, out)?;
        log::info!(
            "seed {seed}: {:.0}s, stage1 {:.3}->{:.3}, stage2 {:.3}->{:.3}",
            t.elapsed().as_secs_f64(),
            r.stage1.first_loss(),
            r.stage1.last_loss(),
            r.stage2.first_loss(),
            r.stage2.last_loss()
        );
        seeds.push(r);
    }
    let [runs_csv, summary_csv, gaps_csv, training_csv] = write_outputs(&seeds, out)?;
    let result = ToyBenchResult {
        seeds,
        base_checkpoint: base_dir,
        runs_csv,
        summary_csv,
        gaps_csv,
        training_csv,
        pretrain,
        elapsed_s: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&result).expect("result serializes");
    let path = out.join("toybench_result.json");
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(result)
}
