//! One function per subcommand. Each returns the artifact paths it wrote.
//!
//! Layout under `run.output_root`:
//! `rationales/`, `stage1/`, `checkpoints/<stage>/<tag>/`, `reports/`,
//! `attn/`, `toybench/` and `manifests/<command>.{cfg,json}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rbft_core::ablation::{attention_heatmap, masked_evaluation, write_heatmaps, Condition};
use rbft_core::backend::remote::{RemoteBackend, RemoteConfig};
use rbft_core::backend::{digest_bytes, Backend, CheckpointMeta, CheckpointStore};
use rbft_core::data::{load_manifest, load_rationales, save_rationales, DatasetManifest, Split};
use rbft_core::evaluation::{emit_report, MetricsReport};
use rbft_core::fusion::{patchify, DirFrameSource};
use rbft_core::prompts::{build_rationale_prompt, short_hash, ClassificationPromptSpec, RationalePromptSpec};
use rbft_core::rationale::{
    build_stage1_dataset, generate_rationales, mix_rationales, GenerationOptions, MixPolicy, Stage1Dataset,
};
use rbft_core::toy::experiment::{run_toy_experiment, seed_dataset, seed_dir};
use rbft_core::toy::make_toy_backend;
use rbft_core::training::{run_direct_sft, run_stage, stage1_examples, stage2_examples, StageKind, StageSpec};

use crate::config::RunConfig;
use crate::error::CliError;

/// Everything a subcommand needs besides its own flags.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Self {
        let out = cfg.output_root();
        Self { cfg, out }
    }

    fn store(&self) -> CheckpointStore {
        CheckpointStore::new(self.out.join("checkpoints"))
    }

    fn rationale_file(&self, split: Split) -> PathBuf {
        self.out.join("rationales").join(format!("{split}.jsonl"))
    }

    fn stage1_file(&self) -> PathBuf {
        self.out.join("stage1").join("stage1.jsonl")
    }

    fn manifest(&self) -> Result<(DatasetManifest, DirFrameSource)> {
        let path = self
            .cfg
            .path("data.manifest")
            .ok_or_else(|| CliError::Config(vec!["data.manifest: required by this command".into()]))?;
        if !path.is_file() {
            return Err(CliError::Missing(format!("dataset manifest {} does not exist", path.display())).into());
        }
        let manifest = load_manifest(&path)?;
        let root = self
            .cfg
            .path("data.frames_root")
            .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
        Ok((manifest, DirFrameSource::new(root)))
    }

    fn cls(&self, manifest: &DatasetManifest) -> Result<ClassificationPromptSpec> {
        Ok(ClassificationPromptSpec::for_labels(&manifest.label_space, self.cfg.get("prompts.question"))?)
    }

    fn rationale_prompt(&self) -> Result<(String, String)> {
        let mut spec = match (self.cfg.path("prompts.template"), self.cfg.path("prompts.dimensions")) {
            (None, None) => RationalePromptSpec::default(),
            (t, d) => {
                let def = RationalePromptSpec::default();
                let template = match t {
                    Some(p) => read_text(&p)?,
                    None => def.template.clone(),
                };
                let dims = match d {
                    Some(p) => read_text(&p)?,
                    None => rbft_core::prompts::DEFAULT_DIMENSIONS.to_string(),
                };
                RationalePromptSpec::parse(&template, &dims)?
            }
        };
        let persona = self.cfg.get("prompts.persona");
        if !persona.is_empty() {
            spec = spec.with_persona(persona);
        }
        let prompt = build_rationale_prompt(&spec, self.cfg.get("prompts.domain_context"));
        let id = short_hash(&prompt);
        Ok((prompt, id))
    }

    /// Backend with weights from `checkpoint`, or freshly initialized from the root seed.
    fn backend(&self, checkpoint: Option<&Path>) -> Result<(Box<dyn Backend>, Option<CheckpointMeta>)> {
        if self.cfg.is_remote() {
            if checkpoint.is_some() {
                return Err(CliError::Config(vec!["backend.checkpoint: remote backends hold their own weights".into()]).into());
            }
            let remote = RemoteBackend::new(RemoteConfig {
                base_url: self.cfg.get("remote.base_url").into(),
                model: self.cfg.get("remote.model").into(),
                timeout_s: self.cfg.usize("remote.timeout_s") as u64,
            });
            return Ok((Box::new(remote), None));
        }
        let mut backend = make_toy_backend(self.cfg.toy_model(), self.cfg.root_seed())?;
        let meta = match checkpoint {
            Some(dir) => {
                if !dir.join("meta.json").is_file() {
                    return Err(CliError::Missing(format!("no checkpoint at {}", dir.display())).into());
                }
                let loaded = CheckpointStore::load_dir(&mut backend, dir)?;
                if !loaded.differing_keys.is_empty() {
                    log::warn!(
                        "checkpoint {} was saved under different settings: {}",
                        dir.display(),
                        loaded.differing_keys.join(", ")
                    );
                }
                Some(loaded.meta)
            }
            None => None,
        };
        Ok((Box::new(backend), meta))
    }

    /// The configured base model; without `backend.checkpoint` the seeded
    /// initialization is saved once so every method starts from the same record.
    fn base(&self) -> Result<(Box<dyn Backend>, CheckpointMeta, PathBuf)> {
        let dir = match self.cfg.path("backend.checkpoint") {
            Some(d) => d,
            None => {
                let store = self.store();
                let tag = format!("seed{}", self.cfg.root_seed());
                let dir = store.dir("init", &tag);
                if !store.exists("init", &tag) {
                    let (backend, _) = self.backend(None)?;
                    store.save(backend.as_ref(), "init", &tag, 0, None, false)?;
                }
                dir
            }
        };
        let (backend, meta) = self.backend(Some(&dir))?;
        Ok((backend, meta.expect("loaded checkpoint has metadata"), dir))
    }

    fn classify_checkpoint(&self) -> PathBuf {
        self.cfg
            .path("eval.checkpoint")
            .unwrap_or_else(|| self.store().dir(StageKind::Classify.name(), self.cfg.get("stage1.tag")))
    }

    /// Writes `manifests/<command>.cfg` (the resolved config) and a JSON
    /// record of input digests and outputs.
    pub fn persist(&self, command: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
        let dir = self.out.join("manifests");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let cfg_path = dir.join(format!("{command}.cfg"));
        fs::write(&cfg_path, self.cfg.render()).with_context(|| format!("writing {}", cfg_path.display()))?;
        let digests: BTreeMap<String, String> = inputs
            .iter()
            .filter(|p| p.is_file())
            .map(|p| Ok((p.display().to_string(), digest_bytes(&fs::read(p)?))))
            .collect::<std::io::Result<_>>()?;
        let record = serde_json::json!({
            "command": command,
            "config": cfg_path.file_name().map(|n| n.to_string_lossy().to_string()),
            "root_seed": self.cfg.root_seed(),
            "inputs": digests,
            "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        });
        let json_path = dir.join(format!("{command}.json"));
        fs::write(&json_path, serde_json::to_string_pretty(&record)?)?;
        Ok(vec![cfg_path, json_path])
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())).into())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{what} not found at {}; run `rbft {producer}` first", path.display())).into())
    }
}

pub fn gen_rationales(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let (manifest, frames) = ctx.manifest()?;
    let (backend, _) = ctx.backend(ctx.cfg.path("backend.checkpoint").as_deref())?;
    let (prompt, prompt_id) = ctx.rationale_prompt()?;
    let split = ctx.cfg.split();
    let run = generate_rationales(
        &manifest,
        &frames,
        &ctx.cfg.fusion(),
        &prompt,
        &prompt_id,
        backend.as_ref(),
        &ctx.cfg.generation(),
        &GenerationOptions {
            cache_dir: ctx.cfg.path("generation.cache_dir"),
            retries: ctx.cfg.usize("generation.retries"),
            workers: ctx.cfg.usize("generation.workers"),
            created_at: None,
            split,
        },
    )?;
    let file = ctx.rationale_file(split);
    ensure_parent(&file)?;
    save_rationales(&run.records, &file)?;
    let run_manifest = file.with_file_name(format!("generation_manifest_{split}.json"));
    run.manifest.save(&run_manifest)?;
    Ok(vec![file, run_manifest])
}

pub fn build_stage1(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let (manifest, _) = ctx.manifest()?;
    let rationale_file = ctx.rationale_file(Split::Train);
    require(&rationale_file, "self-generated rationales", "gen-rationales")?;
    let records = load_rationales(&rationale_file)?;
    let q = ctx.cfg.f64("stage1.self_ratio");
    let gt_path = ctx.cfg.path("data.ground_truth");
    let ground_truth = match (&gt_path, q < 1.0) {
        (Some(p), true) => {
            require(p, "ground-truth rationales", "gen-rationales")?;
            Some(load_rationales(p)?)
        }
        (None, true) => {
            return Err(CliError::Config(vec![format!("data.ground_truth: required when stage1.self_ratio = {q} < 1")]).into())
        }
        _ => None,
    };
    let policy = MixPolicy {
        self_ratio: q,
        seed: ctx.cfg.root_seed(),
        ground_truth_source: if q < 1.0 { gt_path.clone() } else { None },
    };
    policy.validate()?;
    let train_ids: Vec<String> = manifest.split(Split::Train).map(|s| s.video.id.clone()).collect();
    let assignment = mix_rationales(&train_ids, &records, ground_truth.as_deref(), &policy)?;
    let (prompt, _) = ctx.rationale_prompt()?;
    let generation_hash = digest_bytes(&fs::read(&rationale_file)?);
    let dataset = build_stage1_dataset(
        &manifest,
        &assignment,
        ctx.cfg.mode(),
        &prompt,
        &ctx.cls(&manifest)?,
        &generation_hash,
    )?;
    let file = ctx.stage1_file();
    ensure_parent(&file)?;
    dataset.save(&file)?;
    let assignment_file = file.with_file_name("assignment.json");
    fs::write(&assignment_file, serde_json::to_string_pretty(&assignment)?)?;
    Ok(vec![file, assignment_file])
}

pub fn train_stage1(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let stage1_file = ctx.stage1_file();
    require(&stage1_file, "Stage-I dataset", "build-stage1")?;
    let dataset = Stage1Dataset::load(&stage1_file)?;
    let (manifest, frames) = ctx.manifest()?;
    let (mut backend, base_meta, _) = ctx.base()?;
    let tokenizer = backend.tokenizer().ok_or(rbft_core::training::TrainingError::NoTokenizer)?;
    let examples = stage1_examples(&dataset, &manifest, &frames, &ctx.cfg.fusion(), tokenizer)?;
    let store = ctx.store();
    let tag = ctx.cfg.get("stage1.tag");
    run_stage(
        &StageSpec {
            stage: StageKind::Rationale,
            tag: tag.into(),
            source: Some(&base_meta),
            direct: false,
            dataset_ref: stage1_file.display().to_string(),
        },
        &ctx.cfg.schedule("stage1"),
        backend.as_mut(),
        &examples,
        Some(&store),
    )?;
    Ok(vec![store.dir(StageKind::Rationale.name(), tag)])
}

pub fn train_stage2(ctx: &Ctx, direct: bool) -> Result<Vec<PathBuf>> {
    if direct {
        return train_direct(ctx);
    }
    let store = ctx.store();
    let tag = ctx.cfg.get("stage1.tag");
    let inter = store.dir(StageKind::Rationale.name(), tag);
    if !store.exists(StageKind::Rationale.name(), tag) {
        return Err(CliError::Missing(format!(
            "no Stage-I checkpoint at {}; run `rbft train-stage1` first, or pass --direct for Direct-SFT",
            inter.display()
        ))
        .into());
    }
    let (manifest, frames) = ctx.manifest()?;
    let (mut backend, meta) = ctx.backend(Some(&inter))?;
    let meta = meta.expect("loaded checkpoint has metadata");
    let cls = ctx.cls(&manifest)?;
    let tokenizer = backend.tokenizer().ok_or(rbft_core::training::TrainingError::NoTokenizer)?;
    let examples = stage2_examples(&manifest, Split::Train, &frames, &ctx.cfg.fusion(), &cls, tokenizer)?;
    run_stage(
        &StageSpec {
            stage: StageKind::Classify,
            tag: tag.into(),
            source: Some(&meta),
            direct: false,
            dataset_ref: ctx.cfg.get("data.manifest").into(),
        },
        &ctx.cfg.schedule("stage2"),
        backend.as_mut(),
        &examples,
        Some(&store),
    )?;
    Ok(vec![store.dir(StageKind::Classify.name(), tag)])
}

pub fn train_direct(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let (manifest, frames) = ctx.manifest()?;
    let (mut backend, base_meta, _) = ctx.base()?;
    let cls = ctx.cls(&manifest)?;
    let tokenizer = backend.tokenizer().ok_or(rbft_core::training::TrainingError::NoTokenizer)?;
    let examples = stage2_examples(&manifest, Split::Train, &frames, &ctx.cfg.fusion(), &cls, tokenizer)?;
    let store = ctx.store();
    let tag = ctx.cfg.get("direct.tag");
    run_direct_sft(backend.as_mut(), &base_meta, &examples, &ctx.cfg.schedule("stage2"), tag, &store)?;
    Ok(vec![store.dir(StageKind::Classify.name(), tag)])
}

/// Evaluates the classifier under each condition and writes one report per condition.
fn evaluate_conditions(ctx: &Ctx, conditions: &[Condition]) -> Result<(Vec<MetricsReport>, Vec<PathBuf>)> {
    let (manifest, frames) = ctx.manifest()?;
    let checkpoint = ctx.classify_checkpoint();
    require(&checkpoint.join("meta.json"), "classifier checkpoint", "train-stage2")?;
    let (backend, meta) = ctx.backend(Some(&checkpoint))?;
    let method = meta.map(|m| m.tag).unwrap_or_else(|| ctx.cfg.get("stage1.tag").into());
    let cls = ctx.cls(&manifest)?;
    let reports_dir = ctx.out.join("reports");
    fs::create_dir_all(&reports_dir)?;
    let model = ctx.cfg.toy_model();
    let model_name = if ctx.cfg.is_remote() {
        ctx.cfg.get("remote.model").to_string()
    } else {
        format!("toy-d{}-l{}-h{}", model.d, model.layers, model.heads)
    };
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    for &condition in conditions {
        let eval = masked_evaluation(
            backend.as_ref(),
            &manifest,
            &frames,
            &ctx.cfg.fusion(),
            &cls,
            condition,
            &ctx.cfg.mask(),
            &ctx.cfg.eval_options(),
        )?;
        let report = MetricsReport::from_matrix(
            &eval.matrix,
            manifest.label_space.names(),
            &manifest.name,
            &model_name,
            &method,
            condition.name(),
            &format!("seed{}", ctx.cfg.root_seed()),
        )?;
        let stem = format!("{method}_{}", condition.name());
        let json = reports_dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(&report)?)?;
        let predictions = reports_dir.join(format!("{stem}_predictions.json"));
        fs::write(&predictions, serde_json::to_string_pretty(&eval.predictions)?)?;
        outputs.extend([json, predictions]);
        reports.push(report);
    }
    Ok((reports, outputs))
}

pub fn evaluate(ctx: &Ctx, condition: Condition) -> Result<Vec<PathBuf>> {
    let (reports, mut outputs) = evaluate_conditions(ctx, &[condition])?;
    let table = ctx.out.join("reports").join(format!("{}_{}.csv", reports[0].method, condition.name()));
    emit_report(&reports, &table)?;
    outputs.insert(0, table);
    Ok(outputs)
}

pub fn ablate_mask(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let (reports, mut outputs) = evaluate_conditions(ctx, &Condition::ALL)?;
    let table = ctx.out.join("reports").join(format!("ablation_{}.csv", reports[0].method));
    emit_report(&reports, &table)?;
    outputs.insert(0, table);
    Ok(outputs)
}

pub fn attn_map(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let (manifest, frames) = ctx.manifest()?;
    let checkpoint = ctx.classify_checkpoint();
    require(&checkpoint.join("meta.json"), "classifier checkpoint", "train-stage2")?;
    let (backend, meta) = ctx.backend(Some(&checkpoint))?;
    let method = meta.map(|m| m.tag).unwrap_or_default();
    let cls = ctx.cls(&manifest)?;
    let fusion = ctx.cfg.fusion();
    let dir = ctx.out.join("attn").join(&method);
    let mut outputs = Vec::new();
    for sample in manifest.split(Split::Test).take(ctx.cfg.usize("ablation.heatmap_samples")) {
        let clip = fusion.prepare(&frames, &sample.video)?;
        let capture = backend.capture_attention(&clip, cls.prompt())?;
        let grid = patchify(&clip, fusion.patch_size, fusion.temporal_span)?.grid;
        let map = attention_heatmap(&capture, &grid, ctx.cfg.reduction())?;
        outputs.extend(write_heatmaps(&dir, &sample.video.id, &clip, &map, fusion.temporal_span)?);
    }
    Ok(outputs)
}

pub fn toybench(ctx: &Ctx, data_only: bool) -> Result<Vec<PathBuf>> {
    let cfg = ctx.cfg.toybench();
    let out = ctx.out.join("toybench");
    if data_only {
        cfg.validate()?;
        let mut outputs = Vec::new();
        for &seed in &cfg.seeds {
            let dir = seed_dir(&out, seed).join("dataset");
            seed_dataset(&cfg, seed).write(&dir)?;
            outputs.push(dir.join("manifest.jsonl"));
        }
        return Ok(outputs);
    }
    let result = run_toy_experiment(&cfg, &out)?;
    Ok(vec![result.gaps_csv, result.summary_csv, result.runs_csv, result.training_csv])
}

pub fn report(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let dir = ctx.out.join("reports");
    let mut files: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|x| x == "json")
                    && !p.file_stem().is_some_and(|s| s.to_string_lossy().ends_with("_predictions"))
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    if files.is_empty() {
        return Err(CliError::Missing(format!(
            "no reports under {}; run `rbft evaluate` or `rbft ablate-mask` first",
            dir.display()
        ))
        .into());
    }
    let reports: Vec<MetricsReport> = files
        .iter()
        .map(|p| -> Result<MetricsReport> {
            serde_json::from_str(&read_text(p)?).with_context(|| format!("parsing report {}", p.display()))
        })
        .collect::<Result<_>>()?;
    let table = ctx.out.join("report.csv");
    emit_report(&reports, &table)?;
    let text = table.with_extension("txt");
    Ok(vec![table, text])
}
