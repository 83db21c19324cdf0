//! Flat `section.key = value` run configuration.
//!
//! Layers are applied in this order, later ones winning:
//! built-in defaults, environment (`RBFT_CACHE_DIR`), the `--config` file,
//! then `--set key=value` and subcommand flags. After resolution every key
//! holds an explicit value; that text is what `--print-config` shows and what
//! each run persists next to its outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rbft_core::ablation::{MaskSettings, Reduction};
use rbft_core::backend::{GenerationParams, ParamGroup};
use rbft_core::data::{CompositionMode, Split};
use rbft_core::evaluation::EvalOptions;
use rbft_core::fusion::FusionConfig;
use rbft_core::prompts::DEFAULT_QUESTION;
use rbft_core::toy::experiment::{ToyBenchConfig, METHOD_DIRECT, METHOD_RBFT};
use rbft_core::toy::model::ToyModelConfig;
use rbft_core::training::{ScheduleConfig, DEFAULT_SHUFFLE_SEED};

use crate::error::CliError;

pub const CACHE_ENV: &str = "RBFT_CACHE_DIR";

const SCHEDULE_SECTIONS: [&str; 3] = ["pretrain", "stage1", "stage2"];
const SCHEDULE_FIELDS: [&str; 8] = [
    "lr_language",
    "lr_vision",
    "epochs",
    "global_batch",
    "warmup_fraction",
    "weight_decay",
    "clip_norm",
    "min_lr",
];

fn schedule_defaults(section: &str, s: &ScheduleConfig) -> Vec<(String, String)> {
    let lr = |g| s.peak_lr_by_group.get(&g).copied().unwrap_or(0.0).to_string();
    [
        lr(ParamGroup::LanguageAndMerger),
        lr(ParamGroup::VisionTower),
        s.epochs_per_stage.to_string(),
        s.global_batch.to_string(),
        s.warmup_fraction.to_string(),
        s.weight_decay.to_string(),
        s.clip_norm.to_string(),
        s.min_lr.to_string(),
    ]
    .into_iter()
    .zip(SCHEDULE_FIELDS)
    .map(|(v, f)| (format!("{section}.{f}"), v))
    .collect()
}

/// Every key with its default, in print order.
pub fn defaults() -> Vec<(String, String)> {
    let tb = ToyBenchConfig::default();
    let m = &tb.model;
    let fu = &m.fusion;
    let gen = GenerationParams::greedy(tb.rationale_max_tokens);
    let ev = EvalOptions::default();
    let mut kv: Vec<(String, String)> = [
        ("run.root_seed", "0".to_string()),
        ("run.output_root", "runs".into()),
        ("data.manifest", String::new()),
        ("data.frames_root", String::new()),
        ("data.ground_truth", String::new()),
        ("backend.kind", "toy".into()),
        ("backend.checkpoint", String::new()),
        ("toy.d", m.d.to_string()),
        ("toy.layers", m.layers.to_string()),
        ("toy.heads", m.heads.to_string()),
        ("toy.context_len", m.context_len.to_string()),
        ("toy.max_video_tokens", m.max_video_tokens.to_string()),
        ("fusion.target_fps", fu.target_fps.to_string()),
        ("fusion.max_h", fu.max_hw.0.to_string()),
        ("fusion.max_w", fu.max_hw.1.to_string()),
        ("fusion.patch_size", fu.patch_size.to_string()),
        ("fusion.temporal_span", fu.temporal_span.to_string()),
        ("remote.base_url", String::new()),
        ("remote.model", String::new()),
        ("remote.timeout_s", "60".into()),
        ("prompts.template", String::new()),
        ("prompts.dimensions", String::new()),
        ("prompts.persona", String::new()),
        ("prompts.domain_context", String::new()),
        ("prompts.question", DEFAULT_QUESTION.into()),
        ("generation.split", "train".into()),
        ("generation.max_new_tokens", gen.max_new_tokens.to_string()),
        ("generation.temperature", gen.temperature.to_string()),
        ("generation.top_p", gen.top_p.to_string()),
        ("generation.retries", "3".into()),
        ("generation.workers", "1".into()),
        ("generation.cache_dir", String::new()),
        ("stage1.mode", tb.mode.key().into()),
        ("stage1.self_ratio", tb.self_ratio.to_string()),
        ("stage1.tag", METHOD_RBFT.into()),
        ("direct.tag", METHOD_DIRECT.into()),
        ("eval.checkpoint", String::new()),
        ("eval.max_new_tokens", tb.eval.max_new_tokens.to_string()),
        ("eval.retries", ev.retries.to_string()),
        ("eval.workers", ev.workers.to_string()),
        ("ablation.patch_size", tb.mask.patch_size.to_string()),
        (
            "ablation.fill",
            tb.mask.fill_value.map(|c| c.to_string()).join(","),
        ),
        ("ablation.reduction", "last_layer_head_mean".into()),
        ("ablation.heatmap_samples", tb.heatmap_samples.to_string()),
        ("toybench.seeds", tb.seeds.len().to_string()),
        ("toybench.n_train", tb.n_train.to_string()),
        ("toybench.n_test", tb.n_test.to_string()),
        ("toybench.pretrain_scenes", tb.pretrain_scenes.to_string()),
        ("toybench.rationale_max_tokens", tb.rationale_max_tokens.to_string()),
        ("toybench.base_checkpoint", String::new()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    for (section, s) in SCHEDULE_SECTIONS.iter().zip([&tb.pretrain, &tb.stage1, &tb.stage2]) {
        kv.extend(schedule_defaults(section, s));
    }
    kv
}

/// Resolved key-value text plus typed accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    order: Vec<String>,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Applies every layer and validates the result, reporting all bad keys at once.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let defaults = defaults();
        let order: Vec<String> = defaults.iter().map(|(k, _)| k.clone()).collect();
        let mut values: BTreeMap<String, String> = defaults.into_iter().collect();
        let mut problems = Vec::new();

        if let Ok(dir) = std::env::var(CACHE_ENV) {
            values.insert("generation.cache_dir".into(), dir);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Missing(format!("config file {}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                match line.split_once('=') {
                    Some((k, v)) => set(&mut values, k.trim(), v.trim(), &format!("{}:{}", path.display(), n + 1), &mut problems),
                    None => problems.push(format!("{}:{}: expected `key = value`", path.display(), n + 1)),
                }
            }
        }
        for (k, v) in overrides {
            set(&mut values, k, v, "command line", &mut problems);
        }
        if values["generation.cache_dir"].is_empty() {
            let dir = Path::new(&values["run.output_root"]).join("rationale_cache");
            values.insert("generation.cache_dir".into(), dir.display().to_string());
        }
        let cfg = Self { order, values };
        cfg.check(&mut problems);
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(problems))
        }
    }

    /// The exact text persisted with each run.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in &self.order {
            writeln!(out, "{k} = {}", self.values[k]).expect("string write");
        }
        out
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unknown config key {key}"))
    }

    /// Parsed value; keys are validated in `resolve`, so this cannot fail afterwards.
    fn parsed<T: FromStr>(&self, key: &str) -> T {
        self.get(key)
            .parse()
            .unwrap_or_else(|_| panic!("config key {key} was validated but no longer parses"))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn output_root(&self) -> PathBuf {
        PathBuf::from(self.get("run.output_root"))
    }

    pub fn root_seed(&self) -> u64 {
        self.parsed("run.root_seed")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.parsed(key)
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.parsed(key)
    }

    pub fn is_remote(&self) -> bool {
        self.get("backend.kind") == "remote"
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            target_fps: self.f64("fusion.target_fps"),
            max_hw: (self.parsed("fusion.max_h"), self.parsed("fusion.max_w")),
            patch_size: self.parsed("fusion.patch_size"),
            temporal_span: self.parsed("fusion.temporal_span"),
        }
    }

    pub fn toy_model(&self) -> ToyModelConfig {
        ToyModelConfig {
            d: self.usize("toy.d"),
            layers: self.usize("toy.layers"),
            heads: self.usize("toy.heads"),
            context_len: self.usize("toy.context_len"),
            max_video_tokens: self.usize("toy.max_video_tokens"),
            fusion: self.fusion(),
            ..ToyModelConfig::default()
        }
    }

    /// Shuffle seed derived from the root seed; root seed 0 gives the documented default.
    pub fn shuffle_seed(&self) -> u64 {
        DEFAULT_SHUFFLE_SEED.wrapping_add(self.root_seed())
    }

    pub fn schedule(&self, section: &str) -> ScheduleConfig {
        let g = |f: &str| format!("{section}.{f}");
        ScheduleConfig {
            peak_lr_by_group: BTreeMap::from([
                (ParamGroup::LanguageAndMerger, self.f64(&g("lr_language"))),
                (ParamGroup::VisionTower, self.f64(&g("lr_vision"))),
            ]),
            epochs_per_stage: self.usize(&g("epochs")),
            global_batch: self.usize(&g("global_batch")),
            warmup_fraction: self.f64(&g("warmup_fraction")),
            weight_decay: self.f64(&g("weight_decay")),
            clip_norm: self.f64(&g("clip_norm")),
            min_lr: self.f64(&g("min_lr")),
            shuffle_seed: self.shuffle_seed(),
            total_steps: 0,
        }
    }

    pub fn mode(&self) -> CompositionMode {
        self.parsed("stage1.mode")
    }

    pub fn split(&self) -> Split {
        parse_split(self.get("generation.split")).expect("validated split")
    }

    pub fn generation(&self) -> GenerationParams {
        GenerationParams {
            max_new_tokens: self.usize("generation.max_new_tokens"),
            temperature: self.f64("generation.temperature"),
            top_p: self.f64("generation.top_p"),
            seed: self.root_seed(),
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            max_new_tokens: self.usize("eval.max_new_tokens"),
            retries: self.usize("eval.retries"),
            workers: self.usize("eval.workers"),
        }
    }

    pub fn mask(&self) -> MaskSettings {
        MaskSettings {
            patch_size: self.parsed("ablation.patch_size"),
            fill_value: parse_fill(self.get("ablation.fill")).expect("validated fill"),
            seed: self.root_seed(),
        }
    }

    pub fn reduction(&self) -> Reduction {
        parse_reduction(self.get("ablation.reduction")).expect("validated reduction")
    }

    pub fn toybench(&self) -> ToyBenchConfig {
        ToyBenchConfig {
            seeds: (0..self.usize("toybench.seeds") as u64).collect(),
            root_seed: self.root_seed(),
            n_train: self.usize("toybench.n_train"),
            n_test: self.usize("toybench.n_test"),
            pretrain_scenes: self.usize("toybench.pretrain_scenes"),
            model: self.toy_model(),
            pretrain: self.schedule("pretrain"),
            stage1: self.schedule("stage1"),
            stage2: self.schedule("stage2"),
            mode: self.mode(),
            self_ratio: self.f64("stage1.self_ratio"),
            rationale_max_tokens: self.usize("toybench.rationale_max_tokens"),
            eval: self.eval_options(),
            mask: self.mask(),
            heatmap_samples: self.usize("ablation.heatmap_samples"),
            base_checkpoint: self.path("toybench.base_checkpoint"),
        }
    }

    fn check(&self, problems: &mut Vec<String>) {
        let v = |k: &str| self.values[k].as_str();
        let mut expect = |k: &str, ok: bool, what: &str| {
            if !ok {
                problems.push(format!("{k} = {:?}: expected {what}", v(k)));
            }
        };
        for k in &self.order {
            let key = k.as_str();
            let val = v(key);
            let field = key.rsplit('.').next().unwrap_or(key);
            let is_f64 = |s: &str| s.parse::<f64>().is_ok_and(f64::is_finite);
            if key == "run.root_seed" {
                expect(key, val.parse::<u64>().is_ok(), "an unsigned integer");
            } else if key.starts_with("toy.")
                || key.starts_with("fusion.") && key != "fusion.target_fps"
                || key.starts_with("toybench.") && key != "toybench.base_checkpoint"
                || matches!(
                    field,
                    "max_new_tokens" | "retries" | "workers" | "epochs" | "global_batch" | "patch_size" | "heatmap_samples" | "timeout_s"
                )
            {
                expect(key, val.parse::<usize>().is_ok(), "an unsigned integer");
            } else if matches!(
                field,
                "lr_language" | "lr_vision" | "warmup_fraction" | "weight_decay" | "clip_norm" | "min_lr" | "temperature" | "top_p" | "self_ratio" | "target_fps"
            ) {
                expect(key, is_f64(val) && val.parse::<f64>().unwrap() >= 0.0, "a non-negative number");
            }
        }
        expect("backend.kind", matches!(v("backend.kind"), "toy" | "remote"), "toy or remote");
        expect("stage1.mode", CompositionMode::from_str(v("stage1.mode")).is_ok(), "P_R, P_C_R or P_R_C");
        expect("generation.split", parse_split(v("generation.split")).is_some(), "train or test");
        expect("ablation.fill", parse_fill(v("ablation.fill")).is_some(), "three comma-separated bytes");
        expect(
            "ablation.reduction",
            parse_reduction(v("ablation.reduction")).is_some(),
            "last_layer_head_mean or all_layers_mean",
        );
        expect(
            "stage1.self_ratio",
            v("stage1.self_ratio").parse::<f64>().is_ok_and(|q| (0.0..=1.0).contains(&q)),
            "a fraction in [0, 1]",
        );
        for k in ["stage1.tag", "direct.tag"] {
            expect(k, !v(k).is_empty() && !v(k).contains(['/', '\\']), "a non-empty name without slashes");
        }
        expect("run.output_root", !v("run.output_root").is_empty(), "a directory");
        if self.is_remote() {
            for k in ["remote.base_url", "remote.model"] {
                expect(k, !v(k).is_empty(), "a value when backend.kind = remote");
            }
        }
        if problems.is_empty() {
            if let Err(e) = self.toy_model().validate() {
                problems.push(format!("toy.*: {e}"));
            }
            for s in SCHEDULE_SECTIONS {
                if let Err(e) = self.schedule(s).for_dataset(1).validate() {
                    problems.push(format!("{s}.*: {e}"));
                }
            }
        }
    }
}

fn set(values: &mut BTreeMap<String, String>, key: &str, value: &str, origin: &str, problems: &mut Vec<String>) {
    match values.get_mut(key) {
        Some(slot) => *slot = value.to_string(),
        None => problems.push(format!("unknown key `{key}` ({origin})")),
    }
}

/// Splits `key=value` from `--set`.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

fn parse_split(s: &str) -> Option<Split> {
    match s {
        "train" => Some(Split::Train),
        "test" => Some(Split::Test),
        _ => None,
    }
}

fn parse_fill(s: &str) -> Option<[u8; 3]> {
    let parts: Vec<u8> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    parts.try_into().ok()
}

fn parse_reduction(s: &str) -> Option<Reduction> {
    match s {
        "last_layer_head_mean" => Some(Reduction::LastLayerHeadMean),
        "all_layers_mean" => Some(Reduction::AllLayersMean),
        _ => None,
    }
}
