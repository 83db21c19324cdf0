//! Test-split evaluation: greedy generation, label parsing, confusion
//! matrices, accuracy and per-class F1, and report tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, GenerationParams};
use crate::data::{DatasetManifest, Sample, Split};
use crate::fusion::{FrameClip, FrameSource, FusionConfig, FusionError};
use crate::prompts::{parse_label, ClassificationPromptSpec};
use crate::rationale::run_parallel;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("backend cannot generate")]
    Unsupported,
    #[error("test split is empty")]
    EmptyTestSplit,
    #[error("object masking needs boxes; missing for: {}", .0.join(", "))]
    MissingBoxes(Vec<String>),
    #[error("mask invalid for {id}: {message}")]
    Mask { id: String, message: String },
    #[error("reports mix label spaces: {0:?} vs {1:?}")]
    MixedLabelSpaces(Vec<String>, Vec<String>),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Rows are true classes; columns are predicted classes plus a final
/// overflow column for outputs no label could be parsed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes + 1]; classes],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: Option<usize>) {
        let col = predicted.unwrap_or(self.classes);
        self.counts[truth][col] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.counts[k][k]).sum()
    }

    pub fn none_count(&self) -> u64 {
        self.counts.iter().map(|r| r[self.classes]).sum()
    }

    pub fn none_rate(&self) -> f64 {
        ratio(self.none_count(), self.total())
    }

    /// Relabels classes so that old class `k` becomes `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::new(self.classes);
        for (t, row) in self.counts.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                let col = if p == self.classes { p } else { perm[p] };
                out.counts[perm[t]][col] += n;
            }
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    match cm.total() {
        0 => Err(EvalError::EmptyMatrix),
        n => Ok(cm.trace() as f64 / n as f64),
    }
}

/// `2PR / (P + R)` per class with every `0/0` taken as 0. Overflow outputs
/// are false negatives of their true class and false positives of none.
pub fn f1_per_class(cm: &ConfusionMatrix) -> Result<Vec<f64>, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    Ok((0..cm.classes)
        .map(|k| {
            let tp = cm.counts[k][k];
            let predicted: u64 = cm.counts.iter().map(|r| r[k]).sum();
            let actual: u64 = cm.counts[k].iter().sum();
            let p = ratio(tp, predicted);
            let r = ratio(tp, actual);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .collect())
}

/// Unweighted mean of the per-class F1 scores. Not one of the paper's metrics.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    let f1 = f1_per_class(cm)?;
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    pub truth: usize,
    pub predicted: Option<usize>,
    pub output: String,
    /// Last backend error when every attempt failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub matrix: ConfusionMatrix,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub max_new_tokens: usize,
    pub retries: usize,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 8,
            retries: 3,
            workers: 1,
        }
    }
}

/// Greedy generation on every test sample of `manifest`.
pub fn evaluate(
    backend: &dyn Backend,
    manifest: &DatasetManifest,
    frames: &dyn FrameSource,
    fusion: &FusionConfig,
    cls: &ClassificationPromptSpec,
    opts: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    evaluate_with(backend, manifest, cls, opts, &|s: &Sample| Ok(fusion.prepare(frames, &s.video)?))
}

/// [`evaluate`] with a caller-supplied clip preparation, e.g. masking.
pub fn evaluate_with(
    backend: &dyn Backend,
    manifest: &DatasetManifest,
    cls: &ClassificationPromptSpec,
    opts: &EvalOptions,
    prepare: &(dyn Fn(&Sample) -> Result<FrameClip, EvalError> + Sync),
) -> Result<Evaluation, EvalError> {
    if !backend.capabilities().generate {
        return Err(EvalError::Unsupported);
    }
    let samples: Vec<&Sample> = manifest.split(Split::Test).collect();
    if samples.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    let params = GenerationParams::greedy(opts.max_new_tokens);
    let one = |s: &&Sample| -> Result<Prediction, EvalError> {
        let clip = prepare(s)?;
        let mut error = None;
        for _ in 0..opts.retries.max(1) {
            match backend.generate(&clip, cls.prompt(), &params) {
                Ok(output) => {
                    return Ok(Prediction {
                        video_id: s.video.id.clone(),
                        truth: s.label_index,
                        predicted: parse_label(&output, cls),
                        output,
                        error: None,
                    })
                }
                Err(e) => error = Some(e.to_string()),
            }
        }
        log::warn!("generation failed for {}; scoring as unparseable", s.video.id);
        Ok(Prediction {
            video_id: s.video.id.clone(),
            truth: s.label_index,
            predicted: None,
            output: String::new(),
            error,
        })
    };
    let predictions = run_parallel(&samples, opts.workers, one)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut matrix = ConfusionMatrix::new(manifest.label_space.len());
    for p in &predictions {
        matrix.record(p.truth, p.predicted);
    }
    Ok(Evaluation { matrix, predictions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub model: String,
    pub method: String,
    /// Frame condition: `original`, `object` or `random`.
    pub condition: String,
    pub run_id: String,
    pub class_names: Vec<String>,
    pub accuracy: f64,
    pub f1_per_class: Vec<f64>,
    /// Non-paper summary.
    pub macro_f1: f64,
    pub none_rate: f64,
    pub n_test: u64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_matrix(
        cm: &ConfusionMatrix,
        class_names: &[String],
        dataset: &str,
        model: &str,
        method: &str,
        condition: &str,
        run_id: &str,
    ) -> Result<Self, EvalError> {
        Ok(Self {
            dataset: dataset.into(),
            model: model.into(),
            method: method.into(),
            condition: condition.into(),
            run_id: run_id.into(),
            class_names: class_names.to_vec(),
            accuracy: accuracy(cm)?,
            f1_per_class: f1_per_class(cm)?,
            macro_f1: macro_f1(cm)?,
            none_rate: cm.none_rate(),
            n_test: cm.total(),
            confusion: cm.clone(),
        })
    }
}

/// CSV header for reports over `classes`.
pub fn report_header(classes: &[String]) -> Vec<String> {
    let mut header: Vec<String> = ["dataset", "model", "method", "condition", "accuracy"]
        .map(String::from)
        .to_vec();
    header.extend(classes.iter().map(|c| format!("f1_{c}")));
    header.extend(["macro_f1_nonpaper", "none_rate", "n_test", "run_id"].map(String::from));
    header
}

pub fn report_row(r: &MetricsReport) -> Vec<String> {
    let mut row = vec![
        r.dataset.clone(),
        r.model.clone(),
        r.method.clone(),
        r.condition.clone(),
        format!("{:.4}", r.accuracy),
    ];
    row.extend(r.f1_per_class.iter().map(|f| format!("{f:.4}")));
    row.extend([
        format!("{:.4}", r.macro_f1),
        format!("{:.4}", r.none_rate),
        r.n_test.to_string(),
        r.run_id.clone(),
    ]);
    row
}

/// Checks that all reports share one label space and returns it.
pub fn shared_classes(reports: &[MetricsReport]) -> Result<Vec<String>, EvalError> {
    let classes = reports.first().map(|r| r.class_names.clone()).unwrap_or_default();
    match reports.iter().find(|r| r.class_names != classes) {
        Some(r) => Err(EvalError::MixedLabelSpaces(classes, r.class_names.clone())),
        None => Ok(classes),
    }
}

/// Orders by model, then method, then condition.
pub fn sort_reports(reports: &mut [&MetricsReport]) {
    reports.sort_by(|a, b| {
        (&a.model, &a.method, &a.condition, &a.dataset, &a.run_id)
            .cmp(&(&b.model, &b.method, &b.condition, &b.dataset, &b.run_id))
    });
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `path` as CSV and a column-aligned copy with a `.txt` extension.
pub fn write_table(header: &[String], rows: &[Vec<String>], path: &Path) -> Result<(), EvalError> {
    let all = || std::iter::once(header).chain(rows.iter().map(Vec::as_slice));
    let mut csv = String::new();
    for line in all() {
        csv.push_str(&line.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        csv.push('\n');
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| all().map(|r| r.get(i).map_or(0, String::len)).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for line in all() {
        let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        text.push_str(cells.join("  ").trim_end());
        text.push('\n');
    }
    let write = |p: &Path, body: &str| {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| EvalError::Io {
                path: parent.to_path_buf(),
                message: e.to_string(),
            })?;
        }
        fs::write(p, body).map_err(|e| EvalError::Io {
            path: p.to_path_buf(),
            message: e.to_string(),
        })
    };
    write(path, &csv)?;
    write(&path.with_extension("txt"), &text)
}

/// Writes `path` as CSV plus an aligned `.txt` table, rows ordered by model
/// then method.
pub fn emit_report(reports: &[MetricsReport], path: &Path) -> Result<(), EvalError> {
    let classes = shared_classes(reports)?;
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sort_reports(&mut sorted);
    let rows: Vec<Vec<String>> = sorted.iter().map(|r| report_row(r)).collect();
    write_table(&report_header(&classes), &rows, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn from_pairs(c: usize, pairs: &[(usize, Option<usize>)]) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(c);
        pairs.iter().for_each(|&(t, p)| cm.record(t, p));
        cm
    }

    #[test]
    fn f1_hand_example() {
        // Class 0: TP=2, FP=1, FN=1.
        let cm = from_pairs(2, &[(0, Some(0)), (0, Some(0)), (0, Some(1)), (1, Some(0))]);
        let f1 = f1_per_class(&cm).unwrap();
        assert!((f1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1[1], 0.0);
    }

    #[test]
    fn absent_class_scores_zero() {
        let cm = from_pairs(3, &[(0, Some(0)), (1, Some(1))]);
        assert_eq!(f1_per_class(&cm).unwrap(), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn degenerate_matrices() {
        let all_none = from_pairs(2, &[(0, None), (1, None)]);
        assert_eq!(accuracy(&all_none).unwrap(), 0.0);
        assert_eq!(all_none.none_rate(), 1.0);
        assert!(matches!(accuracy(&ConfusionMatrix::new(2)), Err(EvalError::EmptyMatrix)));
        let diag = from_pairs(2, &[(0, Some(0)), (1, Some(1))]);
        assert_eq!(accuracy(&diag).unwrap(), 1.0);
        assert_eq!(f1_per_class(&diag).unwrap(), vec![1.0, 1.0]);
    }

    /// Per-sample reference, independent of the matrix.
    fn brute(c: usize, pairs: &[(usize, Option<usize>)]) -> (f64, Vec<f64>) {
        let n = pairs.len() as f64;
        let acc = pairs.iter().filter(|(t, p)| Some(*t) == *p).count() as f64 / n;
        let f1 = (0..c)
            .map(|k| {
                let tp = pairs.iter().filter(|(t, p)| *t == k && *p == Some(k)).count() as f64;
                let fp = pairs.iter().filter(|(t, p)| *t != k && *p == Some(k)).count() as f64;
                let fn_ = pairs.iter().filter(|(t, p)| *t == k && *p != Some(k)).count() as f64;
                if 2.0 * tp + fp + fn_ == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (2.0 * tp + fp + fn_)
                }
            })
            .collect();
        (acc, f1)
    }

    fn pairs_strategy() -> impl Strategy<Value = (usize, Vec<(usize, Option<usize>)>)> {
        prop_oneof![Just(2usize), Just(3), Just(5)].prop_flat_map(|c| {
            (
                Just(c),
                prop::collection::vec((0..c, prop::option::weighted(0.85, 0..c)), 1..60),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn metrics_match_per_sample_reference((c, pairs) in pairs_strategy()) {
            let cm = from_pairs(c, &pairs);
            prop_assert_eq!(cm.total(), pairs.len() as u64);
            let (acc, f1) = brute(c, &pairs);
            prop_assert!((accuracy(&cm).unwrap() - acc).abs() < 1e-12);
            for (a, b) in f1_per_class(&cm).unwrap().iter().zip(&f1) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(a));
            }
        }

        #[test]
        fn class_permutation_permutes_f1((c, pairs) in pairs_strategy(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..c).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let cm = from_pairs(c, &pairs);
            let pm = cm.permuted(&perm);
            prop_assert_eq!(accuracy(&cm).unwrap(), accuracy(&pm).unwrap());
            let f = f1_per_class(&cm).unwrap();
            let g = f1_per_class(&pm).unwrap();
            for k in 0..c {
                prop_assert_eq!(f[k], g[perm[k]]);
            }
        }
    }

    fn report(method: &str) -> MetricsReport {
        let cm = from_pairs(2, &[(0, Some(0)), (1, Some(0)), (1, None)]);
        let names = vec!["normal".to_string(), "abnormal".to_string()];
        MetricsReport::from_matrix(&cm, &names, "toy", "m", method, "original", "r0").unwrap()
    }

    #[test]
    fn report_files_are_sorted_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        emit_report(&[report("rbft"), report("direct_sft")], &path).unwrap();
        let csv = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("dataset,model,method,condition,accuracy,f1_normal,f1_abnormal"));
        assert!(lines[1].contains(",direct_sft,"));
        assert!(lines[2].contains(",rbft,"));
        let txt = fs::read_to_string(path.with_extension("txt")).unwrap();
        emit_report(&[report("direct_sft"), report("rbft")], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), csv);
        assert_eq!(fs::read_to_string(path.with_extension("txt")).unwrap(), txt);
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        emit_report(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1);
    }
}
