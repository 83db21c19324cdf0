//! Dataset manifests, rationale records and their JSONL encodings.
//!
//! Labels live as indices into an ordered [`LabelSpace`]; class-name strings
//! only appear when reading or writing files. Rationales are stored apart from
//! the manifest and joined on `video_id`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::GenerationParams;

pub const MANIFEST_SCHEMA: &str = "rbft-manifest/1";
pub const RATIONALE_SCHEMA: &str = "rbft-rationale/1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: I/O error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: unsupported schema {found:?} (expected {expected:?})")]
    Schema {
        path: PathBuf,
        found: String,
        expected: &'static str,
    },
    #[error("duplicate video id {0:?}")]
    DuplicateId(String),
    #[error("sample {id:?} references unknown label {label:?}")]
    UnknownLabel { id: String, label: String },
    #[error("invalid label space: {0}")]
    LabelSpace(String),
    #[error("invalid sample {id:?}: {message}")]
    InvalidSample { id: String, message: String },
    #[error("invalid rationale record for {video_id:?}: {message}")]
    InvalidRationale { video_id: String, message: String },
}

/// Ordered, duplicate-free class names; `C = names.len() >= 2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, DataError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(DataError::LabelSpace(format!(
                "need at least 2 classes, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(DataError::LabelSpace("empty class name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(DataError::LabelSpace(format!("duplicate class {name:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = DataError;

    fn try_from(value: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(value: LabelSpace) -> Self {
        value.names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRef {
    pub id: String,
    pub uri: String,
    pub duration_s: f64,
    pub native_fps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Axis-aligned annotation of a salient object in one native frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub frame_index: usize,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub object_name: String,
}

impl ObjectBox {
    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && u64::from(self.x) + u64::from(self.w) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.h) <= u64::from(height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub video: VideoRef,
    pub label_index: usize,
    pub split: Split,
    pub object_boxes: Option<Vec<ObjectBox>>,
    /// Reserved; nothing in the pipeline consumes it.
    pub transcript: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub version: String,
    pub label_space: LabelSpace,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    /// Builds a manifest, enforcing id uniqueness and label validity.
    pub fn new(
        name: impl Into<String>,
        version: impl Into<String>,
        label_space: LabelSpace,
        samples: Vec<Sample>,
    ) -> Result<Self, DataError> {
        let mut ids = HashSet::new();
        for s in &samples {
            if !ids.insert(s.video.id.as_str()) {
                return Err(DataError::DuplicateId(s.video.id.clone()));
            }
            if s.label_index >= label_space.len() {
                return Err(DataError::UnknownLabel {
                    id: s.video.id.clone(),
                    label: format!("#{}", s.label_index),
                });
            }
            validate_video(&s.video)?;
        }
        Ok(Self {
            name: name.into(),
            version: version.into(),
            label_space,
            samples,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> + '_ {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn get(&self, video_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.video.id == video_id)
    }

    /// A training run needs both splits populated.
    pub fn require_splits(&self) -> Result<(), DataError> {
        for split in [Split::Train, Split::Test] {
            if self.count(split) == 0 {
                return Err(DataError::InvalidSample {
                    id: "*".into(),
                    message: format!("{split} split is empty"),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let io = |source| DataError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = fs::File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        let header = ManifestHeader {
            schema: MANIFEST_SCHEMA.to_string(),
            labels: self.label_space.names().to_vec(),
            name: Some(self.name.clone()),
            version: Some(self.version.clone()),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
        for s in &self.samples {
            let line = ManifestLine {
                id: s.video.id.clone(),
                uri: s.video.uri.clone(),
                duration_s: s.video.duration_s,
                native_fps: Some(s.video.native_fps),
                label: self.label_space.name(s.label_index).to_string(),
                split: s.split,
                object_boxes: s.object_boxes.clone(),
                transcript: s.transcript.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&line).expect("line serializes")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

fn validate_video(v: &VideoRef) -> Result<(), DataError> {
    let bad = |message: &str| DataError::InvalidSample {
        id: v.id.clone(),
        message: message.to_string(),
    };
    if v.id.is_empty() {
        return Err(bad("empty id"));
    }
    if !(v.duration_s.is_finite() && v.duration_s > 0.0) {
        return Err(bad("duration_s must be > 0"));
    }
    if !(v.native_fps.is_finite() && v.native_fps > 0.0) {
        return Err(bad("native_fps must be > 0"));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    schema: String,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    version: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    uri: String,
    duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    native_fps: Option<f64>,
    label: String,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object_boxes: Option<Vec<ObjectBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transcript: Option<String>,
}

/// Frame rate assumed when a manifest line omits `native_fps`.
pub const DEFAULT_NATIVE_FPS: f64 = 30.0;

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |line: usize, message: String| DataError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut header: Option<ManifestHeader> = None;
    let mut label_space: Option<LabelSpace> = None;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();

    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(labels) = &label_space else {
            let h: ManifestHeader =
                serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
            if h.schema != MANIFEST_SCHEMA {
                return Err(DataError::Schema {
                    path: path.to_path_buf(),
                    found: h.schema,
                    expected: MANIFEST_SCHEMA,
                });
            }
            label_space = Some(LabelSpace::new(h.labels.clone())?);
            header = Some(h);
            continue;
        };
        let rec: ManifestLine =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(DataError::DuplicateId(rec.id));
        }
        let label_index = labels.index_of(&rec.label).ok_or_else(|| DataError::UnknownLabel {
            id: rec.id.clone(),
            label: rec.label.clone(),
        })?;
        let video = VideoRef {
            id: rec.id,
            uri: rec.uri,
            duration_s: rec.duration_s,
            native_fps: rec.native_fps.unwrap_or(DEFAULT_NATIVE_FPS),
        };
        validate_video(&video)?;
        samples.push(Sample {
            video,
            label_index,
            split: rec.split,
            object_boxes: rec.object_boxes,
            transcript: rec.transcript,
        });
    }

    let header = header.ok_or_else(|| parse_err(1, "missing schema header line".into()))?;
    let label_space = label_space.expect("set together with header");
    let name = header.name.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    Ok(DatasetManifest {
        name,
        version: header.version.unwrap_or_else(|| "1".into()),
        label_space,
        samples,
    })
}

/// Where the class label sits relative to the rationale in a Stage-I target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompositionMode {
    /// Rationale only.
    #[serde(rename = "P_R")]
    PR,
    /// Label, separator, rationale.
    #[serde(rename = "P_C_R")]
    PCR,
    /// Rationale, separator, label.
    #[serde(rename = "P_R_C")]
    PRC,
}

impl CompositionMode {
    pub const ALL: [CompositionMode; 3] = [CompositionMode::PR, CompositionMode::PCR, CompositionMode::PRC];

    pub fn has_label(self) -> bool {
        !matches!(self, CompositionMode::PR)
    }

    pub fn key(self) -> &'static str {
        match self {
            CompositionMode::PR => "P_R",
            CompositionMode::PCR => "P_C_R",
            CompositionMode::PRC => "P_R_C",
        }
    }
}

impl fmt::Display for CompositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompositionMode::PR => "P+R",
            CompositionMode::PCR => "P+C+R",
            CompositionMode::PRC => "P+R+C",
        })
    }
}

impl std::str::FromStr for CompositionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('+', "_").as_str() {
            "P_R" => Ok(CompositionMode::PR),
            "P_C_R" => Ok(CompositionMode::PCR),
            "P_R_C" => Ok(CompositionMode::PRC),
            _ => Err(format!("unknown composition mode {s:?} (expected P_R, P_C_R or P_R_C)")),
        }
    }
}

/// A rationale bound to one video, with the provenance of its generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RationaleRecord {
    pub video_id: String,
    pub rationale_text: String,
    pub generator_model_id: String,
    pub prompt_id: String,
    pub decoding: GenerationParams,
    pub created_at: String,
}

impl RationaleRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.rationale_text.is_empty() {
            return Err(DataError::InvalidRationale {
                video_id: self.video_id.clone(),
                message: "rationale_text is empty".into(),
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SchemaHeader {
    schema: String,
}

pub fn save_rationales(records: &[RationaleRecord], path: &Path) -> Result<(), DataError> {
    for r in records {
        r.validate()?;
    }
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    let header = SchemaHeader {
        schema: RATIONALE_SCHEMA.into(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a rationale file. A completely empty file is an empty list.
pub fn load_rationales(path: &Path) -> Result<Vec<RationaleRecord>, DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if !header_seen {
            let h: SchemaHeader = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            if h.schema != RATIONALE_SCHEMA {
                return Err(DataError::Schema {
                    path: path.to_path_buf(),
                    found: h.schema,
                    expected: RATIONALE_SCHEMA,
                });
            }
            header_seen = true;
            continue;
        }
        let r: RationaleRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

/// Checks that every record's `video_id` resolves in `manifest`.
pub fn check_rationales_resolve(
    records: &[RationaleRecord],
    manifest: &DatasetManifest,
) -> Result<(), DataError> {
    let ids: HashSet<&str> = manifest.samples.iter().map(|s| s.video.id.as_str()).collect();
    for r in records {
        if !ids.contains(r.video_id.as_str()) {
            return Err(DataError::InvalidRationale {
                video_id: r.video_id.clone(),
                message: "video_id not in manifest".into(),
            });
        }
    }
    Ok(())
}

/// Indexes records by video id; later duplicates replace earlier ones.
pub fn index_rationales(records: &[RationaleRecord]) -> HashMap<&str, &RationaleRecord> {
    records.iter().map(|r| (r.video_id.as_str(), r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn line(id: &str, label: &str, split: &str) -> String {
        format!(r#"{{"id":"{id}","uri":"videos/{id}","duration_s":4.0,"label":"{label}","split":"{split}"}}"#)
    }

    #[test]
    fn loads_counts_per_split() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from(r#"{"schema":"rbft-manifest/1","labels":["normal","abnormal"]}"#);
        body.push('\n');
        for (i, split) in ["train", "train", "train", "train", "test", "test"].iter().enumerate() {
            let label = if i % 2 == 0 { "normal" } else { "abnormal" };
            body.push_str(&line(&format!("v{i}"), label, split));
            body.push('\n');
        }
        let m = load_manifest(&write(dir.path(), "m.jsonl", &body)).unwrap();
        assert_eq!(m.label_space.len(), 2);
        assert_eq!(m.count(Split::Train), 4);
        assert_eq!(m.count(Split::Test), 2);
        assert_eq!(m.samples[1].label_index, 1);
        assert_eq!(m.samples[0].video.native_fps, DEFAULT_NATIVE_FPS);
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{}\n{}\n{}\n",
            r#"{"schema":"rbft-manifest/1","labels":["normal","abnormal"]}"#,
            line("clip7", "normal", "train"),
            line("clip7", "abnormal", "test"),
        );
        let err = load_manifest(&write(dir.path(), "m.jsonl", &body)).unwrap_err();
        assert!(matches!(&err, DataError::DuplicateId(id) if id == "clip7"), "{err}");
    }

    #[test]
    fn unknown_label_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{}\n{}\n",
            r#"{"schema":"rbft-manifest/1","labels":["normal","abnormal"]}"#,
            line("a", "hateful", "train"),
        );
        let err = load_manifest(&write(dir.path(), "m.jsonl", &body)).unwrap_err();
        assert!(err.to_string().contains("hateful"));
        assert!(matches!(err, DataError::UnknownLabel { .. }));
    }

    #[test]
    fn parse_error_carries_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{}\n{}\n{{not json\n",
            r#"{"schema":"rbft-manifest/1","labels":["normal","abnormal"]}"#,
            line("a", "normal", "train"),
        );
        match load_manifest(&write(dir.path(), "m.jsonl", &body)).unwrap_err() {
            DataError::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rejects_unknown_schema_version() {
        let dir = tempfile::tempdir().unwrap();
        let body = r#"{"schema":"rbft-manifest/2","labels":["a","b"]}"#;
        let err = load_manifest(&write(dir.path(), "m.jsonl", body)).unwrap_err();
        assert!(matches!(err, DataError::Schema { .. }));
        let err = load_rationales(&write(dir.path(), "r.jsonl", r#"{"schema":"rbft-rationale/9"}"#))
            .unwrap_err();
        assert!(matches!(err, DataError::Schema { .. }));
    }

    #[test]
    fn label_space_invariants() {
        assert!(LabelSpace::new(["only"]).is_err());
        assert!(LabelSpace::new(["a", "a"]).is_err());
        assert!(LabelSpace::new(["a", ""]).is_err());
        assert_eq!(LabelSpace::new(["a", "b", "c"]).unwrap().len(), 3);
    }

    #[test]
    fn zero_duration_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{}\n{}\n",
            r#"{"schema":"rbft-manifest/1","labels":["normal","abnormal"]}"#,
            r#"{"id":"z","uri":"u","duration_s":0.0,"label":"normal","split":"train"}"#
        );
        assert!(load_manifest(&write(dir.path(), "m.jsonl", &body)).is_err());
    }

    fn record(id: &str, text: &str) -> RationaleRecord {
        RationaleRecord {
            video_id: id.into(),
            rationale_text: text.into(),
            generator_model_id: "toy-0".into(),
            prompt_id: "p".into(),
            decoding: GenerationParams::default(),
            created_at: "2026-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn rationale_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let recs = vec![record("a", "x"), record("b", "y z"), record("c", "line1\nline2")];
        save_rationales(&recs, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4, "header plus three records");
        assert_eq!(load_rationales(&p).unwrap(), recs);

        save_rationales(&[], &p).unwrap();
        assert!(load_rationales(&p).unwrap().is_empty());
        fs::write(&p, "").unwrap();
        assert!(load_rationales(&p).unwrap().is_empty());
    }

    #[test]
    fn empty_rationale_text_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = save_rationales(&[record("a", "")], &dir.path().join("r.jsonl")).unwrap_err();
        assert!(matches!(err, DataError::InvalidRationale { .. }));
    }

    #[test]
    fn manifest_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(
            "toy",
            "3",
            LabelSpace::new(["normal", "abnormal"]).unwrap(),
            vec![Sample {
                video: VideoRef {
                    id: "s0".into(),
                    uri: "frames/s0".into(),
                    duration_s: 4.0,
                    native_fps: 2.0,
                },
                label_index: 1,
                split: Split::Test,
                object_boxes: Some(vec![ObjectBox {
                    frame_index: 3,
                    x: 1,
                    y: 2,
                    w: 3,
                    h: 4,
                    object_name: "bear".into(),
                }]),
                transcript: None,
            }],
        )
        .unwrap();
        let p = dir.path().join("m.jsonl");
        m.save(&p).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn rationale_round_trip_random_text(
            texts in proptest::collection::vec("\\PC{1,40}(\n\\PC{0,20}){0,3}", 0..6),
            model in "\\PC{0,12}",
            temp in 0.0f64..2.0,
            seed in any::<u64>(),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.jsonl");
            let recs: Vec<_> = texts.iter().enumerate().map(|(i, t)| RationaleRecord {
                video_id: format!("v{i}"),
                rationale_text: t.clone(),
                generator_model_id: model.clone(),
                prompt_id: "pid".into(),
                decoding: GenerationParams { temperature: temp, seed, ..GenerationParams::default() },
                created_at: "t".into(),
            }).collect();
            save_rationales(&recs, &p).unwrap();
            let raw = fs::read_to_string(&p).unwrap();
            prop_assert_eq!(raw.lines().count(), recs.len() + 1);
            prop_assert_eq!(load_rationales(&p).unwrap(), recs);
        }
    }
}
