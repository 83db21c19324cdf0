//! Prompt rendering, Stage-I/Stage-II target serialization and label parsing.
//!
//! All spans are UTF-8 byte offsets into the text they refer to.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{CompositionMode, LabelSpace};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("rationale must not be empty")]
    EmptyRationale,
    #[error("invalid prompt spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {message}")]
    Template { path: String, message: String },
}

pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/rationale_prompt.txt");
pub const DEFAULT_DIMENSIONS: &str = include_str!("../templates/smart_home_dimensions.txt");

/// Canonical names of the four rationale dimensions, in order.
pub const DIMENSION_NAMES: [&str; 4] = ["Subjects", "Attributes", "Actions", "Scenes"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationalePromptSpec {
    pub persona: String,
    pub dimensions: Vec<Dimension>,
    pub template: String,
}

impl Default for RationalePromptSpec {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE, DEFAULT_DIMENSIONS).expect("bundled templates are valid")
    }
}

impl RationalePromptSpec {
    /// Parses a template plus a `key = value` dimension file. The dimension
    /// file holds `persona = ...` followed by one `Name = instruction` line
    /// per dimension.
    pub fn parse(template: &str, dimensions: &str) -> Result<Self, PromptError> {
        let mut persona = None;
        let mut dims = Vec::new();
        for line in dimensions.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PromptError::InvalidSpec(format!("expected `key = value`, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "persona" {
                persona = Some(v.to_string());
            } else {
                dims.push(Dimension {
                    name: k.to_string(),
                    instruction: v.to_string(),
                });
            }
        }
        let spec = Self {
            persona: persona.ok_or_else(|| PromptError::InvalidSpec("missing persona".into()))?,
            dimensions: dims,
            template: template.trim_end().to_string(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_files(template: &Path, dimensions: &Path) -> Result<Self, PromptError> {
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|e| PromptError::Template {
                path: p.display().to_string(),
                message: e.to_string(),
            })
        };
        Self::parse(&read(template)?, &read(dimensions)?)
    }

    pub fn with_persona(mut self, persona: impl Into<String>) -> Self {
        self.persona = persona.into();
        self
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.dimensions.len() != 4 {
            return Err(PromptError::InvalidSpec(format!(
                "expected exactly four dimensions, got {}",
                self.dimensions.len()
            )));
        }
        for (d, want) in self.dimensions.iter().zip(DIMENSION_NAMES) {
            if !d.name.eq_ignore_ascii_case(want) {
                return Err(PromptError::InvalidSpec(format!(
                    "dimension {:?} out of order; expected {want}",
                    d.name
                )));
            }
        }
        for i in 1..=4 {
            for key in ["name", "instruction"] {
                let ph = format!("{{dimension_{i}_{key}}}");
                if !self.template.contains(&ph) {
                    return Err(PromptError::InvalidSpec(format!("template lacks {ph}")));
                }
            }
        }
        if !self.template.contains("{persona}") {
            return Err(PromptError::InvalidSpec("template lacks {persona}".into()));
        }
        Ok(())
    }

    pub fn prompt_id(&self) -> String {
        short_hash(&build_rationale_prompt(self, ""))
    }
}

/// Renders the rationale prompt. A non-empty `domain_context` is appended
/// after the dimension instructions.
pub fn build_rationale_prompt(spec: &RationalePromptSpec, domain_context: &str) -> String {
    let mut text = spec.template.replace("{persona}", &spec.persona);
    for (i, d) in spec.dimensions.iter().enumerate() {
        text = text
            .replace(&format!("{{dimension_{}_name}}", i + 1), &d.name)
            .replace(&format!("{{dimension_{}_instruction}}", i + 1), &d.instruction);
    }
    let context = domain_context.trim();
    if !context.is_empty() {
        text.push(' ');
        text.push_str(context);
    }
    text
}

pub fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationPromptSpec {
    pub question_text: String,
    /// Appended to the question when the target also carries a rationale.
    pub explain_text: String,
    pub class_names: Vec<String>,
    pub surface_forms: Vec<String>,
}

pub const DEFAULT_QUESTION: &str = "Classify the video as normal or abnormal .";
pub const DEFAULT_EXPLAIN: &str = "Explain the subjects , attributes , actions and scenes .";

impl ClassificationPromptSpec {
    /// Angle-bracketed class names, e.g. `<abnormal>`.
    pub fn for_labels(labels: &LabelSpace, question: impl Into<String>) -> Result<Self, PromptError> {
        let spec = Self {
            question_text: question.into(),
            explain_text: DEFAULT_EXPLAIN.into(),
            class_names: labels.names().to_vec(),
            surface_forms: labels.names().iter().map(|n| format!("<{n}>")).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.surface_forms.len() != self.class_names.len() {
            return Err(PromptError::InvalidSpec("one surface form per class required".into()));
        }
        for (i, a) in self.surface_forms.iter().enumerate() {
            if a.is_empty() {
                return Err(PromptError::InvalidSpec("empty surface form".into()));
            }
            for (j, b) in self.surface_forms.iter().enumerate() {
                if i != j && b.starts_with(a.as_str()) {
                    return Err(PromptError::InvalidSpec(format!(
                        "surface form {a:?} is a prefix of {b:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn surface(&self, label_index: usize) -> &str {
        &self.surface_forms[label_index]
    }

    pub fn prompt(&self) -> &str {
        &self.question_text
    }

    /// Instruction for targets that pair the label with a rationale.
    pub fn label_and_rationale_prompt(&self) -> String {
        format!("{} {}", self.question_text, self.explain_text)
    }

    pub fn prompt_id(&self) -> String {
        short_hash(&format!("{}\u{1f}{}", self.question_text, self.surface_forms.join("\u{1f}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains_span(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn intersects(&self, start: usize, end: usize) -> bool {
        start < self.end && self.start < end
    }

    fn shift(self, by: usize) -> Self {
        Self::new(self.start + by, self.end + by)
    }
}

/// A training text with the span the loss is computed on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSerialization {
    pub full_text: String,
    pub target_span: Span,
    pub label_span: Option<Span>,
    pub separator: String,
    pub mode: CompositionMode,
}

impl TargetSerialization {
    pub fn target(&self) -> &str {
        &self.full_text[self.target_span.start..self.target_span.end]
    }

    pub fn prompt(&self) -> &str {
        &self.full_text[..self.target_span.start]
    }

    /// Prefixes `prompt` and `joiner`, shifting every span accordingly.
    pub fn with_prompt(&self, prompt: &str, joiner: &str) -> Self {
        let shift = prompt.len() + joiner.len();
        Self {
            full_text: format!("{prompt}{joiner}{}", self.full_text),
            target_span: self.target_span.shift(shift),
            label_span: self.label_span.map(|s| s.shift(shift)),
            separator: self.separator.clone(),
            mode: self.mode,
        }
    }

    /// Removes the label and its separator from the target.
    pub fn rationale(&self) -> String {
        let target = self.target();
        let Some(label) = self.label_span else {
            return target.to_string();
        };
        let (ls, le) = (label.start - self.target_span.start, label.end - self.target_span.start);
        match self.mode {
            CompositionMode::PCR => target[le + self.separator.len()..].to_string(),
            CompositionMode::PRC => target[..ls - self.separator.len()].to_string(),
            CompositionMode::PR => target.to_string(),
        }
    }

    pub fn label(&self) -> Option<&str> {
        self.label_span.map(|s| &self.full_text[s.start..s.end])
    }
}

/// Lays out a Stage-I target. Spans are relative to the returned text; use
/// [`TargetSerialization::with_prompt`] to attach the instruction.
pub fn serialize_target(
    mode: CompositionMode,
    rationale: &str,
    label_surface: &str,
    separator: &str,
) -> Result<TargetSerialization, PromptError> {
    if rationale.is_empty() {
        return Err(PromptError::EmptyRationale);
    }
    let (full_text, label_span) = match mode {
        CompositionMode::PR => (rationale.to_string(), None),
        CompositionMode::PCR => (
            format!("{label_surface}{separator}{rationale}"),
            Some(Span::new(0, label_surface.len())),
        ),
        CompositionMode::PRC => {
            let start = rationale.len() + separator.len();
            (
                format!("{rationale}{separator}{label_surface}"),
                Some(Span::new(start, start + label_surface.len())),
            )
        }
    };
    Ok(TargetSerialization {
        target_span: Span::new(0, full_text.len()),
        full_text,
        label_span,
        separator: separator.to_string(),
        mode,
    })
}

/// Stage-II target: the label surface form alone.
pub fn label_target(label_surface: &str) -> TargetSerialization {
    TargetSerialization {
        full_text: label_surface.to_string(),
        target_span: Span::new(0, label_surface.len()),
        label_span: Some(Span::new(0, label_surface.len())),
        separator: String::new(),
        mode: CompositionMode::PCR,
    }
}

/// Extracts a class from generated text.
///
/// The earliest surface-form occurrence wins. Failing that, the earliest
/// case-insensitive whole-word class name wins. `None` otherwise.
pub fn parse_label(output_text: &str, spec: &ClassificationPromptSpec) -> Option<usize> {
    let earliest_form = spec
        .surface_forms
        .iter()
        .enumerate()
        .filter_map(|(k, form)| output_text.find(form.as_str()).map(|pos| (pos, k)))
        .min();
    if let Some((_, k)) = earliest_form {
        return Some(k);
    }
    let lower = output_text.to_lowercase();
    spec.class_names
        .iter()
        .enumerate()
        .filter_map(|(k, name)| find_word(&lower, &name.to_lowercase()).map(|pos| (pos, k)))
        .min()
        .map(|(_, k)| k)
}

fn find_word(haystack: &str, word: &str) -> Option<usize> {
    if word.is_empty() {
        return None;
    }
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    haystack.match_indices(word).map(|(i, _)| i).find(|&i| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + word.len()..].chars().next();
        !before.is_some_and(is_word) && !after.is_some_and(is_word)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary() -> ClassificationPromptSpec {
        ClassificationPromptSpec::for_labels(&LabelSpace::new(["normal", "abnormal"]).unwrap(), DEFAULT_QUESTION)
            .unwrap()
    }

    #[test]
    fn default_prompt_has_dimensions_in_order() {
        let text = build_rationale_prompt(&RationalePromptSpec::default(), "");
        let pos: Vec<usize> = DIMENSION_NAMES.iter().map(|d| text.find(d).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{text}");
        assert!(text.starts_with("You are a Smart Home Security Expert ."));
    }

    #[test]
    fn persona_swap_changes_only_persona() {
        let base = RationalePromptSpec::default();
        let other = base.clone().with_persona("Content Moderation Expert");
        let a = build_rationale_prompt(&base, "");
        let b = build_rationale_prompt(&other, "");
        assert_eq!(
            a.replace("Smart Home Security Expert", "Content Moderation Expert"),
            b
        );
        assert_ne!(base.prompt_id(), other.prompt_id());
    }

    #[test]
    fn rendering_is_stable() {
        let spec = RationalePromptSpec::default();
        assert_eq!(build_rationale_prompt(&spec, "ctx"), build_rationale_prompt(&spec, "ctx"));
        assert_eq!(spec.prompt_id(), RationalePromptSpec::default().prompt_id());
        assert_eq!(spec.prompt_id().len(), 16);
    }

    #[test]
    fn dimension_validation() {
        let three = "persona = x\nSubjects = a\nAttributes = b\nActions = c\n";
        assert!(RationalePromptSpec::parse(DEFAULT_TEMPLATE, three).is_err());
        let swapped = "persona = x\nAttributes = a\nSubjects = b\nActions = c\nScenes = d\n";
        assert!(RationalePromptSpec::parse(DEFAULT_TEMPLATE, swapped).is_err());
    }

    #[test]
    fn serialize_pr() {
        let t = serialize_target(CompositionMode::PR, "A bear opens the trash can.", "<abnormal>", "\n").unwrap();
        assert_eq!(t.target(), "A bear opens the trash can.");
        assert_eq!(t.label_span, None);
    }

    #[test]
    fn serialize_pcr_offsets() {
        let t = serialize_target(CompositionMode::PCR, "A bear opens the trash can.", "<abnormal>", "\n").unwrap();
        assert_eq!(t.full_text, "<abnormal>\nA bear opens the trash can.");
        assert_eq!(t.label_span, Some(Span::new(0, 10)));
    }

    #[test]
    fn serialize_prc_offsets() {
        let r = "A bear opens the trash can.";
        let t = serialize_target(CompositionMode::PRC, r, "<abnormal>", "\n").unwrap();
        // 27 bytes of rationale + 1 separator byte
        assert_eq!(t.label_span.unwrap().start, 28);
        assert_eq!(t.label(), Some("<abnormal>"));
        assert!(t.target_span.contains_span(&t.label_span.unwrap()));
    }

    #[test]
    fn empty_rationale_rejected() {
        assert!(matches!(
            serialize_target(CompositionMode::PR, "", "<a>", "\n"),
            Err(PromptError::EmptyRationale)
        ));
    }

    #[test]
    fn with_prompt_shifts_spans() {
        let t = serialize_target(CompositionMode::PRC, "r s", "<normal>", "\n").unwrap();
        let p = t.with_prompt("Classify it .", " ");
        assert_eq!(p.prompt(), "Classify it . ");
        assert_eq!(p.target(), t.full_text);
        assert_eq!(p.label(), Some("<normal>"));
        assert_eq!(p.rationale(), "r s");
    }

    #[test]
    fn parse_label_rules() {
        let spec = binary();
        assert_eq!(parse_label("<abnormal>", &spec), Some(1));
        assert_eq!(parse_label("The clip is normal. <normal>", &spec), Some(0));
        assert_eq!(parse_label("cannot determine", &spec), None);
        assert_eq!(parse_label("<abnormal> then <normal>", &spec), Some(1));
        assert_eq!(parse_label("Looks ABNORMAL to me", &spec), Some(1));
        assert_eq!(parse_label("looks abnormal, not normal", &spec), Some(1));
    }

    #[test]
    fn prefixing_surface_forms_rejected() {
        let spec = ClassificationPromptSpec {
            question_text: "q".into(),
            explain_text: String::new(),
            class_names: vec!["a".into(), "b".into()],
            surface_forms: vec!["<a".into(), "<ab>".into()],
        };
        assert!(spec.validate().is_err());
    }

    proptest! {
        #[test]
        fn reconstruction_and_parse_round_trip(
            rationale in "[a-z ,.\n]{1,60}",
            label in 0usize..2,
            mode_ix in 0usize..3,
            sep in prop_oneof![Just("\n".to_string()), Just(" ".to_string()), Just(" | ".to_string())],
        ) {
            let spec = binary();
            let mode = CompositionMode::ALL[mode_ix];
            let t = serialize_target(mode, &rationale, spec.surface(label), &sep).unwrap();
            prop_assert_eq!(t.rationale(), rationale.clone());
            if mode.has_label() {
                prop_assert_eq!(parse_label(&t.full_text, &spec), Some(label));
            } else {
                prop_assert!(t.label_span.is_none());
            }
        }

        #[test]
        fn earliest_surface_form_is_unambiguous(words in proptest::collection::vec(0usize..4, 0..12)) {
            let spec = binary();
            let vocab = ["<normal>", "<abnormal>", "the", "clip"];
            let text: Vec<&str> = words.iter().map(|&w| vocab[w]).collect();
            let text = text.join(" ");
            let first = words.iter().find(|&&w| w < 2).copied();
            prop_assert_eq!(parse_label(&text, &spec), first);
        }
    }
}
