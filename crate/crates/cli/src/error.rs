//! Error classes and their exit codes.

use std::error::Error as StdError;
use std::fmt;

use rbft_core::ablation::AblationError;
use rbft_core::backend::BackendError;
use rbft_core::data::DataError;
use rbft_core::evaluation::EvalError;
use rbft_core::fusion::FusionError;
use rbft_core::prompts::PromptError;
use rbft_core::rationale::RationaleError;
use rbft_core::toy::experiment::ExperimentError;
use rbft_core::training::TrainingError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    MissingPrerequisite,
    Backend,
    Invariant,
}

impl ErrorClass {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::MissingPrerequisite => 3,
            ErrorClass::Backend => 4,
            ErrorClass::Invariant => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Config => "config_error",
            ErrorClass::MissingPrerequisite => "missing_prerequisite",
            ErrorClass::Backend => "backend_failure",
            ErrorClass::Invariant => "invariant_violation",
        }
    }
}

/// Errors raised by the driver itself.
#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Missing(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(problems) => write!(f, "invalid config: {}", problems.join("; ")),
            CliError::Missing(m) => write!(f, "missing prerequisite: {m}"),
        }
    }
}

impl StdError for CliError {}

use ErrorClass::*;

fn backend(e: &BackendError) -> ErrorClass {
    match e {
        BackendError::ContextOverflow { .. } | BackendError::InvalidInput(_) => Config,
        BackendError::Checkpoint { .. } => MissingPrerequisite,
        BackendError::EmptyLossMask(_) => Invariant,
        BackendError::Unavailable(_) | BackendError::Unsupported(_) | BackendError::NonFiniteLoss(_) => Backend,
    }
}

fn data(e: &DataError) -> ErrorClass {
    match e {
        DataError::Io { .. } => MissingPrerequisite,
        _ => Config,
    }
}

fn fusion(e: &FusionError) -> ErrorClass {
    match e {
        FusionError::Io { .. } | FusionError::Undecodable(_) => MissingPrerequisite,
        FusionError::WidthMismatch(_) | FusionError::TokenOutOfRange { .. } => Invariant,
        _ => Config,
    }
}

fn prompt(e: &PromptError) -> ErrorClass {
    match e {
        PromptError::Template { .. } => MissingPrerequisite,
        _ => Config,
    }
}

fn training(e: &TrainingError) -> ErrorClass {
    match e {
        TrainingError::EmptyDataset | TrainingError::Schedule(_) => Config,
        TrainingError::EmptyTarget(_) => Invariant,
        TrainingError::Refused(_) | TrainingError::Missing(_) | TrainingError::Io { .. } => MissingPrerequisite,
        TrainingError::NonFinite { .. } | TrainingError::NoTokenizer => Backend,
        TrainingError::Backend(b) => backend(b),
        TrainingError::Fusion(f) => fusion(f),
    }
}

fn rationale(e: &RationaleError) -> ErrorClass {
    match e {
        RationaleError::Policy(_) | RationaleError::EmptyTrainSplit => Config,
        RationaleError::Coverage { .. } | RationaleError::Io { .. } => MissingPrerequisite,
        RationaleError::Generation { .. } | RationaleError::Unsupported => Backend,
        RationaleError::Backend(b) => backend(b),
        RationaleError::Data(d) => data(d),
        RationaleError::Fusion(f) => fusion(f),
        RationaleError::Prompt(p) => prompt(p),
    }
}

fn eval(e: &EvalError) -> ErrorClass {
    match e {
        EvalError::EmptyMatrix => Invariant,
        EvalError::Unsupported => Backend,
        EvalError::EmptyTestSplit | EvalError::MissingBoxes(_) | EvalError::Mask { .. } | EvalError::MixedLabelSpaces(..) => {
            Config
        }
        EvalError::Fusion(f) => fusion(f),
        EvalError::Backend(b) => backend(b),
        EvalError::Io { .. } => MissingPrerequisite,
    }
}

fn ablation(e: &AblationError) -> ErrorClass {
    match e {
        AblationError::ShapeMismatch { .. } | AblationError::FrameMismatch { .. } => Invariant,
        AblationError::Io { .. } => MissingPrerequisite,
        _ => Config,
    }
}

fn experiment(e: &ExperimentError) -> ErrorClass {
    match e {
        ExperimentError::Data(x) => data(x),
        ExperimentError::Prompt(x) => prompt(x),
        ExperimentError::Fusion(x) => fusion(x),
        ExperimentError::Rationale(x) => rationale(x),
        ExperimentError::Training(x) => training(x),
        ExperimentError::Eval(x) => eval(x),
        ExperimentError::Ablation(x) => ablation(x),
        ExperimentError::Backend(x) => backend(x),
        ExperimentError::Config(_) => Config,
        ExperimentError::Invariant(_) => Invariant,
        ExperimentError::Io { .. } => MissingPrerequisite,
    }
}

fn class_of(e: &(dyn StdError + 'static)) -> Option<ErrorClass> {
    if let Some(e) = e.downcast_ref::<CliError>() {
        return Some(match e {
            CliError::Config(_) => Config,
            CliError::Missing(_) => MissingPrerequisite,
        });
    }
    macro_rules! try_as {
        ($($t:ty => $f:expr),* $(,)?) => {
            $(if let Some(x) = e.downcast_ref::<$t>() { return Some($f(x)); })*
        };
    }
    try_as!(
        ExperimentError => experiment,
        TrainingError => training,
        RationaleError => rationale,
        EvalError => eval,
        AblationError => ablation,
        BackendError => backend,
        DataError => data,
        FusionError => fusion,
        PromptError => prompt,
        std::io::Error => |_| MissingPrerequisite,
    );
    None
}

/// The class of the outermost recognised error in the chain; unknown errors
/// are internal faults.
pub fn classify(err: &anyhow::Error) -> ErrorClass {
    err.chain().find_map(class_of).unwrap_or(Invariant)
}
