//! Controller-script language.
//!
//! A controller script is a flat list of call statements such as
//! `train_course(label_type = 'dropout')`. Parsing yields a [`WorkflowPlan`],
//! [`validate_plan`] enforces stage ordering, and [`expand_tasks`] fans the
//! plan out over a catalog into a [`TaskGraph`].

mod expand;
mod parse;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use expand::{expand_tasks, ExpandError, Task, TaskGraph, TaskScope};
pub use parse::{parse_script, render_plan, DslError, DslErrorKind, Pos};
pub use validate::{validate_plan, ForkBinding, PlanError, PlanErrorKind, ValidatedPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extract,
    ExtractHoldout,
    Train,
    Test,
    Evaluate,
    ForkFeatures,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::ExtractHoldout => "extract_holdout",
            Stage::Train => "train",
            Stage::Test => "test",
            Stage::Evaluate => "evaluate",
            Stage::ForkFeatures => "fork_features",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Session,
    Course,
    All,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Session, Granularity::Course, Granularity::All];

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Session => "session",
            Granularity::Course => "course",
            Granularity::All => "all",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Prediction target: binary dropout or the week of dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelType {
    Dropout,
    DropoutWeek,
}

impl LabelType {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelType::Dropout => "dropout",
            LabelType::DropoutWeek => "dropout_week",
        }
    }
}

impl fmt::Display for LabelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dropout" => Ok(LabelType::Dropout),
            "dropout_week" => Ok(LabelType::DropoutWeek),
            other => Err(format!(
                "unknown label type `{other}` (expected dropout or dropout_week)"
            )),
        }
    }
}

/// One statement of a controller script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowStep {
    pub stage: Stage,
    /// Absent only for `fork_features`.
    pub granularity: Option<Granularity>,
    pub params: BTreeMap<String, String>,
    pub fork_source: Option<String>,
}

impl WorkflowStep {
    pub fn new(stage: Stage, granularity: Option<Granularity>) -> Self {
        WorkflowStep {
            stage,
            granularity,
            params: BTreeMap::new(),
            fork_source: None,
        }
    }

    pub fn with_label_type(mut self, label_type: LabelType) -> Self {
        self.params
            .insert("label_type".to_string(), label_type.as_str().to_string());
        self
    }

    /// The statement name as written in a script, e.g. `extract_holdout_session`.
    pub fn name(&self) -> String {
        match self.granularity {
            Some(g) => format!("{}_{}", self.stage, g),
            None => self.stage.as_str().to_string(),
        }
    }

    pub fn label_type(&self) -> Option<LabelType> {
        self.params.get("label_type").and_then(|v| v.parse().ok())
    }
}

/// Parsed controller script.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkflowPlan {
    pub steps: Vec<WorkflowStep>,
    pub source_text: String,
}

impl WorkflowPlan {
    /// Canonical script text for this plan.
    pub fn render(&self) -> String {
        render_plan(&self.steps)
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.steps.iter().any(|s| s.stage == stage)
    }

    pub fn fork_source(&self) -> Option<&str> {
        self.steps.iter().find_map(|s| s.fork_source.as_deref())
    }
}

/// Every statement name the language recognizes, paired with its step shape.
pub fn recognized_statements() -> Vec<(String, Stage, Option<Granularity>)> {
    let mut out = Vec::new();
    for stage in [
        Stage::Extract,
        Stage::ExtractHoldout,
        Stage::Train,
        Stage::Test,
    ] {
        for g in Granularity::ALL {
            out.push((format!("{stage}_{g}"), stage, Some(g)));
        }
    }
    out.push((
        "evaluate_course".into(),
        Stage::Evaluate,
        Some(Granularity::Course),
    ));
    out.push((
        "evaluate_all".into(),
        Stage::Evaluate,
        Some(Granularity::All),
    ));
    out.push(("fork_features".into(), Stage::ForkFeatures, None));
    out
}
