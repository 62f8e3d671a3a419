use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Granularity, LabelType, Stage, WorkflowPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanErrorKind {
    Ordering,
    GranularityMismatch,
    MissingLabelType,
    LabelTypeConflict,
    ForkWithExtract,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct PlanError {
    pub kind: PlanErrorKind,
    pub message: String,
}

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn err(kind: PlanErrorKind, message: impl Into<String>) -> PlanError {
    PlanError {
        kind,
        message: message.into(),
    }
}

/// Extract granularities of a source job, used to expand `fork_features`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForkBinding {
    pub extract: Option<Granularity>,
    pub extract_holdout: Option<Granularity>,
}

/// A plan that passed [`validate_plan`], with its resolved label type.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidatedPlan {
    pub plan: WorkflowPlan,
    pub label_type: Option<LabelType>,
    pub fork: Option<ForkBinding>,
}

impl ValidatedPlan {
    /// Attach the source job's extract granularities to a forking plan.
    pub fn bind_fork(mut self, binding: ForkBinding) -> Self {
        self.fork = Some(binding);
        self
    }
}

/// Whether a model trained at `train` granularity can be tested at `test`.
pub(crate) fn compatible(train: Granularity, test: Granularity) -> bool {
    train == test || (train == Granularity::All && test == Granularity::Course)
}

/// Checks stage ordering, train/test granularity and label-type agreement.
///
/// `config_label_type` is the label type named in the job config, if any; it
/// must agree with the script.
pub fn validate_plan(
    plan: WorkflowPlan,
    config_label_type: Option<LabelType>,
) -> Result<ValidatedPlan, PlanError> {
    let has_fork = plan.has_stage(Stage::ForkFeatures);
    if has_fork && (plan.has_stage(Stage::Extract) || plan.has_stage(Stage::ExtractHoldout)) {
        return Err(err(
            PlanErrorKind::ForkWithExtract,
            "fork_features cannot be combined with extract statements",
        ));
    }

    let steps = &plan.steps;
    for (i, step) in steps.iter().enumerate() {
        let before = &steps[..i];
        match step.stage {
            Stage::Train => {
                if !before
                    .iter()
                    .any(|s| matches!(s.stage, Stage::Extract | Stage::ForkFeatures))
                {
                    return Err(err(
                        PlanErrorKind::Ordering,
                        format!(
                            "`{}` needs a preceding extract or fork_features",
                            step.name()
                        ),
                    ));
                }
            }
            Stage::Test => {
                let test_g = step.granularity.expect("test has granularity");
                let trains: Vec<_> = before.iter().filter(|s| s.stage == Stage::Train).collect();
                if trains.is_empty() {
                    return Err(err(
                        PlanErrorKind::Ordering,
                        format!("`{}` needs a preceding train statement", step.name()),
                    ));
                }
                if !trains
                    .iter()
                    .any(|t| compatible(t.granularity.expect("train has granularity"), test_g))
                {
                    let names: Vec<_> = trains.iter().map(|t| t.name()).collect();
                    return Err(err(
                        PlanErrorKind::GranularityMismatch,
                        format!(
                            "`{}` cannot test a model from {}",
                            step.name(),
                            names.join(", ")
                        ),
                    ));
                }
                if !before
                    .iter()
                    .any(|s| matches!(s.stage, Stage::ExtractHoldout | Stage::ForkFeatures))
                {
                    return Err(err(
                        PlanErrorKind::Ordering,
                        format!(
                            "`{}` needs a preceding extract_holdout or fork_features",
                            step.name()
                        ),
                    ));
                }
            }
            Stage::Evaluate => {
                if !before.iter().any(|s| s.stage == Stage::Test) {
                    return Err(err(
                        PlanErrorKind::Ordering,
                        format!("`{}` needs a preceding test statement", step.name()),
                    ));
                }
            }
            Stage::Extract | Stage::ExtractHoldout | Stage::ForkFeatures => {}
        }
    }

    let mut label_type = config_label_type;
    for step in steps
        .iter()
        .filter(|s| matches!(s.stage, Stage::Train | Stage::Test | Stage::Evaluate))
    {
        let Some(lt) = step.label_type() else {
            return Err(err(
                PlanErrorKind::MissingLabelType,
                format!("`{}` requires label_type", step.name()),
            ));
        };
        match label_type {
            Some(existing) if existing != lt => {
                return Err(err(
                    PlanErrorKind::LabelTypeConflict,
                    format!(
                        "`{}` uses label_type {lt} but the job uses {existing}",
                        step.name()
                    ),
                ))
            }
            _ => label_type = Some(lt),
        }
    }

    Ok(ValidatedPlan {
        plan,
        label_type,
        fork: None,
    })
}
