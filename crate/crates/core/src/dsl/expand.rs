use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::validate::compatible;
use super::{Granularity, Stage, ValidatedPlan, WorkflowPlan};
use crate::catalog::Catalog;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExpandError {
    #[error("catalog has no course with at least two sessions")]
    NoEligibleCourse,
    #[error("fork_features must be bound to its source job before expansion")]
    UnboundFork,
    #[error("source job has no {0} features to fork")]
    ForkMissingStage(&'static str),
}

/// Data covered by one task.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskScope {
    Session { course: String, session: String },
    Course { course: String },
    All,
}

impl TaskScope {
    pub fn course(&self) -> Option<&str> {
        match self {
            TaskScope::Session { course, .. } | TaskScope::Course { course } => Some(course),
            TaskScope::All => None,
        }
    }

    pub fn session(&self) -> Option<&str> {
        match self {
            TaskScope::Session { session, .. } => Some(session),
            _ => None,
        }
    }

    /// Whether this scope includes session `(course, session)`.
    pub fn covers(&self, course: &str, session: &str) -> bool {
        match self {
            TaskScope::Session {
                course: c,
                session: s,
            } => c == course && s == session,
            TaskScope::Course { course: c } => c == course,
            TaskScope::All => true,
        }
    }
}

impl fmt::Display for TaskScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskScope::Session { course, session } => write!(f, "{course}/{session}"),
            TaskScope::Course { course } => f.write_str(course),
            TaskScope::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    /// Index of the plan step this task came from.
    pub step: usize,
    /// Stage this task performs. Forked tasks carry the extract stage they
    /// stand in for.
    pub stage: Stage,
    pub granularity: Granularity,
    pub scope: TaskScope,
    pub depends_on: Vec<String>,
    /// Source job when the task is served from a forked job's features.
    pub forked_from: Option<String>,
}

impl Task {
    pub fn course_id(&self) -> Option<&str> {
        self.scope.course()
    }

    pub fn session_id(&self) -> Option<&str> {
        self.scope.session()
    }

    /// Whether the task runs user code in a sandbox.
    pub fn is_sandboxed(&self) -> bool {
        self.forked_from.is_none() && self.stage != Stage::Evaluate
    }

    /// Id of the matching extract task in the source job of a fork.
    pub fn fork_source_task_id(&self) -> Option<String> {
        self.forked_from
            .as_ref()
            .map(|_| format!("{}_{}@{}", self.stage, self.granularity, self.scope))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskGraph {
    pub tasks: Vec<Task>,
    pub plan: WorkflowPlan,
}

impl TaskGraph {
    pub fn task(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.task_id == id)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.task_id.as_str(), i))
            .collect()
    }

    /// Kahn's algorithm; `None` if the graph has a cycle or a dangling edge.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let index = self.index();
        let mut indegree = vec![0usize; self.tasks.len()];
        let mut children = vec![Vec::new(); self.tasks.len()];
        for (i, t) in self.tasks.iter().enumerate() {
            for d in &t.depends_on {
                let &j = index.get(d.as_str())?;
                indegree[i] += 1;
                children[j].push(i);
            }
        }
        let mut ready: Vec<usize> = (0..self.tasks.len())
            .filter(|&i| indegree[i] == 0)
            .collect();
        let mut order = Vec::with_capacity(self.tasks.len());
        while let Some(i) = ready.pop() {
            order.push(i);
            for &c in &children[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        (order.len() == self.tasks.len()).then_some(order)
    }

    pub fn count(&self, stage: Stage) -> usize {
        self.tasks.iter().filter(|t| t.stage == stage).count()
    }
}

/// Tasks produced by one step, in catalog order.
struct StepTasks {
    stage: Stage,
    granularity: Granularity,
    ids: Vec<(TaskScope, String)>,
}

impl StepTasks {
    fn covering(&self, course: &str, session: &str) -> Option<&str> {
        self.ids
            .iter()
            .find(|(scope, _)| scope.covers(course, session))
            .map(|(_, id)| id.as_str())
    }
}

/// Fans a validated plan out over the eligible courses of a catalog.
pub fn expand_tasks(plan: &ValidatedPlan, catalog: &Catalog) -> Result<TaskGraph, ExpandError> {
    let courses: Vec<_> = catalog.eligible_courses().collect();
    if courses.is_empty() {
        return Err(ExpandError::NoEligibleCourse);
    }
    let training: Vec<(&str, &str)> = courses
        .iter()
        .flat_map(|c| {
            c.training_sessions()
                .map(move |s| (c.course_id.as_str(), s.session_id.as_str()))
        })
        .collect();
    let holdouts: Vec<(&str, &str)> = courses
        .iter()
        .filter_map(|c| {
            c.holdout()
                .map(|s| (c.course_id.as_str(), s.session_id.as_str()))
        })
        .collect();

    let session_scope = |c: &str, s: &str| TaskScope::Session {
        course: c.to_string(),
        session: s.to_string(),
    };
    let scopes = |g: Granularity, sessions: &[(&str, &str)]| -> Vec<TaskScope> {
        match g {
            Granularity::Session => sessions.iter().map(|(c, s)| session_scope(c, s)).collect(),
            Granularity::Course => courses
                .iter()
                .map(|c| TaskScope::Course {
                    course: c.course_id.clone(),
                })
                .collect(),
            Granularity::All => vec![TaskScope::All],
        }
    };

    let mut tasks: Vec<Task> = Vec::new();
    let mut done: Vec<StepTasks> = Vec::new();

    for (step_idx, step) in plan.plan.steps.iter().enumerate() {
        let name = step.name();
        if step.stage == Stage::ForkFeatures {
            let binding = plan.fork.ok_or(ExpandError::UnboundFork)?;
            let source = step.fork_source.clone();
            let needs_train = plan.plan.has_stage(Stage::Train);
            let needs_test = plan.plan.has_stage(Stage::Test);
            for (stage, g, sessions, needed) in [
                (Stage::Extract, binding.extract, &training, needs_train),
                (
                    Stage::ExtractHoldout,
                    binding.extract_holdout,
                    &holdouts,
                    needs_test,
                ),
            ] {
                let Some(g) = g else {
                    if needed {
                        return Err(ExpandError::ForkMissingStage(stage.as_str()));
                    }
                    continue;
                };
                let mut ids = Vec::new();
                for scope in scopes(g, sessions) {
                    let id = format!("{name}[{stage}_{g}]@{scope}");
                    tasks.push(Task {
                        task_id: id.clone(),
                        step: step_idx,
                        stage,
                        granularity: g,
                        scope: scope.clone(),
                        depends_on: Vec::new(),
                        forked_from: source.clone(),
                    });
                    ids.push((scope, id));
                }
                done.push(StepTasks {
                    stage,
                    granularity: g,
                    ids,
                });
            }
            continue;
        }

        let g = step.granularity.expect("non-fork steps have granularity");
        let mut ids = Vec::new();
        let mut push =
            |scope: TaskScope, depends_on: Vec<String>, ids: &mut Vec<(TaskScope, String)>| {
                let id = format!("{name}@{scope}");
                tasks.push(Task {
                    task_id: id.clone(),
                    step: step_idx,
                    stage: step.stage,
                    granularity: g,
                    scope: scope.clone(),
                    depends_on,
                    forked_from: None,
                });
                ids.push((scope, id));
            };

        let latest = |stage: Stage| done.iter().rev().find(|st| st.stage == stage);

        match step.stage {
            Stage::Extract => {
                for scope in scopes(g, &training) {
                    push(scope, Vec::new(), &mut ids);
                }
            }
            Stage::ExtractHoldout => {
                for scope in scopes(g, &holdouts) {
                    push(scope, Vec::new(), &mut ids);
                }
            }
            Stage::Train => {
                let features = latest(Stage::Extract).expect("validated: extract precedes train");
                for scope in scopes(g, &training) {
                    let mut deps: Vec<String> = Vec::new();
                    for (c, s) in training.iter().filter(|(c, s)| scope.covers(c, s)) {
                        if let Some(id) = features.covering(c, s) {
                            if !deps.iter().any(|d| d == id) {
                                deps.push(id.to_string());
                            }
                        }
                    }
                    push(scope, deps, &mut ids);
                }
            }
            Stage::Test => {
                let train = done
                    .iter()
                    .rev()
                    .filter(|st| st.stage == Stage::Train)
                    .find(|st| st.granularity == g)
                    .or_else(|| {
                        done.iter()
                            .rev()
                            .find(|st| st.stage == Stage::Train && compatible(st.granularity, g))
                    })
                    .expect("validated: compatible train precedes test");
                let holdout = latest(Stage::ExtractHoldout)
                    .expect("validated: holdout extract precedes test");
                for course in &courses {
                    let Some(h) = course.holdout() else { continue };
                    let model = match train.granularity {
                        Granularity::Session => course
                            .training_sessions()
                            .last()
                            .and_then(|s| train.covering(&course.course_id, &s.session_id)),
                        _ => train.ids.iter().find_map(|(scope, id)| {
                            (scope.course().is_none()
                                || scope.course() == Some(course.course_id.as_str()))
                            .then_some(id.as_str())
                        }),
                    };
                    let mut deps = Vec::new();
                    deps.extend(model.map(str::to_string));
                    deps.extend(
                        holdout
                            .covering(&course.course_id, &h.session_id)
                            .map(str::to_string),
                    );
                    push(
                        session_scope(&course.course_id, &h.session_id),
                        deps,
                        &mut ids,
                    );
                }
            }
            Stage::Evaluate => {
                let test = latest(Stage::Test).expect("validated: test precedes evaluate");
                for course in &courses {
                    let Some(h) = course.holdout() else { continue };
                    let deps = test
                        .covering(&course.course_id, &h.session_id)
                        .map(|id| vec![id.to_string()])
                        .unwrap_or_default();
                    push(
                        session_scope(&course.course_id, &h.session_id),
                        deps,
                        &mut ids,
                    );
                }
            }
            Stage::ForkFeatures => unreachable!(),
        }
        done.push(StepTasks {
            stage: step.stage,
            granularity: g,
            ids,
        });
    }

    Ok(TaskGraph {
        tasks,
        plan: plan.plan.clone(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::bundle::ExportBundle;
    use crate::catalog::{designate_holdouts, Course, Session};
    use crate::dsl::{parse_script, validate_plan};

    fn catalog(sizes: &[u32]) -> Catalog {
        designate_holdouts(Catalog {
            courses: sizes
                .iter()
                .enumerate()
                .map(|(i, n)| Course {
                    course_id: format!("c{i}"),
                    sessions: (1..=*n)
                        .map(|s| Session {
                            session_id: format!("{s:03}"),
                            weeks: 4,
                            bundle: ExportBundle::new(format!("/raw/c{i}/{s:03}")),
                            is_holdout: false,
                        })
                        .collect(),
                    eligible: false,
                })
                .collect(),
            dataset_version: "v".into(),
        })
    }

    fn graph(script: &str, cat: &Catalog) -> Result<TaskGraph, ExpandError> {
        let plan = validate_plan(parse_script(script).unwrap(), None).unwrap();
        expand_tasks(&plan, cat)
    }

    const GRANULARITIES: [Granularity; 3] =
        [Granularity::Session, Granularity::Course, Granularity::All];

    #[test]
    fn listing_on_two_by_three() {
        let g = graph(
            "extract_session()\nextract_holdout_session()\ntrain_course(label_type = 'dropout')\n\
             test_course(label_type = 'dropout')\nevaluate_course(label_type = 'dropout')\n",
            &catalog(&[3, 3]),
        )
        .unwrap();
        assert_eq!(g.count(Stage::Extract), 4);
        assert_eq!(g.count(Stage::ExtractHoldout), 2);
        assert_eq!(g.count(Stage::Train), 2);
        assert_eq!(g.count(Stage::Test), 2);
        assert_eq!(g.count(Stage::Evaluate), 2);
        let test = g.task("test_course@c0/003").unwrap();
        assert_eq!(
            test.depends_on,
            ["train_course@c0", "extract_holdout_session@c0/003"]
        );
        assert_eq!(
            g.task("train_course@c0").unwrap().depends_on,
            ["extract_session@c0/001", "extract_session@c0/002"]
        );
    }

    #[test]
    fn no_eligible_course() {
        let err = graph("extract_session()\n", &catalog(&[1, 1])).unwrap_err();
        assert_eq!(err, ExpandError::NoEligibleCourse);
    }

    proptest! {
        #[test]
        fn task_counts_and_acyclicity(
            sizes in prop::collection::vec(1u32..5, 1..6),
            extract in 0usize..3,
            holdout in 0usize..3,
            train in 0usize..3,
        ) {
            let cat = catalog(&sizes);
            let (ge, gh, gt) = (GRANULARITIES[extract], GRANULARITIES[holdout], GRANULARITIES[train]);
            let gtest = if gt == Granularity::All { Granularity::Course } else { gt };
            let script = format!(
                "extract_{ge}()\nextract_holdout_{gh}()\ntrain_{gt}(label_type = 'dropout')\n\
                 test_{gtest}(label_type = 'dropout')\nevaluate_course(label_type = 'dropout')\n"
            );
            let eligible: Vec<u32> = sizes.iter().copied().filter(|&n| n >= 2).collect();
            let result = graph(&script, &cat);
            if eligible.is_empty() {
                prop_assert_eq!(result.unwrap_err(), ExpandError::NoEligibleCourse);
                return Ok(());
            }
            let g = result.unwrap();
            let expected = |gran: Granularity, sessions: usize| match gran {
                Granularity::Session => sessions,
                Granularity::Course => eligible.len(),
                Granularity::All => 1,
            };
            let training: usize = eligible.iter().map(|n| *n as usize - 1).sum();
            prop_assert_eq!(g.count(Stage::Extract), expected(ge, training));
            prop_assert_eq!(g.count(Stage::ExtractHoldout), expected(gh, eligible.len()));
            prop_assert_eq!(g.count(Stage::Train), expected(gt, training));
            prop_assert_eq!(g.count(Stage::Test), eligible.len());
            prop_assert!(g.topological_order().is_some());
            for t in &g.tasks {
                if t.depends_on.is_empty() {
                    prop_assert!(matches!(t.stage, Stage::Extract | Stage::ExtractHoldout), "{} has no inputs", t.task_id);
                }
                for d in &t.depends_on {
                    prop_assert!(g.task(d).is_some());
                }
            }
        }
    }
}
