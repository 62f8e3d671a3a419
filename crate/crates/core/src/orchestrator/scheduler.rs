use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dsl::TaskGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Start,
    Finish,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub task: usize,
    pub kind: TraceKind,
    /// Time since the schedule began.
    pub at: Duration,
    pub worker: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum TaskOutcome {
    Succeeded,
    Failed { reason: String },
    Skipped { blocked_by: usize },
}

/// What happened while running a dependency graph, in recorded order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub events: Vec<TraceEvent>,
    pub outcomes: Vec<TaskOutcome>,
    pub makespan: Duration,
    pub workers: usize,
}

impl ExecutionTrace {
    /// Largest number of tasks in flight at once.
    pub fn max_concurrency(&self) -> usize {
        let mut running = 0usize;
        let mut peak = 0;
        for e in &self.events {
            match e.kind {
                TraceKind::Start => {
                    running += 1;
                    peak = peak.max(running);
                }
                TraceKind::Finish | TraceKind::Fail => running -= 1,
                TraceKind::Skip => {}
            }
        }
        peak
    }

    fn position(&self, task: usize, kinds: &[TraceKind]) -> Option<usize> {
        self.events
            .iter()
            .position(|e| e.task == task && kinds.contains(&e.kind))
    }

    pub fn start_index(&self, task: usize) -> Option<usize> {
        self.position(task, &[TraceKind::Start])
    }

    pub fn end_index(&self, task: usize) -> Option<usize> {
        self.position(task, &[TraceKind::Finish, TraceKind::Fail])
    }

    pub fn succeeded(&self, task: usize) -> bool {
        self.outcomes[task] == TaskOutcome::Succeeded
    }

    /// Checks the trace against `deps`: every started task's dependencies
    /// finished successfully before it started, failed tasks' dependents
    /// were skipped, and no more than `workers` tasks ran at once.
    pub fn check(&self, deps: &[Vec<usize>]) -> Result<(), String> {
        if self.max_concurrency() > self.workers {
            return Err(format!(
                "{} tasks in flight with {} workers",
                self.max_concurrency(),
                self.workers
            ));
        }
        for (t, ds) in deps.iter().enumerate() {
            match (&self.outcomes[t], self.start_index(t)) {
                (TaskOutcome::Skipped { .. }, Some(_)) => {
                    return Err(format!("skipped task {t} started"))
                }
                (TaskOutcome::Skipped { .. }, None) => {
                    if ds.iter().all(|&d| self.succeeded(d)) {
                        return Err(format!(
                            "task {t} skipped although its dependencies succeeded"
                        ));
                    }
                }
                (_, None) => return Err(format!("task {t} never started")),
                (_, Some(start)) => {
                    for &d in ds {
                        match self.end_index(d) {
                            Some(end) if end < start && self.succeeded(d) => {}
                            _ => {
                                return Err(format!(
                                    "task {t} started before dependency {d} succeeded"
                                ))
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Slot {
    Waiting(usize),
    Ready,
    Running,
    Done,
}

struct State {
    slots: Vec<Slot>,
    ready: VecDeque<usize>,
    remaining: usize,
    events: Vec<TraceEvent>,
    outcomes: Vec<Option<TaskOutcome>>,
}

impl State {
    fn skip_dependents(&mut self, root: usize, children: &[Vec<usize>], at: Duration) {
        let mut stack = vec![root];
        while let Some(t) = stack.pop() {
            for &c in &children[t] {
                if matches!(self.slots[c], Slot::Waiting(_)) {
                    self.slots[c] = Slot::Done;
                    self.outcomes[c] = Some(TaskOutcome::Skipped { blocked_by: root });
                    self.events.push(TraceEvent {
                        task: c,
                        kind: TraceKind::Skip,
                        at,
                        worker: None,
                    });
                    self.remaining -= 1;
                    stack.push(c);
                }
            }
        }
    }
}

/// Runs tasks `0..deps.len()` on `workers` threads. `deps[t]` lists the
/// tasks that must succeed before `t` starts. A failed task causes all of
/// its transitive dependents to be skipped. Tasks caught in a cycle or
/// depending on an unknown index are skipped.
pub fn schedule<F>(deps: &[Vec<usize>], workers: usize, exec: F) -> ExecutionTrace
where
    F: Fn(usize) -> Result<(), String> + Sync,
{
    let n = deps.len();
    let workers = workers.max(1);
    let mut children = vec![Vec::new(); n];
    let mut slots = Vec::with_capacity(n);
    let mut outcomes = vec![None; n];
    let mut remaining = n;
    for (t, ds) in deps.iter().enumerate() {
        if ds.iter().any(|&d| d >= n) {
            slots.push(Slot::Done);
            outcomes[t] = Some(TaskOutcome::Skipped { blocked_by: t });
            remaining -= 1;
            continue;
        }
        for &d in ds {
            children[d].push(t);
        }
        slots.push(if ds.is_empty() {
            Slot::Ready
        } else {
            Slot::Waiting(ds.len())
        });
    }
    let ready = (0..n).filter(|&t| slots[t] == Slot::Ready).collect();
    let mut state = State {
        slots,
        ready,
        remaining,
        events: Vec::new(),
        outcomes,
    };
    for t in 0..n {
        if state.outcomes[t].is_some() {
            state.skip_dependents(t, &children, Duration::ZERO);
        }
    }
    mark_cycles(&mut state, deps, &children);

    let begin = Instant::now();
    let shared = Mutex::new(state);
    let wake = Condvar::new();
    std::thread::scope(|scope| {
        for w in 0..workers {
            let (shared, wake, exec, children) = (&shared, &wake, &exec, &children);
            scope.spawn(move || loop {
                let task = {
                    let mut st = shared.lock().expect("scheduler lock");
                    loop {
                        if st.remaining == 0 {
                            return;
                        }
                        if let Some(t) = st.ready.pop_front() {
                            st.slots[t] = Slot::Running;
                            st.events.push(TraceEvent {
                                task: t,
                                kind: TraceKind::Start,
                                at: begin.elapsed(),
                                worker: Some(w),
                            });
                            break t;
                        }
                        st = wake.wait(st).expect("scheduler lock");
                    }
                };
                let result = exec(task);
                let mut st = shared.lock().expect("scheduler lock");
                let at = begin.elapsed();
                st.slots[task] = Slot::Done;
                st.remaining -= 1;
                match result {
                    Ok(()) => {
                        st.events.push(TraceEvent {
                            task,
                            kind: TraceKind::Finish,
                            at,
                            worker: Some(w),
                        });
                        st.outcomes[task] = Some(TaskOutcome::Succeeded);
                        for &c in &children[task] {
                            if let Slot::Waiting(k) = st.slots[c] {
                                if k == 1 {
                                    st.slots[c] = Slot::Ready;
                                    st.ready.push_back(c);
                                } else {
                                    st.slots[c] = Slot::Waiting(k - 1);
                                }
                            }
                        }
                    }
                    Err(reason) => {
                        st.events.push(TraceEvent {
                            task,
                            kind: TraceKind::Fail,
                            at,
                            worker: Some(w),
                        });
                        st.outcomes[task] = Some(TaskOutcome::Failed { reason });
                        st.skip_dependents(task, children, at);
                    }
                }
                drop(st);
                wake.notify_all();
            });
        }
    });

    let state = shared.into_inner().expect("scheduler lock");
    ExecutionTrace {
        events: state.events,
        outcomes: state
            .outcomes
            .into_iter()
            .map(|o| o.expect("every task resolved"))
            .collect(),
        makespan: begin.elapsed(),
        workers,
    }
}

/// Skips tasks that can never become ready because they sit on a cycle.
fn mark_cycles(state: &mut State, deps: &[Vec<usize>], children: &[Vec<usize>]) {
    let n = deps.len();
    let mut indegree: Vec<usize> = deps.iter().map(Vec::len).collect();
    let mut queue: Vec<usize> = (0..n).filter(|&t| indegree[t] == 0).collect();
    let mut seen = vec![false; n];
    while let Some(t) = queue.pop() {
        seen[t] = true;
        for &c in &children[t] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                queue.push(c);
            }
        }
    }
    for t in 0..n {
        if !seen[t] && state.outcomes[t].is_none() {
            state.slots[t] = Slot::Done;
            state.outcomes[t] = Some(TaskOutcome::Skipped { blocked_by: t });
            state.events.push(TraceEvent {
                task: t,
                kind: TraceKind::Skip,
                at: Duration::ZERO,
                worker: None,
            });
            state.remaining -= 1;
        }
    }
}

/// Dependency lists of a task graph by task index.
pub fn graph_deps(graph: &TaskGraph) -> Vec<Vec<usize>> {
    let index = graph.index();
    graph
        .tasks
        .iter()
        .map(|t| {
            t.depends_on
                .iter()
                .map(|d| index.get(d.as_str()).copied().unwrap_or(usize::MAX))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    const UNIT: Duration = Duration::from_millis(60);

    #[test]
    fn ten_unit_tasks_on_five_workers() {
        let deps = vec![Vec::new(); 10];
        let trace = schedule(&deps, 5, |_| {
            std::thread::sleep(UNIT);
            Ok(())
        });
        trace.check(&deps).unwrap();
        assert_eq!(trace.max_concurrency(), 5);
        assert!(trace.makespan >= UNIT * 2);
        assert!(trace.makespan < UNIT * 3, "{:?}", trace.makespan);
    }

    #[test]
    fn parallel_speedup() {
        let deps = vec![Vec::new(); 8];
        let sleep = |_| {
            std::thread::sleep(UNIT);
            Ok(())
        };
        let serial = schedule(&deps, 1, sleep).makespan;
        for k in [2u32, 4] {
            let trace = schedule(&deps, k as usize, sleep);
            assert!(
                trace.makespan <= serial / k + UNIT,
                "k={k}: {:?} vs {serial:?}",
                trace.makespan
            );
        }
    }

    #[test]
    fn chain_runs_sequentially() {
        let deps = vec![vec![], vec![0], vec![1]];
        let trace = schedule(&deps, 5, |_| Ok(()));
        let kinds: Vec<_> = trace.events.iter().map(|e| (e.task, e.kind)).collect();
        assert_eq!(
            kinds,
            [
                (0, TraceKind::Start),
                (0, TraceKind::Finish),
                (1, TraceKind::Start),
                (1, TraceKind::Finish),
                (2, TraceKind::Start),
                (2, TraceKind::Finish)
            ]
        );
    }

    #[test]
    fn failure_skips_transitive_dependents() {
        let deps = vec![vec![], vec![0], vec![1], vec![], vec![2, 3]];
        let trace = schedule(
            &deps,
            2,
            |t| if t == 1 { Err("boom".into()) } else { Ok(()) },
        );
        trace.check(&deps).unwrap();
        assert_eq!(trace.outcomes[2], TaskOutcome::Skipped { blocked_by: 1 });
        assert_eq!(trace.outcomes[4], TaskOutcome::Skipped { blocked_by: 1 });
        assert!(trace.succeeded(3));
    }

    #[test]
    fn cycles_and_dangling_edges_are_skipped() {
        let deps = vec![vec![1], vec![0], vec![], vec![9]];
        let trace = schedule(&deps, 2, |_| Ok(()));
        assert!(trace.succeeded(2));
        assert!(matches!(trace.outcomes[0], TaskOutcome::Skipped { .. }));
        assert!(matches!(trace.outcomes[3], TaskOutcome::Skipped { .. }));
    }

    #[test]
    fn concurrency_never_exceeds_workers() {
        let in_flight = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let deps = vec![Vec::new(); 24];
        let trace = schedule(&deps, 3, |_| {
            let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            in_flight.fetch_sub(1, Ordering::SeqCst);
            Ok(())
        });
        assert!(peak.load(Ordering::SeqCst) <= 3);
        assert!(trace.max_concurrency() <= 3);
    }

    fn dag() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<bool>, usize)> {
        (1usize..16).prop_flat_map(|n| {
            (
                (0..n)
                    .map(|t| {
                        prop::collection::btree_set(0..t.max(1), 0..=t.min(3))
                            .prop_map(move |s| s.into_iter().filter(|&d| d < t).collect::<Vec<_>>())
                    })
                    .collect::<Vec<_>>(),
                prop::collection::vec(prop::bool::weighted(0.2), n),
                1usize..6,
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn random_failures_respect_dependencies((deps, fail, workers) in dag()) {
            let trace = schedule(&deps, workers, |t| if fail[t] { Err(format!("injected {t}")) } else { Ok(()) });
            prop_assert!(trace.check(&deps).is_ok(), "{:?}", trace.check(&deps));
            for t in 0..deps.len() {
                let ran = trace.start_index(t).is_some();
                prop_assert_eq!(matches!(trace.outcomes[t], TaskOutcome::Failed { .. }), ran && fail[t]);
            }
        }
    }
}
