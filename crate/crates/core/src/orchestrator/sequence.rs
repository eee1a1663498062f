use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::{
    resume, Checkpoint, CheckpointBody, CheckpointHeader, CheckpointStore, Resumption, Safety,
    TaskKind,
};
use super::OrchestratorError;
use crate::digest::Digest;
use crate::fleetmodel::NodeId;

/// A service or node group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vertex {
    pub name: String,
    #[serde(default)]
    pub nodes: Vec<NodeId>,
}

/// `before` must be ready before `after` starts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagEdge {
    pub before: String,
    pub after: String,
}

#[derive(Serialize, Deserialize)]
struct DagFile {
    #[serde(default, rename = "vertex")]
    vertices: Vec<Vertex>,
    #[serde(default, rename = "edge")]
    edges: Vec<DagEdge>,
}

/// Acyclic "must be ready before" graph over vertices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencyDag {
    vertices: BTreeMap<String, Vertex>,
    edges: Vec<DagEdge>,
    succ: BTreeMap<String, BTreeSet<String>>,
    pred: BTreeMap<String, BTreeSet<String>>,
}

impl DependencyDag {
    pub fn new(vertices: Vec<Vertex>, edges: Vec<DagEdge>) -> Result<Self, OrchestratorError> {
        let mut map = BTreeMap::new();
        for v in vertices {
            if v.name.is_empty() {
                return Err(OrchestratorError::Validation(
                    "vertex with empty name".into(),
                ));
            }
            let name = v.name.clone();
            if map.insert(name.clone(), v).is_some() {
                return Err(OrchestratorError::DuplicateName(name));
            }
        }
        let mut succ: BTreeMap<String, BTreeSet<String>> =
            map.keys().map(|k| (k.clone(), BTreeSet::new())).collect();
        let mut pred = succ.clone();
        for e in &edges {
            for end in [&e.before, &e.after] {
                if !map.contains_key(end) {
                    return Err(OrchestratorError::UnknownVertex(end.clone()));
                }
            }
            succ.get_mut(&e.before).unwrap().insert(e.after.clone());
            pred.get_mut(&e.after).unwrap().insert(e.before.clone());
        }
        let dag = DependencyDag {
            vertices: map,
            edges,
            succ,
            pred,
        };
        dag.topo_order()?;
        Ok(dag)
    }

    pub fn from_toml(text: &str) -> Result<Self, OrchestratorError> {
        let f: DagFile =
            toml::from_str(text).map_err(|e| OrchestratorError::Validation(e.to_string()))?;
        Self::new(f.vertices, f.edges)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&DagFile {
            vertices: self.vertices.values().cloned().collect(),
            edges: self.edges.clone(),
        })
        .expect("dags serialize")
    }

    pub fn vertex(&self, name: &str) -> Option<&Vertex> {
        self.vertices.get(name)
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Kahn's algorithm; among ready vertices the smallest name goes first.
    pub fn topo_order(&self) -> Result<Vec<String>, OrchestratorError> {
        let mut indeg: BTreeMap<&str, usize> = self
            .pred
            .iter()
            .map(|(k, p)| (k.as_str(), p.len()))
            .collect();
        let mut ready: BTreeSet<&str> = indeg
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(k, _)| *k)
            .collect();
        let mut order = Vec::with_capacity(self.vertices.len());
        while let Some(v) = ready.pop_first() {
            order.push(v.to_string());
            for s in &self.succ[v] {
                let d = indeg.get_mut(s.as_str()).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() == self.vertices.len() {
            return Ok(order);
        }
        // Walk unresolved vertices until one repeats; the repeat closes a cycle.
        let stuck: BTreeSet<&str> = indeg
            .iter()
            .filter(|(_, d)| **d > 0)
            .map(|(k, _)| *k)
            .collect();
        let mut path: Vec<&str> = vec![stuck.first().copied().unwrap()];
        loop {
            let at = *path.last().unwrap();
            let next = self.pred[at]
                .iter()
                .map(String::as_str)
                .find(|p| stuck.contains(p))
                .expect("an unresolved vertex has an unresolved predecessor");
            if let Some(i) = path.iter().position(|p| *p == next) {
                let mut cycle: Vec<String> =
                    path[i..].iter().rev().map(|s| s.to_string()).collect();
                let min = (0..cycle.len()).min_by_key(|&k| &cycle[k]).unwrap();
                cycle.rotate_left(min);
                cycle.push(cycle[0].clone());
                return Err(OrchestratorError::CyclicDependency(cycle));
            }
            path.push(next);
        }
    }

    pub fn order(&self, direction: Direction) -> Vec<String> {
        let mut o = self.topo_order().expect("validated at construction");
        if direction == Direction::Shutdown {
            o.reverse();
        }
        o
    }

    /// Vertices that must wait for `v` in `direction`, transitively.
    pub fn dependents(&self, v: &str, direction: Direction) -> BTreeSet<String> {
        let next = match direction {
            Direction::Startup => &self.succ,
            Direction::Shutdown => &self.pred,
        };
        let mut seen = BTreeSet::new();
        let mut stack = vec![v.to_string()];
        while let Some(x) = stack.pop() {
            for y in next.get(&x).into_iter().flatten() {
                if seen.insert(y.clone()) {
                    stack.push(y.clone());
                }
            }
        }
        seen
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Startup,
    Shutdown,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Startup => "startup",
            Direction::Shutdown => "shutdown",
        })
    }
}

impl FromStr for Direction {
    type Err = OrchestratorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "startup" => Ok(Direction::Startup),
            "shutdown" => Ok(Direction::Shutdown),
            _ => Err(OrchestratorError::Validation(format!(
                "direction must be startup or shutdown, not {s:?}"
            ))),
        }
    }
}

/// Brings vertices up or down and reports on them.
pub trait VertexExecutor {
    fn start(&mut self, vertex: &Vertex) -> Result<(), String>;
    fn stop(&mut self, vertex: &Vertex) -> Result<(), String>;
    /// Whether `vertex` has reached the state `direction` asks for. May
    /// advance time before answering.
    fn ready(&mut self, vertex: &Vertex, direction: Direction) -> bool;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceOptions {
    /// Readiness probes after the first one before a vertex is declared failed.
    pub readiness_retries: u32,
}

impl Default for SequenceOptions {
    fn default() -> Self {
        SequenceOptions {
            readiness_retries: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "detail", rename_all = "snake_case")]
pub enum VertexOutcome {
    Ready,
    NotReady,
    ExecFailed(String),
    /// Never started because a vertex it depends on failed.
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VertexReport {
    pub vertex: String,
    pub outcome: VertexOutcome,
    pub probes: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub task_id: String,
    pub direction: Direction,
    pub order: Vec<String>,
    /// In execution order.
    pub vertices: Vec<VertexReport>,
}

impl SequenceReport {
    pub fn succeeded(&self) -> bool {
        self.vertices.len() == self.order.len()
            && self
                .vertices
                .iter()
                .all(|v| v.outcome == VertexOutcome::Ready)
    }

    pub fn first_failure(&self) -> Option<&VertexReport> {
        self.vertices.iter().find(|v| {
            matches!(
                v.outcome,
                VertexOutcome::NotReady | VertexOutcome::ExecFailed(_)
            )
        })
    }
}

#[derive(Serialize, Deserialize, PartialEq)]
struct SequenceParams {
    dag: Digest,
    direction: Direction,
}

/// Runs `dag` in topological order (reverse order for shutdown), verifying
/// each vertex before its dependents begin. Progress is checkpointed under
/// `task_id` after every vertex; sequences are safe to repeat, so a lost
/// checkpoint body restarts from the first vertex.
pub fn run_sequence(
    task_id: &str,
    dag: &DependencyDag,
    direction: Direction,
    executor: &mut dyn VertexExecutor,
    options: SequenceOptions,
    checkpoints: &dyn CheckpointStore,
) -> Result<SequenceReport, OrchestratorError> {
    let order = dag.order(direction);
    let params = SequenceParams {
        dag: Digest::of(dag.to_toml().as_bytes()),
        direction,
    };
    let header = CheckpointHeader {
        task_id: task_id.to_string(),
        kind: TaskKind::Sequence,
        safety: Safety::SafeToRepeat,
        params: serde_json::to_value(&params).expect("params serialize"),
    };
    let mut report = SequenceReport {
        task_id: task_id.to_string(),
        direction,
        order: order.clone(),
        vertices: Vec::new(),
    };

    if let Some(bytes) = checkpoints.load(task_id)? {
        let same = |h: &CheckpointHeader| h.kind == TaskKind::Sequence && h.params == header.params;
        match resume(&bytes)? {
            Resumption::NoOp => {
                let (h, body) = Checkpoint::decode(&bytes);
                if h.as_ref().is_some_and(same) {
                    if let Some(r) = body.and_then(|b| serde_json::from_value(b.state).ok()) {
                        return Ok(r);
                    }
                }
                return Err(OrchestratorError::Validation(format!(
                    "task {task_id} already exists with other parameters"
                )));
            }
            Resumption::Resume(c) => {
                if !same(&c.header) {
                    return Err(OrchestratorError::Validation(format!(
                        "task {task_id} already exists with other parameters"
                    )));
                }
                let prior: SequenceReport = serde_json::from_value(c.body.state)
                    .map_err(|e| OrchestratorError::CheckpointInvalid(format!("{task_id}: {e}")))?;
                report.vertices = prior.vertices;
                report.vertices.truncate(c.body.cursor as usize);
                log::info!("{task_id}: resuming at vertex {}", report.vertices.len());
            }
            Resumption::Restart(h) => {
                if !same(&h) {
                    return Err(OrchestratorError::Validation(format!(
                        "task {task_id} already exists with other parameters"
                    )));
                }
                log::warn!("{task_id}: progress unreadable, repeating from the start");
            }
        }
    }

    let save =
        |report: &SequenceReport, cursor: usize, complete: bool| -> Result<(), OrchestratorError> {
            let c = Checkpoint {
                header: header.clone(),
                body: CheckpointBody {
                    cursor: cursor as u64,
                    completed: Digest::of_parts(order[..cursor].iter()),
                    state: serde_json::to_value(report).expect("reports serialize"),
                    complete,
                },
            };
            checkpoints.save(task_id, c.encode())?;
            Ok(())
        };

    let mut aborted: BTreeSet<String> = BTreeSet::new();
    for r in &report.vertices {
        if matches!(
            r.outcome,
            VertexOutcome::NotReady | VertexOutcome::ExecFailed(_)
        ) {
            aborted.extend(dag.dependents(&r.vertex, direction));
        }
    }
    for name in order.iter().skip(report.vertices.len()) {
        let vertex = dag.vertex(name).expect("order lists known vertices");
        let (outcome, probes) = if aborted.contains(name) {
            (VertexOutcome::Aborted, 0)
        } else {
            let run = match direction {
                Direction::Startup => executor.start(vertex),
                Direction::Shutdown => executor.stop(vertex),
            };
            match run {
                Err(e) => (VertexOutcome::ExecFailed(e), 0),
                Ok(()) => {
                    let mut probes = 0;
                    let mut ok = false;
                    while probes <= options.readiness_retries {
                        probes += 1;
                        if executor.ready(vertex, direction) {
                            ok = true;
                            break;
                        }
                    }
                    (
                        if ok {
                            VertexOutcome::Ready
                        } else {
                            VertexOutcome::NotReady
                        },
                        probes,
                    )
                }
            }
        };
        if !matches!(outcome, VertexOutcome::Ready | VertexOutcome::Aborted) {
            log::warn!("{task_id}: {name} failed ({outcome:?}); aborting its dependents");
            aborted.extend(dag.dependents(name, direction));
        }
        report.vertices.push(VertexReport {
            vertex: name.clone(),
            outcome,
            probes,
        });
        save(&report, report.vertices.len(), false)?;
    }

    match report.first_failure().map(|f| f.vertex.clone()) {
        None => {
            save(&report, order.len(), true)?;
            Ok(report)
        }
        Some(vertex) => {
            // A later run repeats from the first failure.
            let at = order.iter().position(|v| *v == vertex).unwrap();
            save(&report, at, false)?;
            Err(OrchestratorError::ReadinessFailed {
                vertex,
                report: Box::new(report),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::checkpoint::MemCheckpoints;

    fn dag(names: &[&str], edges: &[(&str, &str)]) -> Result<DependencyDag, OrchestratorError> {
        DependencyDag::new(
            names
                .iter()
                .map(|n| Vertex {
                    name: n.to_string(),
                    nodes: vec![],
                })
                .collect(),
            edges
                .iter()
                .map(|(a, b)| DagEdge {
                    before: a.to_string(),
                    after: b.to_string(),
                })
                .collect(),
        )
    }

    #[derive(Default)]
    struct Script {
        never_ready: BTreeSet<String>,
        calls: Vec<String>,
    }

    impl VertexExecutor for Script {
        fn start(&mut self, v: &Vertex) -> Result<(), String> {
            self.calls.push(format!("start {}", v.name));
            Ok(())
        }
        fn stop(&mut self, v: &Vertex) -> Result<(), String> {
            self.calls.push(format!("stop {}", v.name));
            Ok(())
        }
        fn ready(&mut self, v: &Vertex, _: Direction) -> bool {
            !self.never_ready.contains(&v.name)
        }
    }

    #[test]
    fn startup_and_shutdown_order() {
        let d = dag(&["a", "b"], &[("a", "b")]).unwrap();
        assert_eq!(d.order(Direction::Startup), ["a", "b"]);
        assert_eq!(d.order(Direction::Shutdown), ["b", "a"]);
        let ck = MemCheckpoints::new();
        let mut ex = Script::default();
        let r = run_sequence(
            "s1",
            &d,
            Direction::Shutdown,
            &mut ex,
            SequenceOptions::default(),
            &ck,
        )
        .unwrap();
        assert!(r.succeeded());
        assert_eq!(ex.calls, ["stop b", "stop a"]);
    }

    #[test]
    fn cycle_is_reported() {
        match dag(&["a", "b", "c"], &[("a", "b"), ("b", "a"), ("b", "c")]) {
            Err(OrchestratorError::CyclicDependency(c)) => assert_eq!(c, ["a", "b", "a"]),
            other => panic!("{other:?}"),
        }
        assert!(
            matches!(dag(&["a"], &[("a", "z")]), Err(OrchestratorError::UnknownVertex(v)) if v == "z")
        );
    }

    #[test]
    fn readiness_failure_aborts_dependents_only() {
        let d = dag(&["a", "b", "c", "x"], &[("a", "b"), ("b", "c")]).unwrap();
        let ck = MemCheckpoints::new();
        let mut ex = Script {
            never_ready: ["a".to_string()].into(),
            ..Default::default()
        };
        let opts = SequenceOptions {
            readiness_retries: 0,
        };
        let err = run_sequence("s", &d, Direction::Startup, &mut ex, opts, &ck).unwrap_err();
        let OrchestratorError::ReadinessFailed { vertex, report } = err else {
            panic!("wrong error");
        };
        assert_eq!(vertex, "a");
        assert_eq!(ex.calls, ["start a", "start x"]);
        let outcomes: Vec<_> = report
            .vertices
            .iter()
            .map(|v| (v.vertex.as_str(), v.outcome.clone()))
            .collect();
        assert_eq!(
            outcomes,
            [
                ("a", VertexOutcome::NotReady),
                ("b", VertexOutcome::Aborted),
                ("c", VertexOutcome::Aborted),
                ("x", VertexOutcome::Ready),
            ]
        );
        assert_eq!(report.vertices[0].probes, 1);
    }

    #[test]
    fn resumes_or_repeats() {
        let d = dag(&["a", "b", "c"], &[("a", "b"), ("b", "c")]).unwrap();
        let ck = MemCheckpoints::new();
        let mut ex = Script {
            never_ready: ["b".to_string()].into(),
            ..Default::default()
        };
        let opts = SequenceOptions {
            readiness_retries: 1,
        };
        assert!(run_sequence("s", &d, Direction::Startup, &mut ex, opts, &ck).is_err());
        ex.never_ready.clear();
        ex.calls.clear();
        let r = run_sequence("s", &d, Direction::Startup, &mut ex, opts, &ck).unwrap();
        assert!(r.succeeded());
        assert_eq!(ex.calls, ["start b", "start c"]);
        ex.calls.clear();
        assert_eq!(
            run_sequence("s", &d, Direction::Startup, &mut ex, opts, &ck).unwrap(),
            r
        );
        assert!(ex.calls.is_empty());

        // Damaged progress of a repeatable task: start over.
        let ck2 = MemCheckpoints::new();
        run_sequence("t", &d, Direction::Startup, &mut ex, opts, &ck2).unwrap();
        ck2.with_raw(|m| {
            let b = m.get_mut("t").unwrap();
            let last = b.len() - 3;
            b[last] ^= 0x10;
        });
        ex.calls.clear();
        run_sequence("t", &d, Direction::Startup, &mut ex, opts, &ck2).unwrap();
        assert_eq!(ex.calls, ["start a", "start b", "start c"]);
    }

    #[test]
    fn dag_file_format() {
        let d = DependencyDag::from_toml(
            r#"
            [[vertex]]
            name = "storage"
            nodes = ["n00000"]
            [[vertex]]
            name = "compute"
            [[edge]]
            before = "storage"
            after = "compute"
            "#,
        )
        .unwrap();
        assert_eq!(d.order(Direction::Startup), ["storage", "compute"]);
        assert_eq!(DependencyDag::from_toml(&d.to_toml()).unwrap(), d);
    }
}
