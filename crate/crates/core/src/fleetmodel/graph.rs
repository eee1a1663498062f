use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::node::NodePhase;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub String);

impl ActionId {
    pub fn new(s: impl Into<String>) -> Self {
        ActionId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn faulted() -> NodePhase {
    NodePhase::Faulted
}

/// One legal phase change.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MutationEdge {
    pub from: NodePhase,
    pub to: NodePhase,
    pub action: ActionId,
    /// Expected duration in simulation ticks.
    pub duration: u64,
    #[serde(default = "faulted", rename = "failure_phase")]
    pub failure: NodePhase,
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("mutation graph file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("two edges leave {from} with action {action}")]
    DuplicateEdge { from: NodePhase, action: ActionId },
    #[error("edge {0} is a self-loop")]
    SelfLoop(ActionId),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("no path from {from} to {to}")]
    Unreachable { from: NodePhase, to: NodePhase },
    #[error("phase {0} does not appear in the mutation graph")]
    UnknownPhase(NodePhase),
}

pub const DEFAULT_GRAPH: &str = include_str!("../../data/default_graph.toml");

#[derive(Deserialize)]
struct GraphFile {
    #[serde(default, rename = "edge")]
    edges: Vec<MutationEdge>,
}

/// Directed multigraph over [`NodePhase`]. Static for the life of a scenario.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MutationGraph {
    edges: Vec<MutationEdge>,
    outgoing: BTreeMap<NodePhase, Vec<usize>>,
    incoming: BTreeMap<NodePhase, Vec<usize>>,
}

impl Default for MutationGraph {
    fn default() -> Self {
        Self::from_toml(DEFAULT_GRAPH).expect("bundled mutation graph is valid")
    }
}

impl MutationGraph {
    pub fn new(edges: Vec<MutationEdge>) -> Result<Self, GraphError> {
        let mut outgoing: BTreeMap<NodePhase, Vec<usize>> = BTreeMap::new();
        let mut incoming: BTreeMap<NodePhase, Vec<usize>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (i, e) in edges.iter().enumerate() {
            if e.from == e.to {
                return Err(GraphError::SelfLoop(e.action.clone()));
            }
            if !seen.insert((e.from, e.action.clone())) {
                return Err(GraphError::DuplicateEdge {
                    from: e.from,
                    action: e.action.clone(),
                });
            }
            outgoing.entry(e.from).or_default().push(i);
            incoming.entry(e.to).or_default().push(i);
        }
        // Deterministic neighbor order: by action id, then target phase.
        for list in outgoing.values_mut() {
            list.sort_by(|&a, &b| {
                (&edges[a].action, edges[a].to).cmp(&(&edges[b].action, edges[b].to))
            });
        }
        Ok(MutationGraph {
            edges,
            outgoing,
            incoming,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, GraphError> {
        let file: GraphFile = toml::from_str(text)?;
        Self::new(file.edges)
    }

    pub fn edges(&self) -> &[MutationEdge] {
        &self.edges
    }

    pub fn contains_phase(&self, phase: NodePhase) -> bool {
        self.outgoing.contains_key(&phase) || self.incoming.contains_key(&phase)
    }

    pub fn has_action(&self, action: &str) -> bool {
        self.edges.iter().any(|e| e.action.0 == action)
    }

    pub fn outgoing(&self, phase: NodePhase) -> impl Iterator<Item = &MutationEdge> {
        self.outgoing
            .get(&phase)
            .into_iter()
            .flatten()
            .map(|&i| &self.edges[i])
    }

    /// The edge leaving `from` labelled `action`.
    pub fn edge(&self, from: NodePhase, action: &str) -> Option<&MutationEdge> {
        self.outgoing(from).find(|e| e.action.0 == action)
    }

    /// Shortest plan from `current` to `desired`; among shortest plans, the
    /// one whose action sequence is lexicographically smallest.
    pub fn plan_mutations(
        &self,
        current: NodePhase,
        desired: NodePhase,
    ) -> Result<Vec<MutationEdge>, PlanError> {
        self.plan_with(current, desired, |_| true)
    }

    /// Like [`plan_mutations`](Self::plan_mutations) but only over edges
    /// accepted by `usable`.
    pub fn plan_with(
        &self,
        current: NodePhase,
        desired: NodePhase,
        usable: impl Fn(&MutationEdge) -> bool,
    ) -> Result<Vec<MutationEdge>, PlanError> {
        if current == desired {
            return Ok(Vec::new());
        }
        for p in [current, desired] {
            if !self.contains_phase(p) {
                return Err(PlanError::UnknownPhase(p));
            }
        }
        // Distances to `desired`, by breadth-first search over reversed edges.
        let mut dist: BTreeMap<NodePhase, usize> = BTreeMap::from([(desired, 0)]);
        let mut queue = VecDeque::from([desired]);
        while let Some(p) = queue.pop_front() {
            let d = dist[&p];
            for &i in self.incoming.get(&p).into_iter().flatten() {
                let e = &self.edges[i];
                if usable(e) && !dist.contains_key(&e.from) {
                    dist.insert(e.from, d + 1);
                    queue.push_back(e.from);
                }
            }
        }
        let unreachable = PlanError::Unreachable {
            from: current,
            to: desired,
        };
        let mut remaining = *dist.get(&current).ok_or(unreachable)?;
        let mut at = current;
        let mut plan = Vec::with_capacity(remaining);
        while remaining > 0 {
            // outgoing() is sorted by action id, so the first edge that makes
            // progress gives the lexicographically smallest plan.
            let step = self
                .outgoing(at)
                .find(|e| usable(e) && dist.get(&e.to) == Some(&(remaining - 1)))
                .expect("distance labels guarantee a successor");
            plan.push(step.clone());
            at = step.to;
            remaining -= 1;
        }
        Ok(plan)
    }
}
