//! Node lifecycle model: phases, the mutation graph, and identity derived
//! from a node's position in the network topology.

mod graph;
mod identity;
mod node;

pub use graph::{ActionId, GraphError, MutationEdge, MutationGraph, PlanError, DEFAULT_GRAPH};
pub use identity::{derive_identity, Identity, SitePrefix};
pub use node::{
    apply_transition, MacAddr, NodeId, NodePhase, NodeRecord, Outcome, TopologyLocation,
    TransitionError,
};
