//! Converges facts toward desires.
//!
//! The [`Orchestrator`] holds the orchestration lease, plans node mutations
//! for every diff between desires and facts, and hands the resulting
//! actions to a [`Dispatcher`] after recording each decision as an intent
//! fact. Long-running tasks (rolling updates, ordered startup and shutdown)
//! persist [`Checkpoint`]s so a restarted orchestrator can resume them or,
//! when safe, repeat them.

mod checkpoint;
mod flows;
mod reconcile;
mod remediate;
mod rollout;
mod sequence;
mod work;

use std::io;

pub use checkpoint::{
    resume, Checkpoint, CheckpointBody, CheckpointHeader, CheckpointStore, DirCheckpoints,
    MemCheckpoints, Resumption, Safety, TaskKind,
};
pub use flows::{FlowClause, FlowDefinition, FlowTable, REBOOT_AFTER_JOB, REBOOT_ON_FAULT};
pub use reconcile::{heartbeat_key, plan_for_node, NodeView, Orchestrator, ReconcileConfig};
pub use remediate::{access_key, firewall_key, remediate, EmergencyEvent, EVENT_KINDS};
pub use rollout::{RollingUpdate, RolloutParams, RolloutReport, RolloutStatus};
pub use sequence::{
    run_sequence, DagEdge, DependencyDag, Direction, SequenceOptions, SequenceReport, Vertex,
    VertexExecutor, VertexOutcome, VertexReport,
};
pub use work::{
    fleet_nodes, image_of, is_workload_action, phase_of, tag_epoch, ActionCommand, ActionState,
    ActionStatus, Dispatcher, Intent, Priority, Work, ORCH_NS, PROVISIONER, WORKLOAD_ACTIONS,
};

use crate::codec::CodecError;
use crate::statestore::{Principal, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("orchestration lease lost")]
    LeaseLost,
    #[error("orchestration lease is held by {0}")]
    LeaseHeld(Principal),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("checkpoint invalid: {0}")]
    CheckpointInvalid(String),
    #[error("dependency cycle through {0:?}")]
    CyclicDependency(Vec<String>),
    #[error("unknown vertex {0:?}")]
    UnknownVertex(String),
    #[error("vertex {vertex} never became ready")]
    ReadinessFailed {
        vertex: String,
        report: Box<SequenceReport>,
    },
    #[error("unknown emergency event kind {0:?}")]
    UnknownEventKind(String),
    #[error("a flow named {0:?} already exists")]
    DuplicateName(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("checkpoint storage: {0}")]
    Io(#[from] io::Error),
}
