//! Deterministic discrete-event model of a physical fleet.
//!
//! [`FleetSim`] plays the provisioner: it receives the orchestrator's
//! commands, runs them against simulated machines (switch wiring, BMCs,
//! boot stages, image transfer, attestation) and reports the results back
//! as facts. Faults are scheduled events, and every run is a pure function
//! of its scenario and seed.

mod boot;
mod image;
mod node;
mod scenario;
mod sim;
mod trace;

use std::io;

pub use boot::{
    attest, boot_node, AttestationReport, BootEnv, BootParams, BootTrace, LayerCheck, LazyCache,
    Read, StageOutcome, StageRecord, TransferMode, Verdict, DEFAULT_METADATA_BYTES,
};
pub use image::{build_images, BuildPolicy, BuiltImages, ImageKind, ImageManifest, Layer, Recipe};
pub use node::{assign_address, hardware_low_bits, AddressMode, SimNode, Wiring};
pub use scenario::{
    DesiredSpec, FaultKind, FaultSpec, FleetSpec, ImageSpec, JobSpec, KillSpec, NodeSpec,
    RolloutSpec, Scenario, TransferSpec,
};
pub use sim::{FleetSim, SimReport, ORCHESTRATOR_ENDPOINT};
pub use trace::{read_jsonl, write_jsonl, TraceEvent};

use crate::configlayers::ConfigError;
use crate::fleetmodel::{GraphError, NodeId, NodePhase, TopologyLocation};
use crate::orchestrator::OrchestratorError;
use crate::statestore::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum ProvisimError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("scenario file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("{node} cannot boot in phase {phase}")]
    InvalidPhase { node: NodeId, phase: NodePhase },
    #[error("{node} needs {need} bytes of memory, has {have}")]
    InsufficientMemory { node: NodeId, need: u64, have: u64 },
    #[error("digest mismatch in layer {layer} on {}", trace.node)]
    DigestMismatch { layer: usize, trace: Box<BootTrace> },
    #[error("no router advertisement reached {0}")]
    AddressTimeout(NodeId),
    #[error("link-layer discovery timed out on {0}")]
    DiscoveryTimeout(NodeId),
    #[error("{} and {} are both wired to chassis {} port {}", nodes.0, nodes.1, location.chassis, location.port)]
    DuplicateAttachment {
        location: TopologyLocation,
        nodes: (NodeId, NodeId),
    },
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("unknown switch {0}")]
    UnknownSwitch(u32),
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("{0} has not booted")]
    NotBooted(NodeId),
    #[error("BMC of {0} is unreachable")]
    BmcUnreachable(NodeId),
    #[error("{node} may not read {what}")]
    AccessDenied { node: NodeId, what: String },
    #[error("no orchestrator holds the lease")]
    OrchestratorDown,
    #[error("{what} did not finish within {ticks} ticks")]
    Timeout { what: String, ticks: u64 },
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}
