//! Fleet state management, orchestration and provisioning.
//!
//! The crate is organized around a central [`statestore`] of facts and
//! desires. [`configlayers`] renders desires from layered configuration,
//! [`orchestrator`] converges facts toward desires by planning over the
//! [`fleetmodel`] mutation graph, and [`provisim`] is a deterministic
//! discrete-event model of the physical fleet that executes the planned
//! actions. [`replication`] holds the two replication engines behind the
//! store, [`metrics`] profiles requests and [`gateway`] is the service and
//! operator surface.

pub mod codec;
pub mod configlayers;
pub mod digest;
pub mod fleetmodel;
pub mod gateway;
pub mod metrics;
pub mod net;
pub mod orchestrator;
pub mod provisim;
pub mod replication;
pub mod statestore;

pub use digest::Digest;
