//! Replication engines behind the state store: a leader-based replicated
//! log for strong keys and version-vector gossip for eventual keys.

pub mod gossip;
pub mod raft;
pub mod sim;

pub use gossip::{
    gossip_round, merge, random_round, GossipDigest, GossipError, GossipReplica, RoundStats,
    Summary,
};
pub use raft::{LogEntry, Message, ProposeError, ReplicaId, ReplicaState, Role};
pub use sim::{Cluster, FaultRates, Violation};
