use std::fmt;
use std::net::Ipv6Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::graph::MutationEdge;
use crate::digest::Digest;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(s: impl Into<String>) -> Self {
        NodeId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodePhase {
    Unknown,
    Discovered,
    PoweredOff,
    PoweredOn,
    NetBooting,
    MinimalOS,
    ServicesReady,
    JobRunning,
    Draining,
    Faulted,
    Quarantined,
}

impl NodePhase {
    pub const ALL: [NodePhase; 11] = [
        NodePhase::Unknown,
        NodePhase::Discovered,
        NodePhase::PoweredOff,
        NodePhase::PoweredOn,
        NodePhase::NetBooting,
        NodePhase::MinimalOS,
        NodePhase::ServicesReady,
        NodePhase::JobRunning,
        NodePhase::Draining,
        NodePhase::Faulted,
        NodePhase::Quarantined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodePhase::Unknown => "Unknown",
            NodePhase::Discovered => "Discovered",
            NodePhase::PoweredOff => "PoweredOff",
            NodePhase::PoweredOn => "PoweredOn",
            NodePhase::NetBooting => "NetBooting",
            NodePhase::MinimalOS => "MinimalOS",
            NodePhase::ServicesReady => "ServicesReady",
            NodePhase::JobRunning => "JobRunning",
            NodePhase::Draining => "Draining",
            NodePhase::Faulted => "Faulted",
            NodePhase::Quarantined => "Quarantined",
        }
    }

    /// In service: either serving or running a job.
    pub fn is_available(self) -> bool {
        matches!(self, NodePhase::ServicesReady | NodePhase::JobRunning)
    }
}

impl fmt::Display for NodePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown node phase {0:?}")]
pub struct UnknownPhase(pub String);

impl FromStr for NodePhase {
    type Err = UnknownPhase;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodePhase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| UnknownPhase(s.to_string()))
    }
}

/// Where a node is plugged in: the switch chassis and port it sees over
/// link-layer discovery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TopologyLocation {
    pub chassis: u32,
    pub port: u16,
}

impl TopologyLocation {
    pub fn new(chassis: u32, port: u16) -> Self {
        TopologyLocation { chassis, port }
    }
}

/// 48-bit hardware address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub fn from_u64(v: u64) -> Self {
        let b = v.to_be_bytes();
        MacAddr([b[2], b[3], b[4], b[5], b[6], b[7]])
    }

    pub fn to_u64(self) -> u64 {
        self.0.iter().fold(0u64, |acc, &b| (acc << 8) | b as u64)
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed hardware address {0:?}")]
pub struct MalformedMac(pub String);

impl FromStr for MacAddr {
    type Err = MalformedMac;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || MalformedMac(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 6 {
            return Err(err());
        }
        let mut out = [0u8; 6];
        for (o, p) in out.iter_mut().zip(parts) {
            if p.len() != 2 {
                return Err(err());
            }
            *o = u8::from_str_radix(p, 16).map_err(|_| err())?;
        }
        Ok(MacAddr(out))
    }
}

impl From<MacAddr> for String {
    fn from(m: MacAddr) -> Self {
        m.to_string()
    }
}

impl TryFrom<String> for MacAddr {
    type Error = MalformedMac;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub location: TopologyLocation,
    pub nic: MacAddr,
    pub bmc: Ipv6Addr,
    pub image: Option<Digest>,
    pub phase: NodePhase,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("edge {action} leaves {expected}, but node {node} is {actual}")]
pub struct TransitionError {
    pub node: NodeId,
    pub action: String,
    pub expected: NodePhase,
    pub actual: NodePhase,
}

/// Moves a node along one edge. The caller records the resulting phase fact.
pub fn apply_transition(
    node: &NodeRecord,
    edge: &MutationEdge,
    outcome: Outcome,
) -> Result<NodeRecord, TransitionError> {
    if edge.from != node.phase {
        return Err(TransitionError {
            node: node.id.clone(),
            action: edge.action.0.clone(),
            expected: edge.from,
            actual: node.phase,
        });
    }
    let mut next = node.clone();
    next.phase = match outcome {
        Outcome::Success => edge.to,
        Outcome::Failure => edge.failure,
    };
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleetmodel::MutationGraph;

    fn node(phase: NodePhase) -> NodeRecord {
        NodeRecord {
            id: NodeId::new("n1"),
            location: TopologyLocation::new(0, 1),
            nic: "02:00:00:00:00:01".parse().unwrap(),
            bmc: Ipv6Addr::LOCALHOST,
            image: None,
            phase,
        }
    }

    #[test]
    fn transitions() {
        let g = MutationGraph::default();
        let power_on = g.edge(NodePhase::PoweredOff, "power_on").unwrap();
        let load = g.edge(NodePhase::NetBooting, "load_minimal_os").unwrap();

        let n = apply_transition(&node(NodePhase::PoweredOff), power_on, Outcome::Success).unwrap();
        assert_eq!(n.phase, NodePhase::PoweredOn);

        let n = apply_transition(&node(NodePhase::NetBooting), load, Outcome::Failure).unwrap();
        assert_eq!(n.phase, NodePhase::Faulted);

        let err =
            apply_transition(&node(NodePhase::PoweredOn), power_on, Outcome::Success).unwrap_err();
        assert_eq!(err.actual, NodePhase::PoweredOn);
    }

    #[test]
    fn phase_and_mac_text() {
        for p in NodePhase::ALL {
            assert_eq!(p.as_str().parse::<NodePhase>().unwrap(), p);
        }
        assert!("Dancing".parse::<NodePhase>().is_err());
        let m: MacAddr = "02:00:00:00:00:01".parse().unwrap();
        assert_eq!(m.to_u64(), 0x0200_0000_0001);
        assert_eq!(MacAddr::from_u64(m.to_u64()), m);
        assert!("02:00:00:00:01".parse::<MacAddr>().is_err());
    }
}
