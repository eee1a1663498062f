use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv6Addr;

use serde::{Deserialize, Serialize};

use super::ProvisimError;
use crate::digest::Digest;
use crate::fleetmodel::{derive_identity, MacAddr, NodeId, SitePrefix, TopologyLocation};

/// Ground truth about one simulated machine.
#[derive(Clone, Debug)]
pub struct SimNode {
    pub id: NodeId,
    pub location: TopologyLocation,
    pub nic: MacAddr,
    pub memory: u64,
    /// Boot stages completed since the last power-on.
    pub boot_cursor: usize,
    /// Layers placed on the node out of band.
    pub staged: BTreeSet<Digest>,
    /// Layers altered on this node: layer index -> digest it now has.
    pub tampered: BTreeMap<usize, Digest>,
    /// Image and measured layer digests of the running system.
    pub running: Option<(Digest, Vec<Digest>)>,
}

impl SimNode {
    pub fn new(id: NodeId, location: TopologyLocation, nic: MacAddr, memory: u64) -> Self {
        SimNode {
            id,
            location,
            nic,
            memory,
            boot_cursor: 0,
            staged: BTreeSet::new(),
            tampered: BTreeMap::new(),
            running: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AddressMode {
    /// Derived from the switch location, stable across hardware swaps.
    Location,
    /// Derived from the network adapter's hardware address.
    Hardware,
}

/// Low 64 bits for a hardware-derived address: the two 24-bit halves of
/// the adapter address with 16 zero bits between them.
pub fn hardware_low_bits(nic: MacAddr) -> u64 {
    let m = nic.to_u64();
    ((m >> 24) << 40) | (m & 0xff_ffff)
}

/// Self-assigned address of `node` from a router advertisement of
/// `advertised`. Nothing is recorded anywhere else.
pub fn assign_address(
    node: &SimNode,
    mode: AddressMode,
    advertised: Option<SitePrefix>,
) -> Result<Ipv6Addr, ProvisimError> {
    let prefix = advertised.ok_or_else(|| ProvisimError::AddressTimeout(node.id.clone()))?;
    Ok(match mode {
        AddressMode::Location => derive_identity(node.location, prefix).address,
        AddressMode::Hardware => prefix.address_with_low(hardware_low_bits(node.nic)),
    })
}

/// Switch-side view of which node sits on which port.
#[derive(Clone, Debug, Default)]
pub struct Wiring {
    ports: BTreeMap<TopologyLocation, NodeId>,
    lldp_off: BTreeSet<u32>,
}

impl Wiring {
    pub fn new<'a>(nodes: impl IntoIterator<Item = &'a SimNode>) -> Result<Self, ProvisimError> {
        let mut ports = BTreeMap::new();
        for n in nodes {
            if let Some(other) = ports.insert(n.location, n.id.clone()) {
                return Err(ProvisimError::DuplicateAttachment {
                    location: n.location,
                    nodes: (other, n.id.clone()),
                });
            }
        }
        Ok(Wiring {
            ports,
            lldp_off: BTreeSet::new(),
        })
    }

    pub fn has_switch(&self, chassis: u32) -> bool {
        self.ports.keys().any(|l| l.chassis == chassis)
    }

    pub fn set_lldp(&mut self, chassis: u32, enabled: bool) {
        if enabled {
            self.lldp_off.remove(&chassis);
        } else {
            self.lldp_off.insert(chassis);
        }
    }

    /// What the node learns from its switch over link-layer discovery.
    pub fn discover(&self, node: &SimNode) -> Result<TopologyLocation, ProvisimError> {
        if self.lldp_off.contains(&node.location.chassis) {
            return Err(ProvisimError::DiscoveryTimeout(node.id.clone()));
        }
        Ok(node.location)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, c: u32, p: u16, nic: u64) -> SimNode {
        SimNode::new(
            NodeId::new(id),
            TopologyLocation::new(c, p),
            MacAddr::from_u64(nic),
            1 << 30,
        )
    }

    #[test]
    fn hardware_embedding() {
        let n = node("n1", 0, 0, 0x0200_0000_0001);
        let a = assign_address(&n, AddressMode::Hardware, Some(SitePrefix::default())).unwrap();
        assert_eq!(a, "fd00::200:0:0:1".parse::<Ipv6Addr>().unwrap());
    }

    #[test]
    fn location_mode_delegates() {
        let n = node("n1", 5, 12, 1);
        let a = assign_address(&n, AddressMode::Location, Some(SitePrefix::default())).unwrap();
        assert_eq!(
            a,
            derive_identity(TopologyLocation::new(5, 12), SitePrefix::default()).address
        );
        assert!(matches!(
            assign_address(&n, AddressMode::Location, None),
            Err(ProvisimError::AddressTimeout(_))
        ));
    }

    #[test]
    fn discovery() {
        let nodes = [node("a", 2, 7, 1), node("b", 2, 8, 2)];
        let mut w = Wiring::new(&nodes).unwrap();
        assert_eq!(w.discover(&nodes[0]).unwrap(), TopologyLocation::new(2, 7));
        w.set_lldp(2, false);
        assert!(matches!(
            w.discover(&nodes[0]),
            Err(ProvisimError::DiscoveryTimeout(_))
        ));
        let dup = [node("a", 1, 1, 1), node("b", 1, 1, 2)];
        assert!(matches!(
            Wiring::new(&dup),
            Err(ProvisimError::DuplicateAttachment { .. })
        ));
    }
}
