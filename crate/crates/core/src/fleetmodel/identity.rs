use std::fmt;
use std::net::Ipv6Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::node::TopologyLocation;

/// The upper 64 bits of a site's IPv6 addressing, written `xxxx::/64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct SitePrefix(pub u64);

impl SitePrefix {
    pub fn address_with_low(self, low: u64) -> Ipv6Addr {
        Ipv6Addr::from(((self.0 as u128) << 64) | low as u128)
    }
}

impl Default for SitePrefix {
    fn default() -> Self {
        SitePrefix(0xfd00_0000_0000_0000)
    }
}

impl fmt::Display for SitePrefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/64", self.address_with_low(0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid site prefix {0:?}: expected an IPv6 /64 with zero host bits")]
pub struct InvalidPrefix(pub String);

impl FromStr for SitePrefix {
    type Err = InvalidPrefix;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || InvalidPrefix(s.to_string());
        let (addr, len) = s.split_once('/').ok_or_else(err)?;
        if len != "64" {
            return Err(err());
        }
        let bits = u128::from(addr.parse::<Ipv6Addr>().map_err(|_| err())?);
        if bits as u64 != 0 {
            return Err(err());
        }
        Ok(SitePrefix((bits >> 64) as u64))
    }
}

impl From<SitePrefix> for String {
    fn from(p: SitePrefix) -> Self {
        p.to_string()
    }
}

impl TryFrom<String> for SitePrefix {
    type Error = InvalidPrefix;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub address: Ipv6Addr,
    pub hostname: String,
}

/// Address and hostname of whatever node occupies `location`.
///
/// The address is `prefix(64) ‖ chassis(32) ‖ port(16) ‖ 0(16)`; the
/// hostname is `node-c{chassis}-p{port}`. Nothing about the node itself
/// (such as its hardware address) enters the result, so a replacement
/// node at the same location gets the same identity.
pub fn derive_identity(location: TopologyLocation, prefix: SitePrefix) -> Identity {
    let low = ((location.chassis as u64) << 32) | ((location.port as u64) << 16);
    Identity {
        address: prefix.address_with_low(low),
        hostname: format!("node-c{}-p{}", location.chassis, location.port),
    }
}
