use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::key::StateKey;
use crate::digest::Digest;

/// A principal that may own facts: a component such as the provisioner,
/// the scheduler/resource manager, or an orchestrator instance.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Principal(pub String);

impl Principal {
    pub fn new(s: impl Into<String>) -> Self {
        Principal(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Identifies the configuration render (or emergency action) a desire came from.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RenderId(pub String);

impl RenderId {
    pub const EMERGENCY_PREFIX: &'static str = "emergency:";

    pub fn new(s: impl Into<String>) -> Self {
        RenderId(s.into())
    }

    pub fn is_emergency(&self) -> bool {
        self.0.starts_with(Self::EMERGENCY_PREFIX)
    }
}

impl fmt::Display for RenderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Fact,
    Desire,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Consistency {
    Strong,
    Eventual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadMode {
    Strong,
    Local,
}

/// Typed scalar value of a record.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum Value {
    Bool(bool),
    Int(i64),
    Str(String),
    Digest(Digest),
}

impl Value {
    pub fn str(s: impl Into<String>) -> Self {
        Value::Str(s.into())
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_digest(&self) -> Option<Digest> {
        match self {
            Value::Digest(d) => Some(*d),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Str(s) => f.write_str(s),
            Value::Digest(d) => write!(f, "{d}"),
        }
    }
}

/// Per-replica counters. Componentwise comparison gives the partial order
/// used by eventual merges.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VersionVector(pub BTreeMap<String, u64>);

impl VersionVector {
    pub fn get(&self, replica: &str) -> u64 {
        self.0.get(replica).copied().unwrap_or(0)
    }

    pub fn bump(&mut self, replica: &str) {
        *self.0.entry(replica.to_string()).or_insert(0) += 1;
    }

    pub fn join(&mut self, other: &VersionVector) {
        for (r, &c) in &other.0 {
            let e = self.0.entry(r.clone()).or_insert(0);
            *e = (*e).max(c);
        }
    }

    pub fn sum(&self) -> u64 {
        self.0.values().sum()
    }

    /// `Some(ordering)` when the vectors are comparable, `None` when concurrent.
    pub fn partial_cmp_vv(&self, other: &VersionVector) -> Option<std::cmp::Ordering> {
        use std::cmp::Ordering::*;
        let mut le = true;
        let mut ge = true;
        for r in self.0.keys().chain(other.0.keys()) {
            let (a, b) = (self.get(r), other.get(r));
            le &= a <= b;
            ge &= a >= b;
        }
        match (le, ge) {
            (true, true) => Some(Equal),
            (true, false) => Some(Less),
            (false, true) => Some(Greater),
            (false, false) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Version {
    /// Monotone per-owner counter.
    pub counter: u64,
    /// Populated for eventual keys; empty for strong keys.
    #[serde(default, skip_serializing_if = "is_empty_vv")]
    pub vector: VersionVector,
}

fn is_empty_vv(v: &VersionVector) -> bool {
    v.0.is_empty()
}

/// The unit of system truth.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateRecord {
    pub key: StateKey,
    pub kind: Kind,
    pub value: Value,
    pub version: Version,
    pub owner: Principal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<RenderId>,
    /// Logical time of the write.
    pub timestamp: u64,
    pub consistency: Consistency,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cmp::Ordering::*;

    fn vv(pairs: &[(&str, u64)]) -> VersionVector {
        VersionVector(pairs.iter().map(|(r, c)| (r.to_string(), *c)).collect())
    }

    #[test]
    fn vector_order() {
        assert_eq!(
            vv(&[("a", 2)]).partial_cmp_vv(&vv(&[("a", 1)])),
            Some(Greater)
        );
        assert_eq!(vv(&[("a", 1)]).partial_cmp_vv(&vv(&[("b", 1)])), None);
        assert_eq!(
            vv(&[("a", 1)]).partial_cmp_vv(&vv(&[("a", 1), ("b", 0)])),
            Some(Equal)
        );
        assert_eq!(vv(&[]).partial_cmp_vv(&vv(&[("b", 1)])), Some(Less));
    }

    #[test]
    fn value_json_shape() {
        let v = serde_json::to_string(&Value::Int(3)).unwrap();
        assert_eq!(v, r#"{"type":"int","value":3}"#);
        let d: Value =
            serde_json::from_str(r#"{"type":"digest","value":"000000000000002a"}"#).unwrap();
        assert_eq!(d, Value::Digest(Digest(42)));
    }
}
