use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Identifies one piece of state: `namespace/entity/property`.
///
/// Keys order lexicographically over the three components, in that order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct StateKey {
    namespace: String,
    entity: String,
    property: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed state key {0:?}")]
pub struct MalformedKey(pub String);

impl StateKey {
    pub fn new(
        namespace: impl Into<String>,
        entity: impl Into<String>,
        property: impl Into<String>,
    ) -> Result<Self, MalformedKey> {
        let key = StateKey {
            namespace: namespace.into(),
            entity: entity.into(),
            property: property.into(),
        };
        let ok = [&key.namespace, &key.entity, &key.property]
            .iter()
            .all(|c| !c.is_empty() && !c.contains('/'));
        if ok {
            Ok(key)
        } else {
            Err(MalformedKey(format!(
                "{}/{}/{}",
                key.namespace, key.entity, key.property
            )))
        }
    }

    /// Convenience for keys under the `node` namespace.
    pub fn node(entity: &str, property: &str) -> Self {
        Self::new("node", entity, property).expect("node key components must be non-empty")
    }

    // Range bounds are not required to be valid keys.
    pub(crate) fn bound(namespace: &str, entity: &str, property: &str) -> Self {
        StateKey {
            namespace: namespace.to_string(),
            entity: entity.to_string(),
            property: property.to_string(),
        }
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn entity(&self) -> &str {
        &self.entity
    }

    pub fn property(&self) -> &str {
        &self.property
    }

    /// The smallest key strictly greater than `self`.
    pub fn successor(&self) -> StateKey {
        let mut property = self.property.clone();
        property.push('\0');
        StateKey {
            namespace: self.namespace.clone(),
            entity: self.entity.clone(),
            property,
        }
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.namespace, self.entity, self.property)
    }
}

impl FromStr for StateKey {
    type Err = MalformedKey;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.splitn(3, '/');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(ns), Some(e), Some(p)) => StateKey::new(ns, e, p),
            _ => Err(MalformedKey(s.to_string())),
        }
    }
}

impl From<StateKey> for String {
    fn from(k: StateKey) -> Self {
        k.to_string()
    }
}

impl TryFrom<String> for StateKey {
    type Error = MalformedKey;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// A contiguous half-open interval `[start, end)` of keys. `end = None` is
/// unbounded above.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyRange {
    pub start: (String, String, String),
    pub end: Option<(String, String, String)>,
}

impl KeyRange {
    fn from_keys(start: StateKey, end: Option<StateKey>) -> Self {
        let t = |k: StateKey| (k.namespace, k.entity, k.property);
        KeyRange {
            start: t(start),
            end: end.map(t),
        }
    }

    /// Exactly one key.
    pub fn single(key: &StateKey) -> Self {
        Self::from_keys(key.clone(), Some(key.successor()))
    }

    /// Every key of one entity within a namespace.
    pub fn entity(namespace: &str, entity: &str) -> Self {
        let mut next = entity.to_string();
        next.push('\0');
        Self::from_keys(
            StateKey::bound(namespace, entity, ""),
            Some(StateKey::bound(namespace, &next, "")),
        )
    }

    /// Every key in a namespace.
    pub fn namespace(namespace: &str) -> Self {
        let mut next = namespace.to_string();
        next.push('\0');
        Self::from_keys(
            StateKey::bound(namespace, "", ""),
            Some(StateKey::bound(&next, "", "")),
        )
    }

    pub fn start_key(&self) -> StateKey {
        StateKey::bound(&self.start.0, &self.start.1, &self.start.2)
    }

    pub fn end_key(&self) -> Option<StateKey> {
        self.end.as_ref().map(|e| StateKey::bound(&e.0, &e.1, &e.2))
    }

    pub fn contains(&self, key: &StateKey) -> bool {
        *key >= self.start_key() && self.end_key().is_none_or(|e| *key < e)
    }

    pub fn is_empty(&self) -> bool {
        self.end_key().is_some_and(|e| e <= self.start_key())
    }

    pub fn overlaps(&self, other: &KeyRange) -> bool {
        let below = |r: &KeyRange, s: &KeyRange| r.end_key().is_some_and(|e| e <= s.start_key());
        !self.is_empty() && !other.is_empty() && !below(self, other) && !below(other, self)
    }

    pub fn covers(&self, other: &KeyRange) -> bool {
        if other.is_empty() {
            return true;
        }
        let end_ok = match (self.end_key(), other.end_key()) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(a), Some(b)) => b <= a,
        };
        self.start_key() <= other.start_key() && end_ok
    }

    /// The parts of `self` not covered by `cut`, in key order.
    pub fn minus(&self, cut: &KeyRange) -> Vec<KeyRange> {
        if !self.overlaps(cut) {
            return vec![self.clone()];
        }
        let mut out = Vec::new();
        if self.start_key() < cut.start_key() {
            out.push(KeyRange {
                start: self.start.clone(),
                end: Some(cut.start.clone()),
            });
        }
        if let Some(cut_end) = &cut.end {
            let tail = KeyRange {
                start: cut_end.clone(),
                end: self.end.clone(),
            };
            if !tail.is_empty() {
                out.push(tail);
            }
        }
        out
    }
}

impl fmt::Display for KeyRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b, c) = &self.start;
        write!(f, "[{a}/{b}/{c}, ")?;
        match &self.end {
            Some((a, b, c)) => write!(f, "{a}/{b}/{c})"),
            None => write!(f, "∞)"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_components_are_rejected() {
        assert!(StateKey::new("node", "", "power").is_err());
        assert!(StateKey::new("node", "n1", "a/b").is_err());
        assert!("node/n1".parse::<StateKey>().is_err());
        assert_eq!(
            "node/n1/power".parse::<StateKey>().unwrap(),
            StateKey::node("n1", "power")
        );
    }

    #[test]
    fn ordering_is_lexicographic_by_component() {
        let a = StateKey::node("n1", "power");
        let b = StateKey::node("n1", "prop");
        let c = StateKey::node("n2", "a");
        let d = StateKey::new("orch", "a", "a").unwrap();
        assert!(a < b && b < c && c < d);
    }

    #[test]
    fn entity_range_holds_only_that_entity() {
        let r = KeyRange::entity("node", "n1");
        assert!(r.contains(&StateKey::node("n1", "power")));
        assert!(r.contains(&StateKey::node("n1", "zzz")));
        assert!(!r.contains(&StateKey::node("n10", "power")));
        assert!(!r.contains(&StateKey::node("n2", "power")));
        assert!(!r.contains(&StateKey::new("nodf", "n1", "power").unwrap()));
    }

    #[test]
    fn single_range_and_split() {
        let k = StateKey::node("n1", "power");
        let one = KeyRange::single(&k);
        assert!(one.contains(&k));
        assert!(!one.contains(&StateKey::node("n1", "powerx")));
        let ent = KeyRange::entity("node", "n1");
        assert!(ent.covers(&one));
        let rest = ent.minus(&one);
        assert_eq!(rest.len(), 2);
        assert!(rest.iter().all(|r| !r.contains(&k)));
        assert!(rest
            .iter()
            .any(|r| r.contains(&StateKey::node("n1", "image"))));
        assert!(rest.iter().any(|r| r.contains(&StateKey::node("n1", "zz"))));
    }
}
