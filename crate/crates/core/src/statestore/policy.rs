use serde::{Deserialize, Serialize};

use super::key::StateKey;
use super::record::Consistency;

/// One line of the consistency policy. A rule matches when the namespace
/// (if given) equals the key's namespace and the key's property starts with
/// `property_prefix` (if given).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRule {
    #[serde(default)]
    pub namespace: Option<String>,
    #[serde(default)]
    pub property_prefix: Option<String>,
    pub class: Consistency,
}

impl PolicyRule {
    fn matches(&self, key: &StateKey) -> bool {
        self.namespace
            .as_deref()
            .is_none_or(|ns| ns == key.namespace())
            && self
                .property_prefix
                .as_deref()
                .is_none_or(|p| key.property().starts_with(p))
    }
}

/// Assigns a consistency class to every key. First matching rule wins.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyPolicy {
    #[serde(default, rename = "rule")]
    pub rules: Vec<PolicyRule>,
    #[serde(default = "strong")]
    pub default: Consistency,
}

fn strong() -> Consistency {
    Consistency::Strong
}

pub const DEFAULT_POLICY: &str = include_str!("../../data/consistency_policy.toml");

impl Default for ConsistencyPolicy {
    fn default() -> Self {
        Self::from_toml(DEFAULT_POLICY).expect("bundled policy parses")
    }
}

impl ConsistencyPolicy {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn class_of(&self, key: &StateKey) -> Consistency {
        self.rules
            .iter()
            .find(|r| r.matches(key))
            .map_or(self.default, |r| r.class)
    }
}
