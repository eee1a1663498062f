use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value as JsonValue;

use super::layer::{ConfigLayer, Scope};
use super::ConfigError;
use crate::digest::Digest;
use crate::fleetmodel::NodeId;

/// A merged value and the layer it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub value: JsonValue,
    pub layer: String,
}

/// The single source of truth compiled from a layer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveConfig {
    /// Values as seen by any node, from global layers only.
    pub values: BTreeMap<String, Resolved>,
    /// For nodes with node-scoped layers: every key those layers define,
    /// resolved across all layers covering the node.
    pub node_values: BTreeMap<NodeId, BTreeMap<String, Resolved>>,
    /// Digest over the ordered layer versions.
    pub stack_version: Digest,
}

impl EffectiveConfig {
    pub fn get(&self, node: Option<&NodeId>, key: &str) -> Option<&Resolved> {
        node.and_then(|n| self.node_values.get(n))
            .and_then(|m| m.get(key))
            .or_else(|| self.values.get(key))
    }

    /// Every key visible to `node` (or globally, for `None`).
    pub fn keys(&self, node: Option<&NodeId>) -> BTreeSet<&str> {
        let mut keys: BTreeSet<&str> = self.values.keys().map(String::as_str).collect();
        if let Some(m) = node.and_then(|n| self.node_values.get(n)) {
            keys.extend(m.keys().map(String::as_str));
        }
        keys
    }
}

/// Merges a layer stack. For each key the highest-precedence definition
/// covering the node wins; two definitions of one key at equal precedence
/// with intersecting scopes are rejected.
pub fn merge_layers(stack: &[ConfigLayer]) -> Result<EffectiveConfig, ConfigError> {
    let mut defs: BTreeMap<&str, Vec<&ConfigLayer>> = BTreeMap::new();
    for layer in stack {
        for key in layer.values.keys() {
            defs.entry(key).or_default().push(layer);
        }
    }

    for (key, layers) in &defs {
        for (i, a) in layers.iter().enumerate() {
            if let Some(b) = layers[i + 1..]
                .iter()
                .find(|b| b.precedence == a.precedence && b.scope.intersects(&a.scope))
            {
                return Err(ConfigError::AmbiguousPrecedence {
                    key: key.to_string(),
                    layers: vec![a.name.clone(), b.name.clone()],
                });
            }
        }
    }

    let winner = |layers: &[&ConfigLayer], node: Option<&NodeId>, key: &str| {
        layers
            .iter()
            .filter(|l| l.scope.covers(node))
            .max_by_key(|l| l.precedence)
            .map(|l| Resolved {
                value: l.values[key].clone(),
                layer: l.name.clone(),
            })
    };

    let mut values = BTreeMap::new();
    let mut node_values: BTreeMap<NodeId, BTreeMap<String, Resolved>> = BTreeMap::new();
    for (key, layers) in &defs {
        if let Some(r) = winner(layers, None, key) {
            values.insert(key.to_string(), r);
        }
        for l in layers {
            if let Scope::Node(n) = &l.scope {
                if let Some(r) = winner(layers, Some(n), key) {
                    node_values
                        .entry(n.clone())
                        .or_default()
                        .insert(key.to_string(), r);
                }
            }
        }
    }

    let stack_version = Digest::of_parts(stack.iter().map(|l| l.version().0.to_le_bytes()));
    Ok(EffectiveConfig {
        values,
        node_values,
        stack_version,
    })
}
