use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value as JsonValue;

use super::merge::EffectiveConfig;
use super::ConfigError;
use crate::codec;
use crate::digest::Digest;
use crate::fleetmodel::{MutationGraph, NodeId, NodePhase};
use crate::statestore::{RenderId, StateKey, StateRecord, StateStore, Value};

/// Approved images by name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRegistry {
    images: BTreeMap<String, Digest>,
}

impl ImageRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, digest: Digest) {
        self.images.insert(name.into(), digest);
    }

    pub fn with(mut self, name: impl Into<String>, digest: Digest) -> Self {
        self.insert(name, digest);
        self
    }

    pub fn resolve(&self, name: &str) -> Result<Digest, ConfigError> {
        self.images
            .get(name)
            .copied()
            .ok_or_else(|| ConfigError::UnknownImage(name.to_string()))
    }

    pub fn name_of(&self, digest: Digest) -> Option<&str> {
        self.images
            .iter()
            .find(|(_, d)| **d == digest)
            .map(|(n, _)| n.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Changeset {
    pub added: Vec<StateKey>,
    pub removed: Vec<StateKey>,
    pub modified: Vec<StateKey>,
}

impl Changeset {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.modified.is_empty()
    }
}

/// One render as kept in the render log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderEntry {
    pub id: RenderId,
    pub stack_version: Digest,
    pub desires: BTreeMap<StateKey, Value>,
    pub changeset: Changeset,
}

#[derive(Clone, Debug)]
pub struct RenderResult {
    pub id: RenderId,
    /// Desires written by this render. Unchanged desires keep the record
    /// of the render that last changed them and are not rewritten.
    pub written: Vec<StateRecord>,
    pub changeset: Changeset,
}

/// Compiles effective configuration into desires.
///
/// Recognized keys:
///
/// | key | desire |
/// |-----|--------|
/// | `groups.<g>.members` | node ids in group `g` |
/// | `groups.<g>.image`, `groups.<g>.phase` | per member |
/// | `nodes.<n>.image`, `nodes.<n>.phase` | for node `n` |
/// | `defaults.image`, `defaults.phase` | for every node |
/// | `services.<s>.replicas` | `service/<s>/replicas` |
///
/// A node-specific value beats its groups, which beat the defaults. Other
/// keys are not rendered.
#[derive(Debug)]
pub struct Renderer {
    registry: ImageRegistry,
    graph: MutationGraph,
    log: Vec<RenderEntry>,
}

impl Renderer {
    pub fn new(registry: ImageRegistry, graph: MutationGraph) -> Self {
        Renderer {
            registry,
            graph,
            log: Vec::new(),
        }
    }

    /// Restores a renderer from a persisted render log.
    pub fn from_log<R: Read>(
        registry: ImageRegistry,
        graph: MutationGraph,
        r: &mut R,
    ) -> Result<Self, ConfigError> {
        let log = codec::read_records(r)?;
        Ok(Renderer {
            registry,
            graph,
            log,
        })
    }

    pub fn registry(&self) -> &ImageRegistry {
        &self.registry
    }

    pub fn log(&self) -> &[RenderEntry] {
        &self.log
    }

    pub fn last(&self) -> Option<&RenderEntry> {
        self.log.last()
    }

    pub fn persist<W: Write>(&self, w: &mut W) -> Result<(), ConfigError> {
        codec::write_records(w, &self.log)?;
        Ok(())
    }

    /// Computes the desires `effective` implies for `fleet` plus any node
    /// named in the configuration, without writing anything.
    pub fn compute(
        &self,
        effective: &EffectiveConfig,
        fleet: &[NodeId],
    ) -> Result<BTreeMap<StateKey, Value>, ConfigError> {
        let global = |k: &str| effective.get(None, k).map(|r| &r.value);

        let mut groups: BTreeMap<&str, Vec<NodeId>> = BTreeMap::new();
        let mut nodes: BTreeSet<NodeId> = fleet.iter().cloned().collect();
        let mut services = BTreeSet::new();
        let all_keys = effective.keys(None).into_iter().chain(
            effective
                .node_values
                .values()
                .flat_map(|m| m.keys().map(String::as_str)),
        );
        for key in all_keys {
            let parts: Vec<&str> = key.split('.').collect();
            match parts.as_slice() {
                ["groups", g, "members"] => {
                    let members = global(key).map(members_of).transpose()?.unwrap_or_default();
                    nodes.extend(members.iter().cloned());
                    groups.insert(g, members);
                }
                ["nodes", n, _] => {
                    nodes.insert(NodeId::new(*n));
                }
                ["services", s, "replicas"] => {
                    services.insert(*s);
                }
                _ => {}
            }
        }

        let mut out = BTreeMap::new();
        for node in &nodes {
            let key_of = |prop| {
                StateKey::new("node", node.as_str(), prop)
                    .map_err(|e| ConfigError::Validation(e.to_string()))
            };
            if let Some(name) = self.lookup(effective, &groups, node, "image")? {
                let digest = self.registry.resolve(&name)?;
                out.insert(key_of("image")?, Value::Digest(digest));
            }
            if let Some(phase) = self.lookup(effective, &groups, node, "phase")? {
                self.validate_phase(&phase)?;
                out.insert(key_of("phase")?, Value::Str(phase));
            }
        }
        for s in services {
            let key = format!("services.{s}.replicas");
            let replicas = global(&key)
                .and_then(JsonValue::as_i64)
                .filter(|r| *r >= 0)
                .ok_or_else(|| {
                    ConfigError::Validation(format!("{key} must be a non-negative integer"))
                })?;
            let k = StateKey::new("service", s, "replicas")
                .map_err(|e| ConfigError::Validation(e.to_string()))?;
            out.insert(k, Value::Int(replicas));
        }
        Ok(out)
    }

    fn lookup(
        &self,
        effective: &EffectiveConfig,
        groups: &BTreeMap<&str, Vec<NodeId>>,
        node: &NodeId,
        prop: &str,
    ) -> Result<Option<String>, ConfigError> {
        let get = |key: String| -> Result<Option<String>, ConfigError> {
            match effective.get(Some(node), &key) {
                None => Ok(None),
                Some(r) => r
                    .value
                    .as_str()
                    .map(|s| Some(s.to_string()))
                    .ok_or_else(|| ConfigError::Validation(format!("{key} must be a string"))),
            }
        };
        if let Some(v) = get(format!("nodes.{node}.{prop}"))? {
            return Ok(Some(v));
        }
        let mut from_groups: BTreeMap<String, &str> = BTreeMap::new();
        for (g, members) in groups {
            if members.contains(node) {
                if let Some(v) = get(format!("groups.{g}.{prop}"))? {
                    from_groups.entry(v).or_insert(g);
                }
            }
        }
        match from_groups.len() {
            0 => get(format!("defaults.{prop}")),
            1 => Ok(from_groups.into_keys().next()),
            _ => Err(ConfigError::Validation(format!(
                "node {node} gets conflicting {prop} values from groups {:?}",
                from_groups.values().collect::<Vec<_>>()
            ))),
        }
    }

    fn validate_phase(&self, phase: &str) -> Result<(), ConfigError> {
        let p: NodePhase = phase
            .parse()
            .map_err(|_| ConfigError::Validation(format!("unknown phase {phase:?}")))?;
        let settable = !matches!(
            p,
            NodePhase::Unknown
                | NodePhase::Faulted
                | NodePhase::Quarantined
                | NodePhase::JobRunning
                | NodePhase::Draining
        );
        if !settable {
            return Err(ConfigError::Validation(format!(
                "phase {phase} cannot be desired"
            )));
        }
        self.graph
            .plan_mutations(NodePhase::Discovered, p)
            .map_err(|e| ConfigError::Validation(e.to_string()))?;
        Ok(())
    }

    /// Renders desires into `store` under a new render id. Only desires that
    /// differ from the previous render are written.
    pub fn render_desires(
        &mut self,
        effective: &EffectiveConfig,
        fleet: &[NodeId],
        store: &StateStore,
    ) -> Result<RenderResult, ConfigError> {
        let desires = self.compute(effective, fleet)?;
        let empty = BTreeMap::new();
        let prev = self.log.last().map_or(&empty, |e| &e.desires);

        let mut changeset = Changeset::default();
        for (k, v) in &desires {
            match prev.get(k) {
                None => changeset.added.push(k.clone()),
                Some(p) if p != v => changeset.modified.push(k.clone()),
                Some(_) => {}
            }
        }
        changeset.removed = prev
            .keys()
            .filter(|k| !desires.contains_key(*k))
            .cloned()
            .collect();

        let id = RenderId::new(format!("r{}", self.log.len() + 1));
        let written = changeset
            .added
            .iter()
            .chain(&changeset.modified)
            .map(|k| store.put_desire(k, desires[k].clone(), id.clone()))
            .collect();
        self.log.push(RenderEntry {
            id: id.clone(),
            stack_version: effective.stack_version,
            desires,
            changeset: changeset.clone(),
        });
        Ok(RenderResult {
            id,
            written,
            changeset,
        })
    }
}

fn members_of(v: &JsonValue) -> Result<Vec<NodeId>, ConfigError> {
    v.as_array()
        .and_then(|a| {
            a.iter()
                .map(|m| m.as_str().map(NodeId::new))
                .collect::<Option<Vec<_>>>()
        })
        .ok_or_else(|| ConfigError::Validation("group members must be a list of node ids".into()))
}
