use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::work::is_workload_action;
use super::OrchestratorError;
use crate::fleetmodel::{ActionId, MutationGraph};
use crate::statestore::{CmpOp, ReadyQuery, StateKey, StateStore, Value};

pub const REBOOT_ON_FAULT: &str = include_str!("../../data/flows/reboot-on-fault.toml");
pub const REBOOT_AFTER_JOB: &str = include_str!("../../data/flows/reboot-after-job.toml");

/// One trigger condition on a node fact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowClause {
    pub property: String,
    pub op: CmpOp,
    #[serde(with = "plain_value")]
    pub value: Value,
}

/// Trigger values are written as plain TOML scalars.
mod plain_value {
    use super::Value;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Plain {
        Bool(bool),
        Int(i64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &Value, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Value::Bool(b) => Plain::Bool(*b),
            Value::Int(i) => Plain::Int(*i),
            Value::Str(x) => Plain::Str(x.clone()),
            Value::Digest(d) => Plain::Str(d.to_string()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Value, D::Error> {
        Ok(match Plain::deserialize(d)? {
            Plain::Bool(b) => Value::Bool(b),
            Plain::Int(i) => Value::Int(i),
            Plain::Str(s) => Value::Str(s),
        })
    }
}

/// An operator-defined automation: when every trigger clause holds for a
/// node, its actions are queued for that node in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowDefinition {
    pub name: String,
    #[serde(default, rename = "trigger")]
    pub triggers: Vec<FlowClause>,
    pub actions: Vec<ActionId>,
    #[serde(default = "enabled")]
    pub enabled: bool,
}

fn enabled() -> bool {
    true
}

impl FlowDefinition {
    pub fn from_toml(text: &str) -> Result<Self, OrchestratorError> {
        toml::from_str(text).map_err(|e| OrchestratorError::Validation(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flow definitions serialize")
    }

    pub fn validate(&self, graph: &MutationGraph) -> Result<(), OrchestratorError> {
        if self.name.is_empty() || self.name.contains('/') {
            return Err(OrchestratorError::Validation(format!(
                "bad flow name {:?}",
                self.name
            )));
        }
        if self.actions.is_empty() {
            return Err(OrchestratorError::Validation(format!(
                "flow {} has no actions",
                self.name
            )));
        }
        for a in &self.actions {
            if !graph.has_action(a.as_str()) || is_workload_action(a.as_str()) {
                return Err(OrchestratorError::Validation(format!(
                    "flow {} uses unknown action {a}",
                    self.name
                )));
            }
        }
        for c in &self.triggers {
            if StateKey::new("node", "x", c.property.as_str()).is_err() {
                return Err(OrchestratorError::Validation(format!(
                    "flow {} has a bad trigger property {:?}",
                    self.name, c.property
                )));
            }
        }
        Ok(())
    }

    fn query(&self, store: &StateStore, node: &str) -> ReadyQuery {
        self.triggers.iter().fold(ReadyQuery::new(), |q, c| {
            q.fact(
                store.id(),
                StateKey::node(node, &c.property),
                c.op,
                c.value.clone(),
            )
        })
    }
}

/// Registered flows plus per-node firing state.
#[derive(Debug, Default)]
pub struct FlowTable {
    flows: BTreeMap<String, FlowDefinition>,
    /// Versions of the facts consulted the last time a flow fired on a
    /// node. A flow fires again only once those facts change.
    fired: BTreeMap<(String, String), Vec<Option<u64>>>,
    queues: BTreeMap<String, VecDeque<(String, ActionId)>>,
}

impl FlowTable {
    pub fn register(
        &mut self,
        def: FlowDefinition,
        graph: &MutationGraph,
    ) -> Result<String, OrchestratorError> {
        if self.flows.contains_key(&def.name) {
            return Err(OrchestratorError::DuplicateName(def.name));
        }
        def.validate(graph)?;
        let id = def.name.clone();
        self.flows.insert(id.clone(), def);
        Ok(id)
    }

    pub fn flows(&self) -> impl Iterator<Item = &FlowDefinition> {
        self.flows.values()
    }

    /// Evaluates every enabled flow on `node` and queues actions of those
    /// that fire.
    pub fn evaluate(&mut self, store: &StateStore, node: &str) {
        for (name, def) in &self.flows {
            if !def.enabled || def.triggers.is_empty() {
                continue;
            }
            let Ok(r) = store.query_ready(&def.query(store, node)) else {
                continue;
            };
            let versions: Vec<_> = r.consulted.iter().map(|c| c.version).collect();
            let slot = (name.clone(), node.to_string());
            if !r.ready {
                continue;
            }
            if self.fired.get(&slot) == Some(&versions) {
                continue;
            }
            self.fired.insert(slot, versions);
            let q = self.queues.entry(node.to_string()).or_default();
            q.extend(def.actions.iter().map(|a| (name.clone(), a.clone())));
        }
    }

    pub fn peek(&self, node: &str) -> Option<&(String, ActionId)> {
        self.queues.get(node).and_then(|q| q.front())
    }

    pub fn pop(&mut self, node: &str) {
        if let Some(q) = self.queues.get_mut(node) {
            q.pop_front();
            if q.is_empty() {
                self.queues.remove(node);
            }
        }
    }

    pub fn clear(&mut self, node: &str) {
        self.queues.remove(node);
    }

    pub fn has_queued(&self) -> bool {
        !self.queues.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_flows_parse_and_validate() {
        let g = MutationGraph::default();
        let mut t = FlowTable::default();
        let f = FlowDefinition::from_toml(REBOOT_ON_FAULT).unwrap();
        assert_eq!(f.actions, [ActionId::new("power_cycle")]);
        assert_eq!(f.triggers[0].value, Value::str("Faulted"));
        assert_eq!(t.register(f.clone(), &g).unwrap(), "reboot-on-fault");
        let j = FlowDefinition::from_toml(REBOOT_AFTER_JOB).unwrap();
        assert_eq!(j.triggers[1].value, Value::Bool(true));
        t.register(j, &g).unwrap();
        assert!(
            matches!(t.register(f, &g), Err(OrchestratorError::DuplicateName(n)) if n == "reboot-on-fault")
        );
    }

    #[test]
    fn unknown_action_rejected() {
        let g = MutationGraph::default();
        let mut f = FlowDefinition::from_toml(REBOOT_ON_FAULT).unwrap();
        f.actions = vec![ActionId::new("warp")];
        assert!(matches!(
            FlowTable::default().register(f, &g),
            Err(OrchestratorError::Validation(_))
        ));
    }

    #[test]
    fn fires_once_per_fact_version() {
        use crate::statestore::{KeyRange, Principal};
        let store = StateStore::new("s");
        let p = Principal::new("provisioner");
        store
            .transfer_ownership(KeyRange::namespace("node"), None, p.clone(), 1)
            .unwrap();
        let mut t = FlowTable::default();
        t.register(
            FlowDefinition::from_toml(REBOOT_ON_FAULT).unwrap(),
            &MutationGraph::default(),
        )
        .unwrap();
        let phase = StateKey::node("n1", "phase");
        store
            .put_fact_next(&p, &phase, Value::str("Faulted"))
            .unwrap();
        t.evaluate(&store, "n1");
        t.evaluate(&store, "n1");
        assert_eq!(t.peek("n1").unwrap().1.as_str(), "power_cycle");
        t.pop("n1");
        assert!(t.peek("n1").is_none());
        t.evaluate(&store, "n1");
        assert!(t.peek("n1").is_none());
        store
            .put_fact_next(&p, &phase, Value::str("PoweredOn"))
            .unwrap();
        store
            .put_fact_next(&p, &phase, Value::str("Faulted"))
            .unwrap();
        t.evaluate(&store, "n1");
        assert!(t.peek("n1").is_some());
    }
}
