use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::digest::Digest;
use crate::fleetmodel::{NodeId, NodePhase};
use crate::statestore::{Kind, RenderId, StateKey, StateRecord, StateStore, Value};

pub const EVENT_KINDS: [&str; 4] = [
    "firewall_rule",
    "revoke_access",
    "emergency_patch",
    "quarantine",
];

/// An emergency change. Desires it writes carry an emergency origin, which
/// the reconciler serves ahead of everything else.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmergencyEvent {
    /// Appends a rule to the cluster firewall desire.
    FirewallRule {
        rule: String,
    },
    RevokeAccess {
        user: String,
    },
    EmergencyPatch {
        image: Digest,
        nodes: Vec<NodeId>,
    },
    Quarantine {
        node: NodeId,
        reason: String,
    },
}

impl EmergencyEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            EmergencyEvent::FirewallRule { .. } => "firewall_rule",
            EmergencyEvent::RevokeAccess { .. } => "revoke_access",
            EmergencyEvent::EmergencyPatch { .. } => "emergency_patch",
            EmergencyEvent::Quarantine { .. } => "quarantine",
        }
    }

    /// Parses an event, telling unknown kinds apart from malformed ones.
    pub fn from_json(v: &serde_json::Value) -> Result<Self, OrchestratorError> {
        let kind = v
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| OrchestratorError::Validation("event has no kind".into()))?;
        if !EVENT_KINDS.contains(&kind) {
            return Err(OrchestratorError::UnknownEventKind(kind.to_string()));
        }
        serde_json::from_value(v.clone()).map_err(|e| OrchestratorError::Validation(e.to_string()))
    }
}

pub fn firewall_key() -> StateKey {
    StateKey::new("cluster", "firewall", "rules").expect("static key")
}

pub fn access_key(user: &str) -> Result<StateKey, OrchestratorError> {
    StateKey::new("cluster", "access", format!("deny:{user}"))
        .map_err(|e| OrchestratorError::Validation(e.to_string()))
}

/// Writes the desires for `event`.
pub fn remediate(
    store: &StateStore,
    event: &EmergencyEvent,
) -> Result<Vec<StateRecord>, OrchestratorError> {
    let origin = RenderId::new(format!(
        "{}{}:{}",
        RenderId::EMERGENCY_PREFIX,
        event.kind(),
        store.clock() + 1
    ));
    let node_key = |n: &NodeId, p: &str| {
        StateKey::new("node", n.as_str(), p)
            .map_err(|e| OrchestratorError::Validation(e.to_string()))
    };
    let writes: Vec<(StateKey, Value)> = match event {
        EmergencyEvent::FirewallRule { rule } => {
            let rule = rule.trim();
            if rule.is_empty() || rule.contains('\n') {
                return Err(OrchestratorError::Validation(
                    "firewall rule must be one line".into(),
                ));
            }
            let key = firewall_key();
            let current = store
                .value(&key, Kind::Desire)
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            if current.lines().any(|l| l == rule) {
                Vec::new()
            } else if current.is_empty() {
                vec![(key, Value::str(rule))]
            } else {
                vec![(key, Value::Str(format!("{current}\n{rule}")))]
            }
        }
        EmergencyEvent::RevokeAccess { user } => vec![(access_key(user)?, Value::Bool(true))],
        EmergencyEvent::EmergencyPatch { image, nodes } => nodes
            .iter()
            .map(|n| Ok((node_key(n, "image")?, Value::Digest(*image))))
            .collect::<Result<_, OrchestratorError>>()?,
        EmergencyEvent::Quarantine { node, .. } => {
            vec![(
                node_key(node, "phase")?,
                Value::str(NodePhase::Quarantined.as_str()),
            )]
        }
    };
    Ok(writes
        .into_iter()
        .map(|(k, v)| store.put_desire(&k, v, origin.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn revoke_access_writes_emergency_desire() {
        let store = StateStore::new("s");
        let recs = remediate(&store, &EmergencyEvent::RevokeAccess { user: "u".into() }).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].key.to_string(), "cluster/access/deny:u");
        assert_eq!(recs[0].value, Value::Bool(true));
        assert!(recs[0].origin.as_ref().unwrap().is_emergency());
    }

    #[test]
    fn firewall_rules_append() {
        let store = StateStore::new("s");
        for r in [
            "block 10.0.0.0/8",
            "block 192.168.0.0/16",
            "block 10.0.0.0/8",
        ] {
            remediate(&store, &EmergencyEvent::FirewallRule { rule: r.into() }).unwrap();
        }
        assert_eq!(
            store.value(&firewall_key(), Kind::Desire),
            Some(Value::str("block 10.0.0.0/8\nblock 192.168.0.0/16"))
        );
    }

    #[test]
    fn unknown_kind() {
        let v = serde_json::json!({"kind": "dance"});
        assert!(matches!(
            EmergencyEvent::from_json(&v),
            Err(OrchestratorError::UnknownEventKind(k)) if k == "dance"
        ));
        let v = serde_json::json!({"kind": "revoke_access"});
        assert!(matches!(
            EmergencyEvent::from_json(&v),
            Err(OrchestratorError::Validation(_))
        ));
    }
}
