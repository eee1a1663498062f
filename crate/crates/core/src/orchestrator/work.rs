use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::fleetmodel::{ActionId, NodeId, NodePhase};
use crate::statestore::{KeyRange, Kind, StateKey, StateStore, Value};

/// Namespace holding orchestrator intents and its lease heartbeat.
pub const ORCH_NS: &str = "orchestrator";
/// Principal that executes node actions and owns node facts.
pub const PROVISIONER: &str = "provisioner";
/// Actions driven by workload and faults; the orchestrator never sends them.
pub const WORKLOAD_ACTIONS: [&str; 4] = ["start_job", "finish_job", "drain_complete", "crash"];

pub fn is_workload_action(action: &str) -> bool {
    WORKLOAD_ACTIONS.contains(&action)
}

/// One unit of work handed to the provisioner.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Work {
    /// Run one mutation-graph action on a node.
    Node {
        node: NodeId,
        action: ActionId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image: Option<Digest>,
    },
    /// Make a non-node fact equal to its desire.
    Apply { key: StateKey, value: Value },
}

impl Work {
    /// At most one unit of work is in flight per slot.
    pub fn slot(&self) -> String {
        match self {
            Work::Node { node, .. } => node.0.clone(),
            Work::Apply { key, .. } => key.to_string(),
        }
    }

    pub fn intent_key(&self) -> StateKey {
        match self {
            Work::Node { node, .. } => StateKey::new(ORCH_NS, node.as_str(), "intent")
                .expect("node ids are valid key components"),
            Work::Apply { key, .. } => StateKey::new(
                ORCH_NS,
                key.entity(),
                format!("intent.{}.{}", key.namespace(), key.property()),
            )
            .expect("derived from a valid key"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    Emergency,
    Flow,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCommand {
    /// `<principal>:<epoch>:<counter>`, unique per dispatch decision. A
    /// redelivered command keeps its tag so the receiver can drop it.
    pub tag: String,
    pub work: Work,
    pub priority: Priority,
}

/// Epoch part of a command tag.
pub fn tag_epoch(tag: &str) -> Option<u64> {
    let mut parts = tag.rsplitn(3, ':');
    parts.next()?;
    parts.next()?.parse().ok()
}

pub trait Dispatcher {
    fn dispatch(&mut self, cmd: ActionCommand);
}

impl Dispatcher for Vec<ActionCommand> {
    fn dispatch(&mut self, cmd: ActionCommand) {
        self.push(cmd);
    }
}

/// Write-ahead record of a dispatch decision.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub tag: String,
    pub work: Work,
    pub at: u64,
}

impl Intent {
    pub fn to_value(&self) -> Value {
        Value::Str(serde_json::to_string(self).expect("intents serialize"))
    }

    pub fn from_value(v: &Value) -> Option<Self> {
        serde_json::from_str(v.as_str()?).ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionState {
    Accepted,
    Done,
    Failed,
    Rejected,
}

impl ActionState {
    pub fn is_final(self) -> bool {
        self != ActionState::Accepted
    }

    fn as_str(self) -> &'static str {
        match self {
            ActionState::Accepted => "accepted",
            ActionState::Done => "done",
            ActionState::Failed => "failed",
            ActionState::Rejected => "rejected",
        }
    }
}

/// The provisioner's report on the last command it received for a node,
/// kept in the `node/<id>/action` fact as `"<tag> <state>"`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionStatus {
    pub tag: String,
    pub state: ActionState,
}

impl ActionStatus {
    pub fn key(node: &str) -> StateKey {
        StateKey::node(node, "action")
    }

    pub fn to_value(&self) -> Value {
        Value::Str(self.to_string())
    }

    pub fn from_value(v: &Value) -> Option<Self> {
        v.as_str()?.parse().ok()
    }

    pub fn read(store: &StateStore, node: &str) -> Option<Self> {
        Self::from_value(&store.value(&Self::key(node), Kind::Fact)?)
    }
}

impl fmt::Display for ActionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.tag, self.state.as_str())
    }
}

impl FromStr for ActionStatus {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        let (tag, state) = s.rsplit_once(' ').ok_or(())?;
        let state = match state {
            "accepted" => ActionState::Accepted,
            "done" => ActionState::Done,
            "failed" => ActionState::Failed,
            "rejected" => ActionState::Rejected,
            _ => return Err(()),
        };
        Ok(ActionStatus {
            tag: tag.to_string(),
            state,
        })
    }
}

pub fn phase_of(store: &StateStore, node: &str) -> Option<NodePhase> {
    store
        .value(&StateKey::node(node, "phase"), Kind::Fact)?
        .as_str()?
        .parse()
        .ok()
}

pub fn image_of(store: &StateStore, node: &str) -> Option<Digest> {
    store
        .value(&StateKey::node(node, "image"), Kind::Fact)?
        .as_digest()
}

/// Nodes known to the store: every entity with a phase fact.
pub fn fleet_nodes(store: &StateStore) -> Vec<NodeId> {
    store
        .scan(&KeyRange::namespace("node"), Kind::Fact)
        .into_iter()
        .filter(|r| r.key.property() == "phase")
        .map(|r| NodeId::new(r.key.entity()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_text() {
        let s = ActionStatus {
            tag: "orch-a:2:17".into(),
            state: ActionState::Failed,
        };
        assert_eq!(s.to_string(), "orch-a:2:17 failed");
        assert_eq!(s.to_string().parse::<ActionStatus>().unwrap(), s);
        assert!("garbage".parse::<ActionStatus>().is_err());
    }

    #[test]
    fn intent_keys() {
        let w = Work::Apply {
            key: StateKey::new("cluster", "access", "deny:u").unwrap(),
            value: Value::Bool(true),
        };
        assert_eq!(
            w.intent_key().to_string(),
            "orchestrator/access/intent.cluster.deny:u"
        );
        let i = Intent {
            tag: "t".into(),
            work: w,
            at: 3,
        };
        assert_eq!(Intent::from_value(&i.to_value()).unwrap(), i);
    }
}
