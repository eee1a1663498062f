use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::key::StateKey;
use super::record::{Kind, Value};

/// Identifies one state store instance. Stores manage disjoint state, so a
/// query may only reference keys of a single store.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StoreId(pub String);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn holds(self, lhs: &Value, rhs: &Value) -> bool {
        let ord = lhs.cmp(rhs);
        match self {
            CmpOp::Eq => lhs == rhs,
            CmpOp::Ne => lhs != rhs,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clause {
    pub store: StoreId,
    pub key: StateKey,
    pub kind: Kind,
    pub op: CmpOp,
    pub value: Value,
}

/// A conjunction of clauses. An absent record makes its clause false.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadyQuery {
    pub clauses: Vec<Clause>,
}

impl ReadyQuery {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fact(mut self, store: &StoreId, key: StateKey, op: CmpOp, value: Value) -> Self {
        self.clauses.push(Clause {
            store: store.clone(),
            key,
            kind: Kind::Fact,
            op,
            value,
        });
        self
    }

    /// "Is this node ready for reboot?": services are up and no jobs run.
    pub fn ready_for_reboot(store: &StoreId, node: &str) -> Self {
        Self::new()
            .fact(
                store,
                StateKey::node(node, "phase"),
                CmpOp::Eq,
                Value::str("ServicesReady"),
            )
            .fact(
                store,
                StateKey::node(node, "jobs"),
                CmpOp::Eq,
                Value::Int(0),
            )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consulted {
    pub key: StateKey,
    pub kind: Kind,
    pub version: Option<u64>,
}

/// Answer to a [`ReadyQuery`] plus the record versions it was computed from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Readiness {
    pub ready: bool,
    pub consulted: Vec<Consulted>,
}
