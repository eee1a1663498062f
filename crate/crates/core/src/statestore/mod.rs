//! Centralized store of facts and desires.
//!
//! Facts are owned: only the principal holding the [`OwnershipLease`] over
//! a key may write its fact, with a per-owner version that must advance by
//! exactly one. Desires come from configuration renders and carry the render
//! id they originated from. Every accepted mutation is appended to an audit
//! log that is never truncated within a run.

mod audit;
mod key;
mod lease;
mod policy;
mod query;
mod record;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

pub use audit::{read_log, verify as verify_audit, write_log, AuditEntry, AuditViolation};
pub use key::{KeyRange, MalformedKey, StateKey};
pub use lease::{LeaseError, LeaseTable, OwnershipLease};
pub use policy::{ConsistencyPolicy, PolicyRule, DEFAULT_POLICY};
pub use query::{Clause, CmpOp, Consulted, Readiness, ReadyQuery, StoreId};
pub use record::{
    Consistency, Kind, Principal, ReadMode, RenderId, StateRecord, Value, Version, VersionVector,
};

use crate::codec::CodecError;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("{writer} does not hold the lease for {key} (holder: {holder:?})")]
    NotOwner {
        key: StateKey,
        writer: Principal,
        holder: Option<Principal>,
    },
    #[error("version {given} for {key} is stale (latest {latest})")]
    StaleVersion {
        key: StateKey,
        given: u64,
        latest: u64,
    },
    #[error("version {given} for {key} skips ahead of latest {latest}")]
    VersionGap {
        key: StateKey,
        given: u64,
        latest: u64,
    },
    #[error("no {kind:?} for {key}")]
    NotFound { key: StateKey, kind: Kind },
    #[error("strong read of eventual key {0}")]
    ConsistencyMismatch(StateKey),
    #[error("query references store {0:?}, which is not this store")]
    CrossStoreQuery(StoreId),
    #[error(transparent)]
    Lease(#[from] LeaseError),
}

/// One difference between a desire and the corresponding fact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffEntry {
    pub key: StateKey,
    pub fact: Option<Value>,
    pub desire: Value,
    pub origin: Option<RenderId>,
}

/// A state mutation in serializable form, as carried by the replicated log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    PutFact {
        owner: Principal,
        key: StateKey,
        value: Value,
        version: u64,
    },
    PutDesire {
        key: StateKey,
        value: Value,
        origin: RenderId,
    },
    Transfer {
        range: KeyRange,
        from: Option<Principal>,
        to: Principal,
        epoch: u64,
    },
}

#[derive(Default)]
struct Inner {
    latest: BTreeMap<(StateKey, Kind), StateRecord>,
    by_entity: HashMap<String, BTreeSet<StateKey>>,
    owner_versions: HashMap<(StateKey, Principal), u64>,
    leases: LeaseTable,
    audit: Vec<AuditEntry>,
    clock: u64,
    changes: Vec<String>,
}

impl Inner {
    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn install(&mut self, record: StateRecord) -> StateRecord {
        let seq = record.timestamp;
        let entity = record.key.entity().to_string();
        self.by_entity
            .entry(entity.clone())
            .or_default()
            .insert(record.key.clone());
        self.latest
            .insert((record.key.clone(), record.kind), record.clone());
        self.audit.push(AuditEntry::Put {
            seq,
            record: record.clone(),
        });
        self.changes.push(entity);
        record
    }

    fn next_vector(&self, key: &StateKey, kind: Kind, replica: &str) -> VersionVector {
        let mut vv = self
            .latest
            .get(&(key.clone(), kind))
            .map(|r| r.version.vector.clone())
            .unwrap_or_default();
        vv.bump(replica);
        vv
    }
}

pub const DESIRE_OWNER: &str = "config";

/// The state store. Cheap to share behind an `Arc`; all methods take `&self`.
pub struct StateStore {
    id: StoreId,
    replica: String,
    policy: ConsistencyPolicy,
    inner: RwLock<Inner>,
}

impl StateStore {
    pub fn new(id: impl Into<String>) -> Self {
        Self::with_policy(id, ConsistencyPolicy::default())
    }

    pub fn with_policy(id: impl Into<String>, policy: ConsistencyPolicy) -> Self {
        let id = id.into();
        StateStore {
            replica: id.clone(),
            id: StoreId(id),
            policy,
            inner: RwLock::new(Inner::default()),
        }
    }

    pub fn id(&self) -> &StoreId {
        &self.id
    }

    pub fn policy(&self) -> &ConsistencyPolicy {
        &self.policy
    }

    pub fn consistency_of(&self, key: &StateKey) -> Consistency {
        self.policy.class_of(key)
    }

    /// Writes a fact. `version` must be exactly one above the owner's latest
    /// version for this key.
    pub fn put_fact(
        &self,
        owner: &Principal,
        key: &StateKey,
        value: Value,
        version: u64,
    ) -> Result<StateRecord, StoreError> {
        let mut inner = self.inner.write();
        self.put_fact_locked(&mut inner, owner, key, value, Some(version))
    }

    /// Writes a fact at the owner's next version.
    pub fn put_fact_next(
        &self,
        owner: &Principal,
        key: &StateKey,
        value: Value,
    ) -> Result<StateRecord, StoreError> {
        let mut inner = self.inner.write();
        self.put_fact_locked(&mut inner, owner, key, value, None)
    }

    fn put_fact_locked(
        &self,
        inner: &mut Inner,
        owner: &Principal,
        key: &StateKey,
        value: Value,
        version: Option<u64>,
    ) -> Result<StateRecord, StoreError> {
        let holder = inner.leases.owner_of(key).map(|l| l.owner.clone());
        if holder.as_ref() != Some(owner) {
            return Err(StoreError::NotOwner {
                key: key.clone(),
                writer: owner.clone(),
                holder,
            });
        }
        let latest = inner
            .owner_versions
            .get(&(key.clone(), owner.clone()))
            .copied()
            .unwrap_or(0);
        let version = version.unwrap_or(latest + 1);
        if version <= latest {
            return Err(StoreError::StaleVersion {
                key: key.clone(),
                given: version,
                latest,
            });
        }
        if version > latest + 1 {
            return Err(StoreError::VersionGap {
                key: key.clone(),
                given: version,
                latest,
            });
        }
        let consistency = self.policy.class_of(key);
        let vector = match consistency {
            Consistency::Eventual => inner.next_vector(key, Kind::Fact, &self.replica),
            Consistency::Strong => VersionVector::default(),
        };
        let timestamp = inner.tick();
        inner
            .owner_versions
            .insert((key.clone(), owner.clone()), version);
        Ok(inner.install(StateRecord {
            key: key.clone(),
            kind: Kind::Fact,
            value,
            version: Version {
                counter: version,
                vector,
            },
            owner: owner.clone(),
            origin: None,
            timestamp,
            consistency,
        }))
    }

    /// Replaces the latest desire for `key`. Desires may precede discovery
    /// of the entity they describe.
    pub fn put_desire(&self, key: &StateKey, value: Value, origin: RenderId) -> StateRecord {
        let mut inner = self.inner.write();
        let owner = Principal::new(DESIRE_OWNER);
        let counter = inner
            .owner_versions
            .get(&(key.clone(), owner.clone()))
            .copied()
            .unwrap_or(0)
            + 1;
        inner
            .owner_versions
            .insert((key.clone(), owner.clone()), counter);
        let consistency = self.policy.class_of(key);
        let vector = match consistency {
            Consistency::Eventual => inner.next_vector(key, Kind::Desire, &self.replica),
            Consistency::Strong => VersionVector::default(),
        };
        let timestamp = inner.tick();
        inner.install(StateRecord {
            key: key.clone(),
            kind: Kind::Desire,
            value,
            version: Version { counter, vector },
            owner,
            origin: Some(origin),
            timestamp,
            consistency,
        })
    }

    pub fn get(
        &self,
        key: &StateKey,
        kind: Kind,
        mode: ReadMode,
    ) -> Result<StateRecord, StoreError> {
        if mode == ReadMode::Strong && self.policy.class_of(key) == Consistency::Eventual {
            return Err(StoreError::ConsistencyMismatch(key.clone()));
        }
        self.inner
            .read()
            .latest
            .get(&(key.clone(), kind))
            .cloned()
            .ok_or_else(|| StoreError::NotFound {
                key: key.clone(),
                kind,
            })
    }

    /// Latest value regardless of consistency class; `None` when absent.
    pub fn value(&self, key: &StateKey, kind: Kind) -> Option<Value> {
        self.inner
            .read()
            .latest
            .get(&(key.clone(), kind))
            .map(|r| r.value.clone())
    }

    /// Desires of `entity` whose fact is absent or different, in key order.
    pub fn diff(&self, entity: &str) -> Vec<DiffEntry> {
        let inner = self.inner.read();
        let Some(keys) = inner.by_entity.get(entity) else {
            return Vec::new();
        };
        keys.iter()
            .filter_map(|k| {
                let desire = inner.latest.get(&(k.clone(), Kind::Desire))?;
                let fact = inner.latest.get(&(k.clone(), Kind::Fact)).map(|r| &r.value);
                (fact != Some(&desire.value)).then(|| DiffEntry {
                    key: k.clone(),
                    fact: fact.cloned(),
                    desire: desire.value.clone(),
                    origin: desire.origin.clone(),
                })
            })
            .collect()
    }

    pub fn transfer_ownership(
        &self,
        range: KeyRange,
        from: Option<&Principal>,
        to: Principal,
        epoch: u64,
    ) -> Result<OwnershipLease, StoreError> {
        let mut inner = self.inner.write();
        let lease = inner.leases.transfer(range, from, to, epoch)?;
        let seq = inner.tick();
        inner.audit.push(AuditEntry::Lease {
            seq,
            from: from.cloned(),
            lease: lease.clone(),
        });
        Ok(lease)
    }

    pub fn lease_for(&self, key: &StateKey) -> Option<OwnershipLease> {
        self.inner.read().leases.owner_of(key).cloned()
    }

    pub fn lease_epoch(&self, range: &KeyRange) -> u64 {
        self.inner.read().leases.current_epoch(range)
    }

    /// Evaluates a conjunction over a single snapshot of this store.
    pub fn query_ready(&self, query: &ReadyQuery) -> Result<Readiness, StoreError> {
        if let Some(c) = query.clauses.iter().find(|c| c.store != self.id) {
            return Err(StoreError::CrossStoreQuery(c.store.clone()));
        }
        let inner = self.inner.read();
        let mut ready = true;
        let mut consulted = Vec::with_capacity(query.clauses.len());
        for c in &query.clauses {
            let rec = inner.latest.get(&(c.key.clone(), c.kind));
            ready &= rec.is_some_and(|r| c.op.holds(&r.value, &c.value));
            consulted.push(Consulted {
                key: c.key.clone(),
                kind: c.kind,
                version: rec.map(|r| r.version.counter),
            });
        }
        Ok(Readiness { ready, consulted })
    }

    /// Applies a serialized mutation, as a replicated state machine would.
    pub fn apply(&self, m: &Mutation) -> Result<(), StoreError> {
        match m {
            Mutation::PutFact {
                owner,
                key,
                value,
                version,
            } => self.put_fact(owner, key, value.clone(), *version).map(drop),
            Mutation::PutDesire { key, value, origin } => {
                self.put_desire(key, value.clone(), origin.clone());
                Ok(())
            }
            Mutation::Transfer {
                range,
                from,
                to,
                epoch,
            } => self
                .transfer_ownership(range.clone(), from.as_ref(), to.clone(), *epoch)
                .map(drop),
        }
    }

    /// Entities touched since `cursor`, and the new cursor. Repeats are not
    /// collapsed.
    pub fn changes_since(&self, cursor: usize) -> (Vec<String>, usize) {
        let inner = self.inner.read();
        let from = cursor.min(inner.changes.len());
        (inner.changes[from..].to_vec(), inner.changes.len())
    }

    pub fn entities(&self) -> Vec<String> {
        let mut v: Vec<String> = self.inner.read().by_entity.keys().cloned().collect();
        v.sort();
        v
    }

    /// Latest records whose key lies in `range`, in key order.
    pub fn scan(&self, range: &KeyRange, kind: Kind) -> Vec<StateRecord> {
        let inner = self.inner.read();
        let start = (range.start_key(), Kind::Fact);
        inner
            .latest
            .range(start..)
            .take_while(|((k, _), _)| range.end_key().is_none_or(|e| *k < e))
            .filter(|((_, kd), _)| *kd == kind)
            .map(|(_, r)| r.clone())
            .collect()
    }

    pub fn audit_len(&self) -> usize {
        self.inner.read().audit.len()
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.inner.read().audit.clone()
    }

    pub fn persist_audit<W: Write>(&self, w: &mut W) -> Result<(), CodecError> {
        write_log(w, &self.inner.read().audit)
    }

    /// Logical time of the last accepted mutation.
    pub fn clock(&self) -> u64 {
        self.inner.read().clock
    }
}

#[cfg(test)]
mod tests;
