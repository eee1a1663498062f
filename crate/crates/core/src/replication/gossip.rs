use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::digest::Digest;
use crate::net::Network;
use crate::statestore::{Consistency, Kind, Principal, StateKey, StateRecord, Value, Version};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum GossipError {
    #[error("cannot merge records for different keys {} and {}", .0.0, .0.1)]
    KeyMismatch(Box<(StateKey, StateKey)>),
    #[error("peer {0} unreachable")]
    RoundFailed(String),
}

fn canonical(r: &StateRecord) -> Vec<u8> {
    serde_json::to_vec(r).expect("records serialize")
}

/// Version summary of one record. Summaries order records the same way
/// [`merge`] does, so a peer's digest is enough to decide what to send.
///
/// A record whose vector dominates has a strictly larger counter sum, so
/// dominance always wins; concurrent records fall through to sum,
/// timestamp, owner and finally a content digest.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Summary {
    pub vv_sum: u64,
    pub timestamp: u64,
    pub owner: Principal,
    pub content: Digest,
}

impl Summary {
    pub fn of(r: &StateRecord) -> Self {
        Summary {
            vv_sum: r.version.vector.sum(),
            timestamp: r.timestamp,
            owner: r.owner.clone(),
            content: Digest::of(&canonical(r)),
        }
    }
}

fn rank(a: &StateRecord, b: &StateRecord) -> Ordering {
    Summary::of(a)
        .cmp(&Summary::of(b))
        .then_with(|| canonical(a).cmp(&canonical(b)))
}

/// Picks the winner of two versions of one record. Commutative,
/// associative and idempotent.
pub fn merge(a: &StateRecord, b: &StateRecord) -> Result<StateRecord, GossipError> {
    if (&a.key, a.kind) != (&b.key, b.kind) {
        return Err(GossipError::KeyMismatch(Box::new((
            a.key.clone(),
            b.key.clone(),
        ))));
    }
    Ok(match rank(a, b) {
        Ordering::Less => b.clone(),
        _ => a.clone(),
    })
}

/// Per-key version summary of a replica's content.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GossipDigest {
    pub entries: BTreeMap<(StateKey, Kind), Summary>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RoundStats {
    /// Records sent from the initiator to the peer.
    pub pushed: usize,
    /// Records sent from the peer to the initiator.
    pub pulled: usize,
}

impl RoundStats {
    pub fn deltas(&self) -> usize {
        self.pushed + self.pulled
    }
}

/// One replica's eventual-key records.
#[derive(Clone, Debug)]
pub struct GossipReplica {
    pub id: String,
    records: BTreeMap<(StateKey, Kind), StateRecord>,
    clock: u64,
}

impl GossipReplica {
    pub fn new(id: impl Into<String>) -> Self {
        GossipReplica {
            id: id.into(),
            records: BTreeMap::new(),
            clock: 0,
        }
    }

    /// A local write. The record's vector extends the current one with this
    /// replica's counter; its timestamp is a Lamport clock.
    pub fn write(
        &mut self,
        key: StateKey,
        kind: Kind,
        value: Value,
        owner: Principal,
    ) -> StateRecord {
        let prev = self.records.get(&(key.clone(), kind));
        let mut vector = prev.map(|r| r.version.vector.clone()).unwrap_or_default();
        vector.bump(&self.id);
        let counter = prev.map_or(0, |r| r.version.counter) + 1;
        self.clock += 1;
        let rec = StateRecord {
            key: key.clone(),
            kind,
            value,
            version: Version { counter, vector },
            owner,
            origin: None,
            timestamp: self.clock,
            consistency: Consistency::Eventual,
        };
        self.records.insert((key, kind), rec.clone());
        rec
    }

    /// Merges a remote record; returns whether local state changed.
    pub fn absorb(&mut self, remote: &StateRecord) -> bool {
        self.clock = self.clock.max(remote.timestamp);
        let slot = (remote.key.clone(), remote.kind);
        match self.records.get(&slot) {
            Some(local) => {
                let won = merge(local, remote).expect("same key");
                if &won != local {
                    self.records.insert(slot, won);
                    true
                } else {
                    false
                }
            }
            None => {
                self.records.insert(slot, remote.clone());
                true
            }
        }
    }

    pub fn get(&self, key: &StateKey, kind: Kind) -> Option<&StateRecord> {
        self.records.get(&(key.clone(), kind))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn digest(&self) -> GossipDigest {
        GossipDigest {
            entries: self
                .records
                .iter()
                .map(|(k, r)| (k.clone(), Summary::of(r)))
                .collect(),
        }
    }

    /// Records the holder of `digest` lacks or holds in a losing version.
    pub fn delta_for(&self, digest: &GossipDigest) -> Vec<StateRecord> {
        self.records
            .iter()
            .filter(|(k, r)| {
                digest
                    .entries
                    .get(*k)
                    .is_none_or(|theirs| Summary::of(r) > *theirs)
            })
            .map(|(_, r)| r.clone())
            .collect()
    }

    /// Canonical serialized content, for byte-level comparison.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.records.values().collect::<Vec<_>>()).expect("records serialize")
    }
}

/// Exchanges digests and then deltas in both directions. Afterwards both
/// sides hold the merge of every exchanged key.
pub fn gossip_round(
    local: &mut GossipReplica,
    peer: &mut GossipReplica,
    net: &Network<String>,
) -> Result<RoundStats, GossipError> {
    if !net.reachable(&local.id, &peer.id) {
        return Err(GossipError::RoundFailed(peer.id.clone()));
    }
    let to_peer = local.delta_for(&peer.digest());
    let to_local = peer.delta_for(&local.digest());
    for r in &to_peer {
        peer.absorb(r);
    }
    for r in &to_local {
        local.absorb(r);
    }
    Ok(RoundStats {
        pushed: to_peer.len(),
        pulled: to_local.len(),
    })
}

/// One round: a uniformly chosen live replica gossips with a uniformly
/// chosen live peer it can reach. Returns `None` when no such pair exists.
pub fn random_round<R: Rng>(
    replicas: &mut [GossipReplica],
    net: &Network<String>,
    rng: &mut R,
) -> Option<Result<RoundStats, GossipError>> {
    let live: Vec<usize> = (0..replicas.len())
        .filter(|&i| net.is_up(&replicas[i].id))
        .collect();
    let &a = live.choose(rng)?;
    let peers: Vec<usize> = live.iter().copied().filter(|&b| b != a).collect();
    let &b = peers.choose(rng)?;
    let (x, y) = if a < b {
        let (l, r) = replicas.split_at_mut(b);
        (&mut l[a], &mut r[0])
    } else {
        let (l, r) = replicas.split_at_mut(a);
        (&mut r[0], &mut l[b])
    };
    Some(gossip_round(x, y, net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statestore::VersionVector;
    use proptest::prelude::*;

    fn rec(vv: &[(&str, u64)], ts: u64, owner: &str, v: i64) -> StateRecord {
        StateRecord {
            key: StateKey::node("n1", "image"),
            kind: Kind::Fact,
            value: Value::Int(v),
            version: Version {
                counter: 1,
                vector: VersionVector(vv.iter().map(|(r, c)| (r.to_string(), *c)).collect()),
            },
            owner: Principal::new(owner),
            origin: None,
            timestamp: ts,
            consistency: Consistency::Eventual,
        }
    }

    #[test]
    fn idempotent_and_dominance() {
        let s = rec(&[("a", 1)], 1, "p", 0);
        assert_eq!(merge(&s, &s).unwrap(), s);
        let newer = rec(&[("a", 2)], 1, "p", 1);
        let older = rec(&[("a", 1)], 9, "z", 2);
        assert_eq!(merge(&newer, &older).unwrap(), newer);
        assert_eq!(merge(&older, &newer).unwrap(), newer);
    }

    #[test]
    fn concurrent_tie_break_both_orders() {
        let p = rec(&[("a", 1)], 5, "p", 1);
        let q = rec(&[("b", 1)], 5, "q", 2);
        for (x, y) in [(&p, &q), (&q, &p)] {
            assert_eq!(merge(x, y).unwrap(), q);
        }
    }

    #[test]
    fn key_mismatch() {
        let a = rec(&[("a", 1)], 1, "p", 0);
        let mut b = a.clone();
        b.key = StateKey::node("n2", "image");
        assert!(matches!(merge(&a, &b), Err(GossipError::KeyMismatch(..))));
    }

    fn arb_rec() -> impl Strategy<Value = StateRecord> {
        (
            proptest::collection::btree_map("[abc]", 0u64..4, 0..3),
            0u64..4,
            "[pq]",
            0i64..3,
        )
            .prop_map(|(vv, ts, owner, v)| {
                let mut r = rec(&[], ts, &owner, v);
                r.version.vector = VersionVector(vv);
                r
            })
    }

    proptest! {
        #[test]
        fn merge_algebra(a in arb_rec(), b in arb_rec(), c in arb_rec()) {
            prop_assert_eq!(merge(&a, &a).unwrap(), a.clone());
            prop_assert_eq!(merge(&a, &b).unwrap(), merge(&b, &a).unwrap());
            let l = merge(&merge(&a, &b).unwrap(), &c).unwrap();
            let r = merge(&a, &merge(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(l, r);
            if a.version.vector.partial_cmp_vv(&b.version.vector) == Some(Ordering::Greater) {
                prop_assert_eq!(merge(&a, &b).unwrap(), a);
            }
        }
    }

    fn pair() -> (GossipReplica, GossipReplica, Network<String>) {
        (
            GossipReplica::new("a"),
            GossipReplica::new("b"),
            Network::new(),
        )
    }

    #[test]
    fn identical_replicas_exchange_nothing() {
        let (mut a, mut b, net) = pair();
        a.write(
            StateKey::node("n1", "image"),
            Kind::Fact,
            Value::Int(1),
            Principal::new("p"),
        );
        gossip_round(&mut a, &mut b, &net).unwrap();
        let again = gossip_round(&mut a, &mut b, &net).unwrap();
        assert_eq!(again.deltas(), 0);
        assert_eq!(a.snapshot_bytes(), b.snapshot_bytes());
    }

    #[test]
    fn newer_version_propagates() {
        let (mut a, mut b, net) = pair();
        let k = StateKey::node("n1", "image");
        a.write(k.clone(), Kind::Fact, Value::Int(1), Principal::new("p"));
        gossip_round(&mut a, &mut b, &net).unwrap();
        let newer = a.write(k.clone(), Kind::Fact, Value::Int(2), Principal::new("p"));
        let stats = gossip_round(&mut b, &mut a, &net).unwrap();
        assert_eq!(
            stats,
            RoundStats {
                pushed: 0,
                pulled: 1
            }
        );
        assert_eq!(b.get(&k, Kind::Fact), Some(&newer));
    }

    #[test]
    fn partitioned_peer_fails_round() {
        let (mut a, mut b, mut net) = pair();
        a.write(
            StateKey::node("n1", "image"),
            Kind::Fact,
            Value::Int(1),
            Principal::new("p"),
        );
        net.isolate("b".to_string());
        let before = (a.snapshot_bytes(), b.snapshot_bytes());
        assert_eq!(
            gossip_round(&mut a, &mut b, &net),
            Err(GossipError::RoundFailed("b".into()))
        );
        assert_eq!(before, (a.snapshot_bytes(), b.snapshot_bytes()));
    }
}
