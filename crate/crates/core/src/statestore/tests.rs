use proptest::prelude::*;

use super::*;
use crate::digest::Digest;

fn prov() -> Principal {
    Principal::new("provisioner")
}

fn srm() -> Principal {
    Principal::new("srm")
}

fn store_with_node_lease() -> StateStore {
    let s = StateStore::new("s1");
    s.transfer_ownership(KeyRange::namespace("node"), None, prov(), 1)
        .unwrap();
    s
}

#[test]
fn put_fact_happy_path() {
    let s = store_with_node_lease();
    let k = StateKey::node("n1", "power");
    let r = s.put_fact(&prov(), &k, Value::str("on"), 1).unwrap();
    assert_eq!(r.version.counter, 1);
    assert_eq!(
        s.get(&k, Kind::Fact, ReadMode::Strong).unwrap().value,
        Value::str("on")
    );
}

#[test]
fn put_fact_by_non_owner_is_rejected() {
    let s = store_with_node_lease();
    let k = StateKey::node("n1", "power");
    assert!(matches!(
        s.put_fact(&srm(), &k, Value::str("on"), 1),
        Err(StoreError::NotOwner { .. })
    ));
    assert_eq!(s.audit_len(), 1); // only the lease
}

#[test]
fn stale_version_leaves_store_unchanged() {
    let s = store_with_node_lease();
    let k = StateKey::node("n1", "power");
    s.put_fact(&prov(), &k, Value::str("on"), 1).unwrap();
    let before = s.audit_len();
    assert!(matches!(
        s.put_fact(&prov(), &k, Value::str("off"), 1),
        Err(StoreError::StaleVersion {
            given: 1,
            latest: 1,
            ..
        })
    ));
    assert_eq!(s.value(&k, Kind::Fact), Some(Value::str("on")));
    assert_eq!(s.audit_len(), before);
    assert!(matches!(
        s.put_fact(&prov(), &k, Value::str("off"), 3),
        Err(StoreError::VersionGap { .. })
    ));
}

#[test]
fn desires_replace_and_archive() {
    let s = StateStore::new("s1");
    let k = StateKey::node("n1", "image");
    let d2 = Value::Digest(Digest::of(b"v2"));
    s.put_desire(&k, d2.clone(), RenderId::new("r7"));
    s.put_desire(&k, Value::Digest(Digest::of(b"v3")), RenderId::new("r8"));
    let latest = s.get(&k, Kind::Desire, ReadMode::Local).unwrap();
    assert_eq!(latest.origin, Some(RenderId::new("r8")));
    let archived: Vec<_> = s
        .audit_log()
        .into_iter()
        .filter_map(|e| match e {
            AuditEntry::Put { record, .. } => Some(record),
            _ => None,
        })
        .collect();
    assert_eq!(archived.len(), 2);
    assert_eq!(archived[0].origin, Some(RenderId::new("r7")));
    assert_eq!(archived[0].value, d2);
}

#[test]
fn desire_for_undiscovered_entity_is_accepted() {
    let s = StateStore::new("s1");
    let k = StateKey::node("never-seen", "phase");
    s.put_desire(&k, Value::str("ServicesReady"), RenderId::new("r1"));
    assert_eq!(s.diff("never-seen").len(), 1);
}

#[test]
fn get_errors() {
    let s = store_with_node_lease();
    assert!(matches!(
        s.get(&StateKey::node("n9", "power"), Kind::Fact, ReadMode::Strong),
        Err(StoreError::NotFound { .. })
    ));
    let img = StateKey::node("n1", "image");
    s.put_fact(&prov(), &img, Value::Digest(Digest(1)), 1)
        .unwrap();
    assert!(matches!(
        s.get(&img, Kind::Fact, ReadMode::Strong),
        Err(StoreError::ConsistencyMismatch(_))
    ));
    assert!(s.get(&img, Kind::Fact, ReadMode::Local).is_ok());
}

#[test]
fn strong_read_sees_committed_write() {
    let s = store_with_node_lease();
    let k = StateKey::node("n1", "power");
    s.put_fact(&prov(), &k, Value::str("on"), 1).unwrap();
    s.put_fact(&prov(), &k, Value::str("off"), 2).unwrap();
    assert_eq!(
        s.get(&k, Kind::Fact, ReadMode::Strong).unwrap().value,
        Value::str("off")
    );
}

#[test]
fn diff_examples() {
    let s = store_with_node_lease();
    let img = StateKey::node("n1", "image");
    let (a, b) = (Value::Digest(Digest(0xa)), Value::Digest(Digest(0xb)));
    s.put_fact(&prov(), &img, a.clone(), 1).unwrap();
    s.put_desire(&img, a.clone(), RenderId::new("r1"));
    assert!(s.diff("n1").is_empty());

    s.put_desire(&img, b.clone(), RenderId::new("r2"));
    let d = s.diff("n1");
    assert_eq!(d.len(), 1);
    assert_eq!((d[0].fact.clone(), d[0].desire.clone()), (Some(a), b));

    let phase = StateKey::node("n2", "phase");
    s.put_desire(&phase, Value::str("ServicesReady"), RenderId::new("r2"));
    let d = s.diff("n2");
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].key, phase);
    assert_eq!(d[0].fact, None);
}

#[test]
fn ownership_handoff_to_srm() {
    let s = store_with_node_lease();
    let power = StateKey::node("n1", "power");
    s.put_fact(&prov(), &power, Value::str("on"), 1).unwrap();
    let lease = s
        .transfer_ownership(KeyRange::single(&power), Some(&prov()), srm(), 2)
        .unwrap();
    assert_eq!((lease.owner.clone(), lease.epoch), (srm(), 2));
    assert!(matches!(
        s.put_fact(&prov(), &power, Value::str("off"), 2),
        Err(StoreError::NotOwner { .. })
    ));
    s.put_fact(&srm(), &power, Value::str("off"), 1).unwrap();
    // the rest of the node stays with the provisioner
    s.put_fact(&prov(), &StateKey::node("n1", "image"), Value::Int(1), 1)
        .unwrap();
    assert!(matches!(
        s.transfer_ownership(KeyRange::single(&power), Some(&srm()), prov(), 2),
        Err(StoreError::Lease(LeaseError::EpochStale { .. }))
    ));
    verify_audit(&s.audit_log()).unwrap();
}

#[test]
fn bootstrap_claim_creates_epoch_one() {
    let s = StateStore::new("s1");
    let l = s
        .transfer_ownership(KeyRange::entity("node", "n1"), None, prov(), 1)
        .unwrap();
    assert_eq!(l.epoch, 1);
}

#[test]
fn ready_for_reboot() {
    let s = store_with_node_lease();
    s.put_fact(
        &prov(),
        &StateKey::node("n1", "phase"),
        Value::str("ServicesReady"),
        1,
    )
    .unwrap();
    s.put_fact(&prov(), &StateKey::node("n1", "jobs"), Value::Int(0), 1)
        .unwrap();
    let q = ReadyQuery::ready_for_reboot(s.id(), "n1");
    let r = s.query_ready(&q).unwrap();
    assert!(r.ready);
    assert_eq!(
        r.consulted.iter().map(|c| c.version).collect::<Vec<_>>(),
        vec![Some(1), Some(1)]
    );

    s.put_fact(&prov(), &StateKey::node("n1", "jobs"), Value::Int(1), 2)
        .unwrap();
    let r = s.query_ready(&q).unwrap();
    assert!(!r.ready);
    assert_eq!(r.consulted[1].version, Some(2));
}

#[test]
fn cross_store_query_is_rejected() {
    let a = StateStore::new("a");
    let b = StateStore::new("b");
    let q = ReadyQuery::ready_for_reboot(a.id(), "n1").fact(
        b.id(),
        StateKey::node("n1", "power"),
        CmpOp::Eq,
        Value::str("on"),
    );
    assert_eq!(
        a.query_ready(&q),
        Err(StoreError::CrossStoreQuery(b.id().clone()))
    );
}

#[test]
fn audit_log_persists_and_verifies() {
    let s = store_with_node_lease();
    for v in 1..=5 {
        s.put_fact(
            &prov(),
            &StateKey::node("n1", "power"),
            Value::Int(v),
            v as u64,
        )
        .unwrap();
    }
    let mut buf = Vec::new();
    s.persist_audit(&mut buf).unwrap();
    let back = read_log(&mut buf.as_slice()).unwrap();
    assert_eq!(back, s.audit_log());
    verify_audit(&back).unwrap();
}

#[test]
fn audit_verifier_catches_forged_writer() {
    let s = store_with_node_lease();
    s.put_fact(&prov(), &StateKey::node("n1", "power"), Value::Int(1), 1)
        .unwrap();
    let mut log = s.audit_log();
    if let AuditEntry::Put { record, .. } = &mut log[1] {
        record.owner = srm();
    }
    assert!(matches!(
        verify_audit(&log),
        Err(AuditViolation::Exclusivity { .. })
    ));
}

#[test]
fn concurrent_writers_and_readers_never_tear() {
    use std::sync::Arc;
    let s = Arc::new(store_with_node_lease());
    let writers: Vec<_> = (0..4)
        .map(|w| {
            let s = s.clone();
            std::thread::spawn(move || {
                let k = StateKey::node(&format!("n{w}"), "power");
                for v in 1..=200u64 {
                    s.put_fact(&prov(), &k, Value::Int(v as i64), v).unwrap();
                }
            })
        })
        .collect();
    let reader = {
        let s = s.clone();
        std::thread::spawn(move || {
            for _ in 0..2000 {
                if let Ok(r) = s.get(&StateKey::node("n0", "power"), Kind::Fact, ReadMode::Strong) {
                    // value and version are written together
                    assert_eq!(r.value, Value::Int(r.version.counter as i64));
                }
            }
        })
    };
    for w in writers {
        w.join().unwrap();
    }
    reader.join().unwrap();
    assert_eq!(s.audit_len(), 1 + 4 * 200);
    verify_audit(&s.audit_log()).unwrap();
}

#[derive(Debug, Clone)]
enum Op {
    Put {
        owner: u8,
        entity: u8,
        version_delta: i8,
    },
    Transfer {
        entity: u8,
        from: Option<u8>,
        to: u8,
        epoch_delta: i8,
    },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0u8..3, 0u8..3, -1i8..3).prop_map(|(owner, entity, version_delta)| Op::Put { owner, entity, version_delta }),
        1 => (0u8..3, proptest::option::of(0u8..3), 0u8..3, -1i8..3)
            .prop_map(|(entity, from, to, epoch_delta)| Op::Transfer { entity, from, to, epoch_delta }),
    ]
}

proptest! {
    /// Exclusivity, per-owner monotonicity and audit completeness over
    /// arbitrary interleavings of writes and handoffs.
    #[test]
    fn audit_replay_holds_for_random_histories(ops in proptest::collection::vec(op(), 1..60)) {
        let s = StateStore::new("p");
        let who = |i: u8| Principal::new(format!("p{i}"));
        let mut accepted = 0usize;
        for op in ops {
            match op {
                Op::Put { owner, entity, version_delta } => {
                    let key = StateKey::node(&format!("e{entity}"), "power");
                    let owner = who(owner);
                    let latest = s.audit_log().iter().filter_map(|e| match e {
                        AuditEntry::Put { record, .. } if record.key == key && record.owner == owner => Some(record.version.counter),
                        _ => None,
                    }).max().unwrap_or(0);
                    let v = (latest as i64 + version_delta as i64).max(0) as u64;
                    if s.put_fact(&owner, &key, Value::Int(v as i64), v).is_ok() {
                        accepted += 1;
                    }
                }
                Op::Transfer { entity, from, to, epoch_delta } => {
                    let range = KeyRange::entity("node", &format!("e{entity}"));
                    let epoch = (s.lease_epoch(&range) as i64 + epoch_delta as i64).max(0) as u64;
                    if s.transfer_ownership(range, from.map(who).as_ref(), who(to), epoch).is_ok() {
                        accepted += 1;
                    }
                }
            }
        }
        let log = s.audit_log();
        prop_assert_eq!(log.len(), accepted);
        prop_assert!(verify_audit(&log).is_ok());
    }
}
