use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::lease::{LeaseTable, OwnershipLease};
use super::record::{Kind, Principal, StateRecord};
use crate::codec::{self, CodecError};

/// One accepted mutation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEntry {
    Put {
        seq: u64,
        record: StateRecord,
    },
    Lease {
        seq: u64,
        from: Option<Principal>,
        lease: OwnershipLease,
    },
}

impl AuditEntry {
    pub fn seq(&self) -> u64 {
        match self {
            AuditEntry::Put { seq, .. } | AuditEntry::Lease { seq, .. } => *seq,
        }
    }
}

pub fn write_log<W: Write>(w: &mut W, entries: &[AuditEntry]) -> Result<(), CodecError> {
    codec::write_records(w, entries)
}

pub fn read_log<R: Read>(r: &mut R) -> Result<Vec<AuditEntry>, CodecError> {
    codec::read_records(r)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuditViolation {
    #[error("entry {seq}: fact written by {writer} while lease held by {holder:?}")]
    Exclusivity {
        seq: u64,
        writer: Principal,
        holder: Option<Principal>,
    },
    #[error("entry {seq}: version {version} not above {previous}")]
    Monotonicity {
        seq: u64,
        version: u64,
        previous: u64,
    },
    #[error("entry {seq}: sequence number repeated or out of order")]
    Sequence { seq: u64 },
    #[error("entry {seq}: lease replay failed: {reason}")]
    Lease { seq: u64, reason: String },
}

/// Replays an audit log against its own lease history, checking that every
/// fact was written by the lease holder of the moment, that per-owner
/// versions strictly increase and that every sequence number appears once.
pub fn verify(entries: &[AuditEntry]) -> Result<(), AuditViolation> {
    let mut leases = LeaseTable::default();
    let mut versions: HashMap<(String, Kind, Principal), u64> = HashMap::new();
    let mut last_seq = None;
    for e in entries {
        let seq = e.seq();
        if last_seq.is_some_and(|s| seq <= s) {
            return Err(AuditViolation::Sequence { seq });
        }
        last_seq = Some(seq);
        match e {
            AuditEntry::Lease { from, lease, .. } => {
                leases
                    .transfer(
                        lease.range.clone(),
                        from.as_ref(),
                        lease.owner.clone(),
                        lease.epoch,
                    )
                    .map_err(|err| AuditViolation::Lease {
                        seq,
                        reason: err.to_string(),
                    })?;
            }
            AuditEntry::Put { record, .. } => {
                if record.kind == Kind::Fact {
                    let holder = leases.owner_of(&record.key).map(|l| l.owner.clone());
                    if holder.as_ref() != Some(&record.owner) {
                        return Err(AuditViolation::Exclusivity {
                            seq,
                            writer: record.owner.clone(),
                            holder,
                        });
                    }
                }
                let slot = versions
                    .entry((record.key.to_string(), record.kind, record.owner.clone()))
                    .or_insert(0);
                if record.version.counter <= *slot {
                    return Err(AuditViolation::Monotonicity {
                        seq,
                        version: record.version.counter,
                        previous: *slot,
                    });
                }
                *slot = record.version.counter;
            }
        }
    }
    Ok(())
}
