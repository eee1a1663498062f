use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::key::{KeyRange, StateKey};
use super::record::Principal;

/// Grants one principal exclusive write access to the facts in `range`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OwnershipLease {
    pub range: KeyRange,
    pub owner: Principal,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LeaseError {
    #[error("epoch {requested} is not newer than current epoch {current}")]
    EpochStale { requested: u64, current: u64 },
    #[error("range is owned by {actual:?}, not {claimed:?}")]
    WrongCurrentOwner {
        claimed: Option<Principal>,
        actual: Option<Principal>,
    },
}

/// Active leases are pairwise disjoint, indexed by range start.
#[derive(Clone, Debug, Default)]
pub struct LeaseTable {
    active: BTreeMap<StateKey, OwnershipLease>,
    history: Vec<OwnershipLease>,
}

impl LeaseTable {
    pub fn owner_of(&self, key: &StateKey) -> Option<&OwnershipLease> {
        self.active
            .range(..=key.clone())
            .next_back()
            .map(|(_, l)| l)
            .filter(|l| l.range.contains(key))
    }

    /// Highest epoch ever granted over any part of `range`.
    pub fn current_epoch(&self, range: &KeyRange) -> u64 {
        self.history
            .iter()
            .filter(|l| l.range.overlaps(range))
            .map(|l| l.epoch)
            .max()
            .unwrap_or(0)
    }

    pub fn active(&self) -> impl Iterator<Item = &OwnershipLease> {
        self.active.values()
    }

    pub fn history(&self) -> &[OwnershipLease] {
        &self.history
    }

    fn overlapping(&self, range: &KeyRange) -> Vec<OwnershipLease> {
        self.active
            .values()
            .filter(|l| l.range.overlaps(range))
            .cloned()
            .collect()
    }

    /// Hands `range` from `from` (or from nobody) to `to`.
    ///
    /// Leases that only partially overlap `range` keep their remaining parts
    /// under their existing owner and epoch.
    pub fn transfer(
        &mut self,
        range: KeyRange,
        from: Option<&Principal>,
        to: Principal,
        epoch: u64,
    ) -> Result<OwnershipLease, LeaseError> {
        let current = self.current_epoch(&range);
        if epoch <= current {
            return Err(LeaseError::EpochStale {
                requested: epoch,
                current,
            });
        }
        let overlapping = self.overlapping(&range);
        match from {
            None => {
                if let Some(l) = overlapping.first() {
                    return Err(LeaseError::WrongCurrentOwner {
                        claimed: None,
                        actual: Some(l.owner.clone()),
                    });
                }
            }
            Some(from) => {
                if overlapping.is_empty() {
                    return Err(LeaseError::WrongCurrentOwner {
                        claimed: Some(from.clone()),
                        actual: None,
                    });
                }
                if let Some(l) = overlapping.iter().find(|l| &l.owner != from) {
                    return Err(LeaseError::WrongCurrentOwner {
                        claimed: Some(from.clone()),
                        actual: Some(l.owner.clone()),
                    });
                }
            }
        }
        for old in overlapping {
            self.active.remove(&old.range.start_key());
            for rest in old.range.minus(&range) {
                let piece = OwnershipLease {
                    range: rest,
                    owner: old.owner.clone(),
                    epoch: old.epoch,
                };
                self.active.insert(piece.range.start_key(), piece);
            }
        }
        let lease = OwnershipLease {
            range,
            owner: to,
            epoch,
        };
        self.active.insert(lease.range.start_key(), lease.clone());
        self.history.push(lease.clone());
        Ok(lease)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Principal {
        Principal::new(s)
    }

    #[test]
    fn bootstrap_then_handoff() {
        let mut t = LeaseTable::default();
        let range = KeyRange::single(&StateKey::node("n1", "power"));
        let l = t
            .transfer(range.clone(), None, p("provisioner"), 1)
            .unwrap();
        assert_eq!(l.epoch, 1);
        let l2 = t
            .transfer(range.clone(), Some(&p("provisioner")), p("srm"), 2)
            .unwrap();
        assert_eq!((l2.owner.as_str(), l2.epoch), ("srm", 2));
        assert_eq!(
            t.owner_of(&StateKey::node("n1", "power")).unwrap().owner,
            p("srm")
        );
    }

    #[test]
    fn equal_epoch_is_stale() {
        let mut t = LeaseTable::default();
        let range = KeyRange::entity("node", "n1");
        t.transfer(range.clone(), None, p("a"), 3).unwrap();
        assert_eq!(
            t.transfer(range, Some(&p("a")), p("b"), 3),
            Err(LeaseError::EpochStale {
                requested: 3,
                current: 3
            })
        );
    }

    #[test]
    fn wrong_owner_and_claiming_owned_range() {
        let mut t = LeaseTable::default();
        let range = KeyRange::entity("node", "n1");
        t.transfer(range.clone(), None, p("a"), 1).unwrap();
        assert!(matches!(
            t.transfer(range.clone(), Some(&p("z")), p("b"), 2),
            Err(LeaseError::WrongCurrentOwner { .. })
        ));
        assert!(matches!(
            t.transfer(range, None, p("b"), 2),
            Err(LeaseError::WrongCurrentOwner { .. })
        ));
    }

    #[test]
    fn sub_range_handoff_splits_the_parent() {
        let mut t = LeaseTable::default();
        t.transfer(KeyRange::namespace("node"), None, p("prov"), 1)
            .unwrap();
        let power = StateKey::node("n5", "power");
        t.transfer(KeyRange::single(&power), Some(&p("prov")), p("srm"), 2)
            .unwrap();
        assert_eq!(t.owner_of(&power).unwrap().owner, p("srm"));
        assert_eq!(
            t.owner_of(&StateKey::node("n5", "image")).unwrap().owner,
            p("prov")
        );
        assert_eq!(
            t.owner_of(&StateKey::node("n6", "power")).unwrap().owner,
            p("prov")
        );
        assert_eq!(
            t.owner_of(&StateKey::node("n4", "power")).unwrap().owner,
            p("prov")
        );
        assert!(t
            .owner_of(&StateKey::new("other", "x", "y").unwrap())
            .is_none());
        assert_eq!(t.active().count(), 3);
    }
}
