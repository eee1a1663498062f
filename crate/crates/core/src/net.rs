//! Reachability model shared by the simulators: crashed endpoints and
//! partitions into disjoint groups.

use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Debug)]
pub struct Network<Id: Ord + Clone> {
    down: BTreeSet<Id>,
    group: BTreeMap<Id, u32>,
}

impl<Id: Ord + Clone> Default for Network<Id> {
    fn default() -> Self {
        Network {
            down: BTreeSet::new(),
            group: BTreeMap::new(),
        }
    }
}

impl<Id: Ord + Clone> Network<Id> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_up(&self, id: &Id) -> bool {
        !self.down.contains(id)
    }

    pub fn crash(&mut self, id: Id) {
        self.down.insert(id);
    }

    pub fn restore(&mut self, id: &Id) {
        self.down.remove(id);
    }

    /// Splits the listed endpoints into groups; an endpoint not listed stays
    /// in group 0 with every other unlisted endpoint.
    pub fn partition<I: IntoIterator<Item = Vec<Id>>>(&mut self, groups: I) {
        self.group.clear();
        for (i, g) in groups.into_iter().enumerate() {
            for id in g {
                self.group.insert(id, i as u32 + 1);
            }
        }
    }

    /// Moves one endpoint into its own group.
    pub fn isolate(&mut self, id: Id) {
        let next = self.group.values().max().copied().unwrap_or(0) + 1;
        self.group.insert(id, next);
    }

    pub fn heal(&mut self) {
        self.group.clear();
    }

    pub fn is_partitioned(&self) -> bool {
        !self.group.is_empty()
    }

    fn group_of(&self, id: &Id) -> u32 {
        self.group.get(id).copied().unwrap_or(0)
    }

    pub fn reachable(&self, a: &Id, b: &Id) -> bool {
        self.is_up(a) && self.is_up(b) && self.group_of(a) == self.group_of(b)
    }
}
