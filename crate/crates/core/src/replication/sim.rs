use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::raft::{self, LogEntry, Message, ProposeError, ReplicaId, ReplicaState, Role};
use crate::net::Network;

/// A safety property broken during a simulated history.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    TwoLeaders {
        epoch: u64,
        leaders: [ReplicaId; 2],
    },
    LogMismatch {
        a: ReplicaId,
        b: ReplicaId,
        index: u64,
    },
    CommittedEntryChanged {
        index: u64,
    },
    LeaderMissingCommitted {
        leader: ReplicaId,
        epoch: u64,
        index: u64,
    },
}

/// Random fault injection rates, per tick.
#[derive(Clone, Copy, Debug)]
pub struct FaultRates {
    pub crash: f64,
    pub restart: f64,
    pub partition: f64,
    pub heal: f64,
    /// Chance a message is dropped in flight.
    pub drop: f64,
}

impl FaultRates {
    pub const NONE: FaultRates = FaultRates {
        crash: 0.0,
        restart: 0.0,
        partition: 0.0,
        heal: 0.0,
        drop: 0.0,
    };

    pub const CHAOS: FaultRates = FaultRates {
        crash: 0.01,
        restart: 0.1,
        partition: 0.01,
        heal: 0.05,
        drop: 0.02,
    };
}

/// Deterministic cluster simulator with safety checkers that run after
/// every tick. Messages take one or two ticks in flight.
pub struct Cluster {
    replicas: Vec<ReplicaState>,
    pub net: Network<ReplicaId>,
    pub faults: FaultRates,
    rng: ChaCha8Rng,
    in_flight: BTreeMap<u64, Vec<Message>>,
    now: u64,
    leaders: BTreeMap<u64, ReplicaId>,
    committed: BTreeMap<u64, LogEntry>,
    violations: Vec<Violation>,
    delivered: Vec<(u64, Message)>,
    record_deliveries: bool,
}

impl Cluster {
    pub fn new(n: u32, seed: u64) -> Self {
        let ids: Vec<ReplicaId> = (0..n).collect();
        Cluster {
            replicas: ids
                .iter()
                .map(|&i| ReplicaState::new(i, &ids, seed))
                .collect(),
            net: Network::new(),
            faults: FaultRates::NONE,
            rng: ChaCha8Rng::seed_from_u64(seed),
            in_flight: BTreeMap::new(),
            now: 0,
            leaders: BTreeMap::new(),
            committed: BTreeMap::new(),
            violations: Vec::new(),
            delivered: Vec::new(),
            record_deliveries: false,
        }
    }

    pub fn with_faults(mut self, faults: FaultRates) -> Self {
        self.faults = faults;
        self
    }

    /// Keeps every delivered message for inspection.
    pub fn record_deliveries(&mut self) {
        self.record_deliveries = true;
    }

    pub fn deliveries(&self) -> &[(u64, Message)] {
        &self.delivered
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn replica(&self, id: ReplicaId) -> &ReplicaState {
        &self.replicas[id as usize]
    }

    pub fn replicas(&self) -> &[ReplicaState] {
        &self.replicas
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    /// Entries known committed, by index.
    pub fn committed(&self) -> &BTreeMap<u64, LogEntry> {
        &self.committed
    }

    pub fn crash(&mut self, id: ReplicaId) {
        self.net.crash(id);
    }

    pub fn restart(&mut self, id: ReplicaId) {
        if !self.net.is_up(&id) {
            self.net.restore(&id);
            let s = std::mem::replace(
                &mut self.replicas[id as usize],
                ReplicaState::new(id, &[id], 0),
            );
            self.replicas[id as usize] = s.restart();
        }
    }

    /// The live leader with the highest epoch, if any.
    pub fn leader(&self) -> Option<ReplicaId> {
        self.replicas
            .iter()
            .filter(|r| r.role == Role::Leader && self.net.is_up(&r.id))
            .max_by_key(|r| r.current_epoch)
            .map(|r| r.id)
    }

    fn send(&mut self, msgs: Vec<Message>) {
        for m in msgs {
            let delay = self.rng.random_range(1..=2);
            self.in_flight.entry(self.now + delay).or_default().push(m);
        }
    }

    fn inject_faults(&mut self) {
        let f = self.faults;
        let n = self.replicas.len() as u32;
        if self.rng.random_bool(f.crash) {
            let id = self.rng.random_range(0..n);
            self.net.crash(id);
        }
        let down: Vec<_> = (0..n).filter(|i| !self.net.is_up(i)).collect();
        for id in down {
            if self.rng.random_bool(f.restart) {
                self.restart(id);
            }
        }
        if self.net.is_partitioned() {
            if self.rng.random_bool(f.heal) {
                self.net.heal();
            }
        } else if self.rng.random_bool(f.partition) {
            let mut ids: Vec<_> = (0..n).collect();
            ids.shuffle(&mut self.rng);
            let cut = self.rng.random_range(1..n.max(2)) as usize;
            let b = ids.split_off(cut.min(ids.len()));
            self.net.partition([ids, b]);
        }
    }

    pub fn tick(&mut self) {
        self.now += 1;
        self.inject_faults();
        let due = self.in_flight.remove(&self.now).unwrap_or_default();
        for m in due {
            if !self.net.reachable(&m.from, &m.to) || self.rng.random_bool(self.faults.drop) {
                continue;
            }
            if self.record_deliveries {
                self.delivered.push((self.now, m.clone()));
            }
            self.apply(m.to, |s| raft::step(s, &m));
        }
        for id in 0..self.replicas.len() as ReplicaId {
            if self.net.is_up(&id) {
                self.apply(id, raft::tick);
            }
        }
        self.check_logs();
    }

    fn apply(
        &mut self,
        id: ReplicaId,
        f: impl FnOnce(ReplicaState) -> (ReplicaState, Vec<Message>),
    ) {
        let slot = &mut self.replicas[id as usize];
        let prev = std::mem::replace(slot, ReplicaState::new(id, &[id], 0));
        let was_leader = prev.role == Role::Leader;
        let prev_commit = prev.commit_index;
        let (next, out) = f(prev);
        *slot = next;
        self.observe(id, was_leader, prev_commit);
        self.send(out);
    }

    fn observe(&mut self, id: ReplicaId, was_leader: bool, prev_commit: u64) {
        let r = &self.replicas[id as usize];
        if r.role == Role::Leader && !was_leader {
            match self.leaders.insert(r.current_epoch, id) {
                Some(other) if other != id => self.violations.push(Violation::TwoLeaders {
                    epoch: r.current_epoch,
                    leaders: [other, id],
                }),
                _ => {}
            }
            for (&index, e) in &self.committed {
                if r.log.get(index as usize - 1) != Some(e) {
                    self.violations.push(Violation::LeaderMissingCommitted {
                        leader: id,
                        epoch: r.current_epoch,
                        index,
                    });
                }
            }
        }
        for index in prev_commit + 1..=r.commit_index {
            let e = &r.log[index as usize - 1];
            match self.committed.get(&index) {
                Some(c) if c != e => self
                    .violations
                    .push(Violation::CommittedEntryChanged { index }),
                Some(_) => {}
                None => {
                    self.committed.insert(index, e.clone());
                }
            }
        }
    }

    fn check_logs(&mut self) {
        for i in 0..self.replicas.len() {
            for j in i + 1..self.replicas.len() {
                let (a, b) = (&self.replicas[i], &self.replicas[j]);
                let n = a.log.len().min(b.log.len());
                let Some(last) = (0..n).rev().find(|&k| a.log[k].epoch == b.log[k].epoch) else {
                    continue;
                };
                if let Some(k) = (0..=last).find(|&k| a.log[k] != b.log[k]) {
                    self.violations.push(Violation::LogMismatch {
                        a: a.id,
                        b: b.id,
                        index: k as u64 + 1,
                    });
                }
            }
        }
    }

    pub fn run(&mut self, ticks: u64) {
        for _ in 0..ticks {
            self.tick();
        }
    }

    /// Runs until `pred` holds or `limit` ticks pass. Returns whether it held.
    pub fn run_until(&mut self, limit: u64, mut pred: impl FnMut(&Cluster) -> bool) -> bool {
        for _ in 0..limit {
            if pred(self) {
                return true;
            }
            self.tick();
        }
        pred(self)
    }

    /// Proposes at replica `id` and waits up to `deadline` ticks for the
    /// entry to commit.
    pub fn propose_at(
        &mut self,
        id: ReplicaId,
        command: &str,
        deadline: u64,
    ) -> Result<u64, ProposeError> {
        if !self.net.is_up(&id) {
            return Err(ProposeError::NoQuorum);
        }
        let s = std::mem::replace(
            &mut self.replicas[id as usize],
            ReplicaState::new(id, &[id], 0),
        );
        let prev_commit = s.commit_index;
        let (s, r) = raft::propose(s, command);
        let epoch = s.current_epoch;
        self.replicas[id as usize] = s;
        self.observe(id, true, prev_commit);
        let (index, out) = r?;
        self.send(out);
        let want = LogEntry {
            index,
            epoch,
            command: command.to_string(),
        };
        let done = self.run_until(deadline, |c| c.committed.get(&index) == Some(&want));
        if done {
            Ok(index)
        } else {
            Err(ProposeError::NoQuorum)
        }
    }

    /// Proposes through whichever replica currently leads, waiting for one
    /// to emerge if needed.
    pub fn propose(&mut self, command: &str, deadline: u64) -> Result<u64, ProposeError> {
        let start = self.now;
        if !self.run_until(deadline, |c| c.leader().is_some()) {
            return Err(ProposeError::NoQuorum);
        }
        let leader = self.leader().expect("leader present");
        let left = deadline.saturating_sub(self.now - start);
        self.propose_at(leader, command, left)
    }
}
