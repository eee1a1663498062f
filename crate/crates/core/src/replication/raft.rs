use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type ReplicaId = u32;

pub const ELECTION_TIMEOUT_MIN: u64 = 5;
pub const ELECTION_TIMEOUT_MAX: u64 = 10;
/// Most entries carried by one append request.
pub const MAX_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LogEntry {
    pub index: u64,
    pub epoch: u64,
    pub command: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum Body {
    VoteRequest {
        last_log_index: u64,
        last_log_epoch: u64,
    },
    VoteReply {
        granted: bool,
    },
    AppendRequest {
        prev_index: u64,
        prev_epoch: u64,
        entries: Vec<LogEntry>,
        leader_commit: u64,
    },
    AppendReply {
        success: bool,
        match_index: u64,
    },
}

/// Wire form: `{"type", "from", "to", "epoch", "payload"}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: ReplicaId,
    pub to: ReplicaId,
    pub epoch: u64,
    #[serde(flatten)]
    pub body: Body,
}

impl Message {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("messages serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ProposeError {
    #[error("not the leader (leader hint: {hint:?})")]
    NotLeader { hint: Option<ReplicaId> },
    #[error("no quorum reachable")]
    NoQuorum,
}

/// One replica of the replicated log. All transitions are pure functions
/// that consume a state and return the next one; the election-timer
/// randomness lives in the state.
#[derive(Clone, Debug)]
pub struct ReplicaState {
    pub id: ReplicaId,
    pub members: Vec<ReplicaId>,
    pub role: Role,
    pub current_epoch: u64,
    pub log: Vec<LogEntry>,
    pub commit_index: u64,
    pub voted_for: Option<ReplicaId>,
    pub leader_hint: Option<ReplicaId>,
    /// Malformed or misaddressed messages dropped so far.
    pub dropped: u64,
    votes: BTreeSet<ReplicaId>,
    next_index: BTreeMap<ReplicaId, u64>,
    match_index: BTreeMap<ReplicaId, u64>,
    elapsed: u64,
    timeout: u64,
    rng: ChaCha8Rng,
}

impl ReplicaState {
    pub fn new(id: ReplicaId, members: &[ReplicaId], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(id) << 32));
        let timeout = rng.random_range(ELECTION_TIMEOUT_MIN..=ELECTION_TIMEOUT_MAX);
        let mut members = members.to_vec();
        members.sort_unstable();
        members.dedup();
        ReplicaState {
            id,
            members,
            role: Role::Follower,
            current_epoch: 0,
            log: Vec::new(),
            commit_index: 0,
            voted_for: None,
            leader_hint: None,
            dropped: 0,
            votes: BTreeSet::new(),
            next_index: BTreeMap::new(),
            match_index: BTreeMap::new(),
            elapsed: 0,
            timeout,
            rng,
        }
    }

    pub fn majority(&self) -> usize {
        self.members.len() / 2 + 1
    }

    pub fn last_index(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn last_epoch(&self) -> u64 {
        self.log.last().map_or(0, |e| e.epoch)
    }

    fn epoch_at(&self, index: u64) -> Option<u64> {
        match index {
            0 => Some(0),
            i => self.log.get(i as usize - 1).map(|e| e.epoch),
        }
    }

    pub fn election_timeout(&self) -> u64 {
        self.timeout
    }

    /// Committed prefix of the log.
    pub fn committed(&self) -> &[LogEntry] {
        &self.log[..self.commit_index as usize]
    }

    fn peers(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        self.members.iter().copied().filter(move |&p| p != self.id)
    }

    fn msg(&self, to: ReplicaId, body: Body) -> Message {
        Message {
            from: self.id,
            to,
            epoch: self.current_epoch,
            body,
        }
    }

    fn reset_timer(&mut self) {
        self.elapsed = 0;
        self.timeout = self
            .rng
            .random_range(ELECTION_TIMEOUT_MIN..=ELECTION_TIMEOUT_MAX);
    }

    fn become_follower(&mut self, epoch: u64) {
        if epoch > self.current_epoch {
            self.current_epoch = epoch;
            self.voted_for = None;
            self.leader_hint = None;
        }
        self.role = Role::Follower;
        self.votes.clear();
        self.next_index.clear();
        self.match_index.clear();
    }

    fn become_leader(&mut self, out: &mut Vec<Message>) {
        self.role = Role::Leader;
        self.leader_hint = Some(self.id);
        self.votes.clear();
        let next = self.last_index() + 1;
        let peers: Vec<_> = self.peers().collect();
        for p in peers {
            self.next_index.insert(p, next);
            self.match_index.insert(p, 0);
        }
        self.advance_commit();
        self.broadcast_append(out);
    }

    fn start_election(&mut self, out: &mut Vec<Message>) {
        self.current_epoch += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id);
        self.leader_hint = None;
        self.votes = BTreeSet::from([self.id]);
        self.reset_timer();
        if self.votes.len() >= self.majority() {
            self.become_leader(out);
            return;
        }
        let body = Body::VoteRequest {
            last_log_index: self.last_index(),
            last_log_epoch: self.last_epoch(),
        };
        let peers: Vec<_> = self.peers().collect();
        out.extend(peers.into_iter().map(|p| self.msg(p, body.clone())));
    }

    fn append_for(&self, peer: ReplicaId) -> Message {
        let next = self.next_index.get(&peer).copied().unwrap_or(1).max(1);
        let prev_index = next - 1;
        let start = prev_index as usize;
        let end = (start + MAX_BATCH).min(self.log.len());
        self.msg(
            peer,
            Body::AppendRequest {
                prev_index,
                prev_epoch: self.epoch_at(prev_index).unwrap_or(0),
                entries: self.log[start.min(end)..end].to_vec(),
                leader_commit: self.commit_index,
            },
        )
    }

    fn broadcast_append(&self, out: &mut Vec<Message>) {
        out.extend(self.peers().map(|p| self.append_for(p)));
    }

    fn advance_commit(&mut self) {
        for n in (self.commit_index + 1..=self.last_index()).rev() {
            if self.epoch_at(n) != Some(self.current_epoch) {
                break;
            }
            let acks = 1 + self.match_index.values().filter(|&&m| m >= n).count();
            if acks >= self.majority() {
                self.commit_index = n;
                break;
            }
        }
    }

    fn log_up_to_date(&self, last_index: u64, last_epoch: u64) -> bool {
        (last_epoch, last_index) >= (self.last_epoch(), self.last_index())
    }

    /// Volatile state lost in a crash; durable state (epoch, vote, log) kept.
    pub fn restart(mut self) -> Self {
        self.become_follower(self.current_epoch);
        self.leader_hint = None;
        self.reset_timer();
        self
    }
}

/// Handles one inbound message.
pub fn step(mut s: ReplicaState, m: &Message) -> (ReplicaState, Vec<Message>) {
    let mut out = Vec::new();
    if m.to != s.id || m.from == s.id || !s.members.contains(&m.from) {
        s.dropped += 1;
        return (s, out);
    }
    if m.epoch > s.current_epoch {
        s.become_follower(m.epoch);
    }
    match &m.body {
        Body::VoteRequest {
            last_log_index,
            last_log_epoch,
        } => {
            let granted = m.epoch == s.current_epoch
                && s.voted_for.is_none_or(|v| v == m.from)
                && s.log_up_to_date(*last_log_index, *last_log_epoch);
            if granted {
                s.voted_for = Some(m.from);
                s.reset_timer();
            }
            out.push(s.msg(m.from, Body::VoteReply { granted }));
        }
        Body::VoteReply { granted } => {
            if s.role == Role::Candidate && m.epoch == s.current_epoch && *granted {
                s.votes.insert(m.from);
                if s.votes.len() >= s.majority() {
                    s.become_leader(&mut out);
                }
            }
        }
        Body::AppendRequest {
            prev_index,
            prev_epoch,
            entries,
            leader_commit,
        } => {
            if m.epoch < s.current_epoch {
                let reply = s.msg(
                    m.from,
                    Body::AppendReply {
                        success: false,
                        match_index: 0,
                    },
                );
                out.push(reply);
                return (s, out);
            }
            if s.role != Role::Follower {
                s.become_follower(m.epoch);
            }
            s.leader_hint = Some(m.from);
            s.reset_timer();
            if s.epoch_at(*prev_index) != Some(*prev_epoch) {
                let hint = s.last_index().min(prev_index.saturating_sub(1));
                let reply = s.msg(
                    m.from,
                    Body::AppendReply {
                        success: false,
                        match_index: hint,
                    },
                );
                out.push(reply);
                return (s, out);
            }
            for e in entries {
                match s.epoch_at(e.index) {
                    Some(ep) if ep == e.epoch => {}
                    Some(_) => {
                        s.log.truncate(e.index as usize - 1);
                        s.log.push(e.clone());
                    }
                    None => s.log.push(e.clone()),
                }
            }
            let last_new = prev_index + entries.len() as u64;
            if *leader_commit > s.commit_index {
                s.commit_index = s.commit_index.max((*leader_commit).min(last_new));
            }
            let reply = s.msg(
                m.from,
                Body::AppendReply {
                    success: true,
                    match_index: last_new,
                },
            );
            out.push(reply);
        }
        Body::AppendReply {
            success,
            match_index,
        } => {
            if s.role != Role::Leader || m.epoch != s.current_epoch {
                return (s, out);
            }
            if *success {
                let mi = s.match_index.entry(m.from).or_insert(0);
                *mi = (*mi).max(*match_index);
                let mi = *mi;
                s.next_index.insert(m.from, mi + 1);
                s.advance_commit();
                if mi < s.last_index() {
                    out.push(s.append_for(m.from));
                }
            } else {
                let next = s.next_index.get(&m.from).copied().unwrap_or(1);
                let next = (next - 1).min(match_index + 1).max(1);
                s.next_index.insert(m.from, next);
                out.push(s.append_for(m.from));
            }
        }
    }
    (s, out)
}

/// Parses and handles a wire message; unparseable input is dropped and
/// counted.
pub fn step_wire(s: ReplicaState, raw: &str) -> (ReplicaState, Vec<Message>) {
    match Message::from_json(raw) {
        Ok(m) => step(s, &m),
        Err(_) => {
            let mut s = s;
            s.dropped += 1;
            (s, Vec::new())
        }
    }
}

/// Advances the replica's clock by one tick.
pub fn tick(mut s: ReplicaState) -> (ReplicaState, Vec<Message>) {
    let mut out = Vec::new();
    s.elapsed += 1;
    match s.role {
        Role::Leader => s.broadcast_append(&mut out),
        Role::Follower | Role::Candidate => {
            if s.elapsed >= s.timeout {
                s.start_election(&mut out);
            }
        }
    }
    (s, out)
}

/// Appends a command at the leader. Returns the entry's index; the entry
/// is committed once a majority holds it.
pub fn propose(
    mut s: ReplicaState,
    command: impl Into<String>,
) -> (ReplicaState, Result<(u64, Vec<Message>), ProposeError>) {
    if s.role != Role::Leader {
        let hint = s.leader_hint.filter(|&h| h != s.id);
        return (s, Err(ProposeError::NotLeader { hint }));
    }
    let index = s.last_index() + 1;
    s.log.push(LogEntry {
        index,
        epoch: s.current_epoch,
        command: command.into(),
    });
    s.advance_commit();
    let mut out = Vec::new();
    s.broadcast_append(&mut out);
    (s, Ok((index, out)))
}
