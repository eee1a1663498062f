use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::checkpoint::{
    Checkpoint, CheckpointBody, CheckpointHeader, CheckpointStore, Safety, TaskKind,
};
use super::work::{image_of, phase_of};
use super::OrchestratorError;
use crate::digest::Digest;
use crate::fleetmodel::{NodeId, NodePhase};
use crate::statestore::{Kind, RenderId, StateKey, StateStore, Value};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutParams {
    pub image: Digest,
    pub max_unavailable: usize,
    /// Updated in ascending order, `max_unavailable` at a time.
    pub targets: Vec<NodeId>,
    pub drain_timeout: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutStatus {
    Complete,
    PartialFailure,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub task_id: String,
    pub image: Digest,
    pub status: RolloutStatus,
    pub updated: Vec<NodeId>,
    /// Faulted, quarantined or given up.
    pub failed: Vec<NodeId>,
    /// Still running a job after the drain timeout, twice.
    pub deferred: Vec<NodeId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Progress {
    /// 0 for the main pass, 1 for the retry of deferred nodes.
    round: u8,
    batch_started: u64,
    deferred: Vec<NodeId>,
    retry: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    report: Option<RolloutReport>,
}

#[derive(Debug, PartialEq, Eq)]
enum NodeState {
    Done,
    Terminal,
    InJob,
    Pending,
}

/// A rolling update. The batch cursor is checkpointed before the batch's
/// desires are written, so a resumed update never revisits earlier batches.
#[derive(Clone, Debug)]
pub struct RollingUpdate {
    id: String,
    params: RolloutParams,
    cursor: u64,
    progress: Progress,
}

impl RollingUpdate {
    pub fn start(
        id: String,
        mut params: RolloutParams,
        store: &StateStore,
        checkpoints: &dyn CheckpointStore,
        now: u64,
    ) -> Result<Self, OrchestratorError> {
        if params.max_unavailable == 0 {
            return Err(OrchestratorError::InvalidPlan(
                "max_unavailable must be at least 1".into(),
            ));
        }
        params.targets.sort();
        params.targets.dedup();
        let mut r = RollingUpdate {
            id,
            params,
            cursor: 0,
            progress: Progress::default(),
        };
        r.open_batch(store, checkpoints, now)?;
        Ok(r)
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self, OrchestratorError> {
        let mut r = Self::from_header(c.header)?;
        r.cursor = c.body.cursor;
        r.progress = serde_json::from_value(c.body.state)
            .map_err(|e| OrchestratorError::CheckpointInvalid(format!("{}: {e}", r.id)))?;
        Ok(r)
    }

    pub fn from_header(h: CheckpointHeader) -> Result<Self, OrchestratorError> {
        let params: RolloutParams = serde_json::from_value(h.params)
            .map_err(|e| OrchestratorError::CheckpointInvalid(format!("{}: {e}", h.task_id)))?;
        Ok(RollingUpdate {
            id: h.task_id,
            params,
            cursor: 0,
            progress: Progress::default(),
        })
    }

    /// The final report stored in a completed checkpoint body.
    pub fn report_of(body: &CheckpointBody) -> Option<RolloutReport> {
        serde_json::from_value::<Progress>(body.state.clone())
            .ok()?
            .report
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn params(&self) -> &RolloutParams {
        &self.params
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn round(&self) -> u8 {
        self.progress.round
    }

    fn list(&self) -> &[NodeId] {
        if self.progress.round == 0 {
            &self.params.targets
        } else {
            &self.progress.retry
        }
    }

    fn batch_bounds(&self, cursor: u64) -> (usize, usize) {
        let len = self.list().len();
        let start = (cursor as usize)
            .saturating_mul(self.params.max_unavailable)
            .min(len);
        (start, (start + self.params.max_unavailable).min(len))
    }

    /// Nodes of the current batch.
    pub fn batch(&self) -> &[NodeId] {
        let (a, b) = self.batch_bounds(self.cursor);
        &self.list()[a..b]
    }

    fn save(
        &self,
        checkpoints: &dyn CheckpointStore,
        complete: bool,
    ) -> Result<(), OrchestratorError> {
        let (done, _) = self.batch_bounds(self.cursor);
        let completed = Digest::of_parts(self.list()[..done].iter().map(|n| n.as_str()));
        let c = Checkpoint {
            header: CheckpointHeader {
                task_id: self.id.clone(),
                kind: TaskKind::RollingUpdate,
                safety: Safety::ResumeOnly,
                params: serde_json::to_value(&self.params).expect("params serialize"),
            },
            body: CheckpointBody {
                cursor: self.cursor,
                completed,
                state: serde_json::to_value(&self.progress).expect("progress serializes"),
                complete,
            },
        };
        checkpoints.save(&self.id, c.encode())?;
        Ok(())
    }

    /// Checkpoints the cursor, then writes the batch's image desires.
    fn open_batch(
        &mut self,
        store: &StateStore,
        checkpoints: &dyn CheckpointStore,
        now: u64,
    ) -> Result<(), OrchestratorError> {
        self.progress.batch_started = now;
        self.save(checkpoints, false)?;
        let origin = RenderId::new(format!(
            "rollout:{}:{}:{}",
            self.id, self.progress.round, self.cursor
        ));
        let want = Value::Digest(self.params.image);
        for n in self.batch() {
            let key = StateKey::node(n.as_str(), "image");
            if store.value(&key, Kind::Desire).as_ref() != Some(&want) {
                store.put_desire(&key, want.clone(), origin.clone());
            }
        }
        Ok(())
    }

    fn state_of(&self, store: &StateStore, given_up: &BTreeSet<String>, n: &NodeId) -> NodeState {
        let phase = phase_of(store, n.as_str());
        if given_up.contains(n.as_str()) || phase == Some(NodePhase::Quarantined) {
            return NodeState::Terminal;
        }
        let updated = image_of(store, n.as_str()) == Some(self.params.image);
        match phase {
            Some(p) if updated && p.is_available() => NodeState::Done,
            Some(NodePhase::JobRunning | NodePhase::Draining) => NodeState::InJob,
            _ => NodeState::Pending,
        }
    }

    /// Advances the update. Returns the report once it has finished.
    pub fn step(
        &mut self,
        store: &StateStore,
        checkpoints: &dyn CheckpointStore,
        given_up: &BTreeSet<String>,
        now: u64,
    ) -> Result<Option<RolloutReport>, OrchestratorError> {
        if let Some(r) = &self.progress.report {
            return Ok(Some(r.clone()));
        }
        loop {
            let batch = self.batch().to_vec();
            if batch.is_empty() {
                if self.progress.round == 0 && !self.progress.deferred.is_empty() {
                    self.progress.round = 1;
                    self.progress.retry = std::mem::take(&mut self.progress.deferred);
                    self.cursor = 0;
                    log::info!(
                        "{}: retrying {} deferred nodes",
                        self.id,
                        self.progress.retry.len()
                    );
                    self.open_batch(store, checkpoints, now)?;
                    continue;
                }
                return self.finish(store, checkpoints, given_up).map(Some);
            }
            let mut waiting = false;
            let mut deferred_any = false;
            let timed_out =
                now.saturating_sub(self.progress.batch_started) > self.params.drain_timeout;
            for n in &batch {
                if self.progress.deferred.contains(n) {
                    continue;
                }
                match self.state_of(store, given_up, n) {
                    NodeState::Done | NodeState::Terminal => {}
                    NodeState::InJob if timed_out => {
                        // Give the job its node back and try again later.
                        if let Some(old) = image_of(store, n.as_str()) {
                            store.put_desire(
                                &StateKey::node(n.as_str(), "image"),
                                Value::Digest(old),
                                RenderId::new(format!("rollout:{}:defer", self.id)),
                            );
                        }
                        log::info!("{}: deferring {n}, still running a job", self.id);
                        self.progress.deferred.push(n.clone());
                        deferred_any = true;
                    }
                    NodeState::InJob | NodeState::Pending => waiting = true,
                }
            }
            if deferred_any {
                self.save(checkpoints, false)?;
            }
            if waiting {
                return Ok(None);
            }
            self.cursor += 1;
            self.open_batch(store, checkpoints, now)?;
        }
    }

    fn finish(
        &mut self,
        store: &StateStore,
        checkpoints: &dyn CheckpointStore,
        given_up: &BTreeSet<String>,
    ) -> Result<RolloutReport, OrchestratorError> {
        let mut updated = Vec::new();
        let mut failed = Vec::new();
        let mut deferred = Vec::new();
        for n in &self.params.targets {
            if image_of(store, n.as_str()) == Some(self.params.image) {
                updated.push(n.clone());
            } else if given_up.contains(n.as_str())
                || matches!(
                    phase_of(store, n.as_str()),
                    Some(NodePhase::Faulted | NodePhase::Quarantined) | None
                )
            {
                failed.push(n.clone());
            } else {
                deferred.push(n.clone());
            }
        }
        let status = if failed.is_empty() && deferred.is_empty() {
            RolloutStatus::Complete
        } else {
            RolloutStatus::PartialFailure
        };
        let report = RolloutReport {
            task_id: self.id.clone(),
            image: self.params.image,
            status,
            updated,
            failed,
            deferred,
        };
        self.progress.report = Some(report.clone());
        self.save(checkpoints, true)?;
        Ok(report)
    }
}
