use std::collections::{BTreeMap, BTreeSet};
use std::mem;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::checkpoint::{resume, Checkpoint, CheckpointStore, Resumption, TaskKind};
use super::flows::{FlowDefinition, FlowTable};
use super::remediate::{remediate, EmergencyEvent};
use super::rollout::{RollingUpdate, RolloutParams, RolloutReport};
use super::work::{
    fleet_nodes, is_workload_action, tag_epoch, ActionCommand, ActionState, ActionStatus,
    Dispatcher, Intent, Priority, Work, ORCH_NS,
};
use super::OrchestratorError;
use crate::digest::Digest;
use crate::fleetmodel::{MutationEdge, MutationGraph, NodeId, NodePhase};
use crate::statestore::{
    KeyRange, Kind, Principal, ReadMode, StateKey, StateRecord, StateStore, StoreError, Value,
};

const LEASE_ENTITY: &str = "_lease";
const FLOW_PREFIX: &str = "flow:";

pub fn heartbeat_key() -> StateKey {
    StateKey::new(ORCH_NS, LEASE_ENTITY, "heartbeat").expect("static key")
}

fn orch_key(entity: &str, prop: &str) -> StateKey {
    StateKey::new(ORCH_NS, entity, prop).expect("node ids are valid key components")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconcileConfig {
    /// Ticks between reconcile passes.
    pub interval: u64,
    /// Upper bound on actions in flight at once.
    pub max_parallel_actions: usize,
    /// Failed actions tolerated per node before it is given up on.
    pub retry_limit: u32,
    /// Ticks without an acknowledgment before a command is resent.
    pub redispatch_after: u64,
    /// Ticks without a heartbeat before a standby may take the lease.
    pub lease_ttl: u64,
    /// Ticks a rolling update waits for a job to drain.
    pub drain_timeout: u64,
}

impl Default for ReconcileConfig {
    fn default() -> Self {
        ReconcileConfig {
            interval: 1,
            max_parallel_actions: 64,
            retry_limit: 3,
            redispatch_after: 20,
            lease_ttl: 10,
            drain_timeout: 60,
        }
    }
}

impl ReconcileConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |what: &str| {
            Err(OrchestratorError::Validation(format!(
                "{what} must be at least 1"
            )))
        };
        if self.interval == 0 {
            return bad("interval");
        }
        if self.max_parallel_actions == 0 {
            return bad("max_parallel_actions");
        }
        if self.retry_limit == 0 {
            return bad("retry_limit");
        }
        if self.redispatch_after == 0 {
            return bad("redispatch_after");
        }
        Ok(())
    }
}

/// What the planner knows about one node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeView {
    pub phase: NodePhase,
    pub image: Option<Digest>,
    pub desired_phase: Option<NodePhase>,
    pub desired_image: Option<Digest>,
    /// Some differing desire of this node came from an emergency remediation.
    pub emergency: bool,
}

impl NodeView {
    /// `None` until the node has a phase fact.
    pub fn read(store: &StateStore, node: &str) -> Option<Self> {
        let get = |prop: &str, kind| {
            store
                .get(&StateKey::node(node, prop), kind, ReadMode::Local)
                .ok()
        };
        let phase = get("phase", Kind::Fact)?.value.as_str()?.parse().ok()?;
        let image = get("image", Kind::Fact).and_then(|r| r.value.as_digest());
        let dphase = get("phase", Kind::Desire);
        let dimage = get("image", Kind::Desire);
        let desired_phase = dphase.as_ref().and_then(|r| r.value.as_str()?.parse().ok());
        let desired_image = dimage.as_ref().and_then(|r| r.value.as_digest());
        let urgent = |r: &Option<StateRecord>| {
            r.as_ref()
                .is_some_and(|r| r.origin.as_ref().is_some_and(|o| o.is_emergency()))
        };
        let emergency = (urgent(&dphase) && desired_phase != Some(phase))
            || (urgent(&dimage) && desired_image.is_some() && desired_image != image);
        Some(NodeView {
            phase,
            image,
            desired_phase,
            desired_image,
            emergency,
        })
    }
}

fn plannable(e: &MutationEdge) -> bool {
    let a = e.action.as_str();
    !is_workload_action(a) && !matches!(a, "drain" | "undrain" | "quarantine")
}

fn work_for(node: &NodeId, edge: &MutationEdge, view: &NodeView) -> Work {
    Work::Node {
        node: node.clone(),
        action: edge.action.clone(),
        image: if edge.action.as_str() == "load_minimal_os" {
            view.desired_image
        } else {
            None
        },
    }
}

/// The next action that moves `node` toward its desires, or `None` when it
/// needs nothing or must wait.
///
/// A node running a job satisfies a services-ready desire. Any other
/// difference on such a node first drains it. A node whose image differs
/// from its desire while it runs an operating system is taken back to
/// `PoweredOn` so the next boot loads the desired image.
pub fn plan_for_node(graph: &MutationGraph, node: &NodeId, view: &NodeView) -> Option<Work> {
    use NodePhase::*;
    let phase = view.phase;
    if phase == Quarantined {
        return None;
    }
    if view.desired_phase == Some(Quarantined) {
        return graph
            .edge(phase, "quarantine")
            .map(|e| work_for(node, e, view));
    }
    let first_step = |to: NodePhase| {
        graph
            .plan_with(phase, to, plannable)
            .ok()
            .and_then(|p| p.into_iter().next())
            .map(|e| work_for(node, &e, view))
    };
    let image_diff = view.desired_image.is_some_and(|d| view.image != Some(d));
    let target = view
        .desired_phase
        .or(view.desired_image.map(|_| ServicesReady))?;
    let in_service_diff = image_diff || target != ServicesReady;
    match phase {
        JobRunning => in_service_diff
            .then(|| graph.edge(JobRunning, "drain"))
            .flatten()
            .map(|e| work_for(node, e, view)),
        Draining => (!in_service_diff)
            .then(|| graph.edge(Draining, "undrain"))
            .flatten()
            .map(|e| work_for(node, e, view)),
        _ => {
            let running_os = |p| matches!(p, MinimalOS | ServicesReady);
            if image_diff && running_os(phase) && running_os(target) {
                first_step(PoweredOn)
            } else if phase == target {
                None
            } else {
                first_step(target)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct InFlight {
    tag: String,
    work: Work,
    priority: Priority,
    sent_at: u64,
}

/// The reconciliation loop of one orchestrator instance.
pub struct Orchestrator {
    principal: Principal,
    epoch: u64,
    counter: u64,
    store: Arc<StateStore>,
    graph: MutationGraph,
    config: ReconcileConfig,
    checkpoints: Arc<dyn CheckpointStore>,
    cursor: usize,
    dirty: BTreeSet<String>,
    /// Work waiting for budget, keyed by slot.
    backlog: BTreeMap<String, (Priority, Work)>,
    index: BTreeSet<(Priority, String)>,
    entity_slots: BTreeMap<String, Vec<String>>,
    in_flight: BTreeMap<String, InFlight>,
    resend: BTreeSet<String>,
    failures: BTreeMap<String, u32>,
    given_up: BTreeSet<String>,
    flows: FlowTable,
    outbox: Vec<ActionCommand>,
    rollouts: BTreeMap<String, RollingUpdate>,
    reports: BTreeMap<String, RolloutReport>,
}

impl Orchestrator {
    /// Takes the orchestration lease and rebuilds state from the store and
    /// checkpoint storage. Another principal's lease is only taken over once
    /// its heartbeat is older than `lease_ttl`.
    pub fn acquire(
        principal: &str,
        store: Arc<StateStore>,
        graph: MutationGraph,
        config: ReconcileConfig,
        checkpoints: Arc<dyn CheckpointStore>,
        now: u64,
    ) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let me = Principal::new(principal);
        let range = KeyRange::namespace(ORCH_NS);
        let from = match store.lease_for(&heartbeat_key()) {
            None => None,
            Some(l) if l.owner == me => Some(l.owner),
            Some(l) => {
                let beat = store
                    .value(&heartbeat_key(), Kind::Fact)
                    .and_then(|v| v.as_int())
                    .unwrap_or(0)
                    .max(0) as u64;
                if now.saturating_sub(beat) <= config.lease_ttl {
                    return Err(OrchestratorError::LeaseHeld(l.owner));
                }
                Some(l.owner)
            }
        };
        let epoch = store.lease_epoch(&range) + 1;
        store.transfer_ownership(range, from.as_ref(), me.clone(), epoch)?;
        log::info!("{me} holds the orchestration lease at epoch {epoch}");

        let mut o = Orchestrator {
            principal: me,
            epoch,
            counter: 0,
            store,
            graph,
            config,
            checkpoints,
            cursor: 0,
            dirty: BTreeSet::new(),
            backlog: BTreeMap::new(),
            index: BTreeSet::new(),
            entity_slots: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            resend: BTreeSet::new(),
            failures: BTreeMap::new(),
            given_up: BTreeSet::new(),
            flows: FlowTable::default(),
            outbox: Vec::new(),
            rollouts: BTreeMap::new(),
            reports: BTreeMap::new(),
        };
        o.store
            .put_fact_next(&o.principal, &heartbeat_key(), Value::Int(now as i64))?;
        o.load_flows()?;
        o.rebuild(now);
        o.resume_tasks()?;
        Ok(o)
    }

    pub fn principal(&self) -> &Principal {
        &self.principal
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn config(&self) -> &ReconcileConfig {
        &self.config
    }

    pub fn graph(&self) -> &MutationGraph {
        &self.graph
    }

    pub fn store(&self) -> &Arc<StateStore> {
        &self.store
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn backlog(&self) -> usize {
        self.backlog.len()
    }

    pub fn given_up(&self) -> &BTreeSet<String> {
        &self.given_up
    }

    pub fn flows(&self) -> &FlowTable {
        &self.flows
    }

    pub fn holds_lease(&self) -> bool {
        self.store
            .lease_for(&heartbeat_key())
            .is_some_and(|l| l.owner == self.principal && l.epoch == self.epoch)
    }

    fn check_lease(&self) -> Result<(), OrchestratorError> {
        if self.holds_lease() {
            Ok(())
        } else {
            Err(OrchestratorError::LeaseLost)
        }
    }

    fn put_own(&self, key: &StateKey, value: Value) -> Result<(), OrchestratorError> {
        match self.store.put_fact_next(&self.principal, key, value) {
            Ok(_) => Ok(()),
            Err(StoreError::NotOwner { .. }) => Err(OrchestratorError::LeaseLost),
            Err(e) => Err(e.into()),
        }
    }

    fn next_id(&mut self) -> u64 {
        self.counter += 1;
        self.counter
    }

    fn load_flows(&mut self) -> Result<(), OrchestratorError> {
        for id in self.checkpoints.list()? {
            if !id.starts_with(FLOW_PREFIX) {
                continue;
            }
            let Some(bytes) = self.checkpoints.load(&id)? else {
                continue;
            };
            let text = String::from_utf8(bytes)
                .map_err(|e| OrchestratorError::Validation(format!("flow {id}: {e}")))?;
            let def = FlowDefinition::from_toml(&text)?;
            self.flows.register(def, &self.graph)?;
        }
        Ok(())
    }

    /// Recovers failure counts, given-up nodes and in-flight work from the
    /// facts a previous instance left behind.
    fn rebuild(&mut self, now: u64) {
        let mut intents = Vec::new();
        for rec in self.store.scan(&KeyRange::namespace(ORCH_NS), Kind::Fact) {
            let entity = rec.key.entity().to_string();
            match rec.key.property() {
                "gave_up" if rec.value == Value::Bool(true) => {
                    self.given_up.insert(entity);
                }
                "failures" => {
                    let n = rec.value.as_int().unwrap_or(0).max(0) as u32;
                    if n > 0 {
                        self.failures.insert(entity, n);
                    }
                }
                p if p == "intent" || p.starts_with("intent.") => {
                    intents.extend(Intent::from_value(&rec.value));
                }
                _ => {}
            }
        }
        for intent in intents {
            let slot = intent.work.slot();
            let (pending, priority) = match &intent.work {
                Work::Node { node, .. } => {
                    let status = ActionStatus::read(&self.store, node.as_str());
                    match status {
                        Some(s) if s.tag == intent.tag => (!s.state.is_final(), Priority::Normal),
                        // Never delivered under an older epoch: the receiver
                        // fences it, so plan afresh.
                        _ if tag_epoch(&intent.tag).is_some_and(|e| e < self.epoch) => {
                            (false, Priority::Normal)
                        }
                        // Never delivered: still wanted only if it is what we
                        // would decide now.
                        _ => match NodeView::read(&self.store, node.as_str()) {
                            Some(view) => {
                                let planned = self.candidate_for_node(node, &view);
                                match planned {
                                    Some((p, w)) if w == intent.work => {
                                        self.resend.insert(slot.clone());
                                        (true, p)
                                    }
                                    _ => (false, Priority::Normal),
                                }
                            }
                            None => (false, Priority::Normal),
                        },
                    }
                }
                Work::Apply { key, value } => {
                    let done = self.store.value(key, Kind::Fact).as_ref() == Some(value);
                    let wanted = self.store.value(key, Kind::Desire).as_ref() == Some(value);
                    if !done && wanted {
                        self.resend.insert(slot.clone());
                    }
                    (!done && wanted, Priority::Normal)
                }
            };
            if pending {
                log::debug!("recovered in-flight {} for {slot}", intent.tag);
                self.in_flight.insert(
                    slot,
                    InFlight {
                        tag: intent.tag,
                        work: intent.work,
                        priority,
                        sent_at: now,
                    },
                );
            }
        }
    }

    fn resume_tasks(&mut self) -> Result<(), OrchestratorError> {
        for id in self.checkpoints.list()? {
            if id.starts_with(FLOW_PREFIX) {
                continue;
            }
            let Some(bytes) = self.checkpoints.load(&id)? else {
                continue;
            };
            let (header, body) = Checkpoint::decode(&bytes);
            if header.as_ref().map(|h| h.kind) != Some(TaskKind::RollingUpdate) {
                if header.is_none() {
                    log::error!("checkpoint {id} has an unreadable header; left for the operator");
                }
                continue;
            }
            match resume(&bytes) {
                Ok(Resumption::Resume(c)) => {
                    let r = RollingUpdate::from_checkpoint(c)?;
                    log::info!("resuming {} at batch {}", r.id(), r.cursor());
                    self.rollouts.insert(r.id().to_string(), r);
                }
                Ok(Resumption::NoOp) => {
                    if let Some(report) = body.and_then(|b| RollingUpdate::report_of(&b)) {
                        self.reports.insert(id, report);
                    }
                }
                Ok(Resumption::Restart(h)) => {
                    let r = RollingUpdate::from_header(h)?;
                    self.rollouts.insert(r.id().to_string(), r);
                }
                Err(e) => log::error!("checkpoint {id}: {e}"),
            }
        }
        Ok(())
    }

    pub fn register_flow(&mut self, def: FlowDefinition) -> Result<String, OrchestratorError> {
        self.check_lease()?;
        let text = def.to_toml();
        let id = self.flows.register(def, &self.graph)?;
        self.checkpoints
            .save(&format!("{FLOW_PREFIX}{id}"), text.into_bytes())?;
        self.dirty.extend(self.store.entities());
        Ok(id)
    }

    /// Writes the desires for an emergency event. They are served ahead of
    /// all other work on the next pass.
    pub fn remediate(
        &mut self,
        event: &EmergencyEvent,
    ) -> Result<Vec<StateRecord>, OrchestratorError> {
        self.check_lease()?;
        remediate(&self.store, event)
    }

    /// Starts a rolling update of `targets` (default: every node meant to
    /// run an operating system) to `image`.
    pub fn start_rollout(
        &mut self,
        image: Digest,
        max_unavailable: usize,
        targets: Option<Vec<NodeId>>,
        now: u64,
    ) -> Result<String, OrchestratorError> {
        if max_unavailable == 0 {
            return Err(OrchestratorError::InvalidPlan(
                "max_unavailable must be at least 1".into(),
            ));
        }
        self.check_lease()?;
        let targets = match targets {
            Some(t) => t,
            None => fleet_nodes(&self.store)
                .into_iter()
                .filter(|n| {
                    let d = self
                        .store
                        .value(&StateKey::node(n.as_str(), "phase"), Kind::Desire);
                    d.as_ref().and_then(Value::as_str).is_none_or(|p| {
                        p == NodePhase::ServicesReady.as_str() || p == NodePhase::MinimalOS.as_str()
                    })
                })
                .collect(),
        };
        let n = self.next_id();
        let id = format!("rollout-{}-{n}", self.epoch);
        let params = RolloutParams {
            image,
            max_unavailable,
            targets,
            drain_timeout: self.config.drain_timeout,
        };
        let r = RollingUpdate::start(id.clone(), params, &self.store, &*self.checkpoints, now)?;
        self.rollouts.insert(id.clone(), r);
        Ok(id)
    }

    pub fn rollout_report(&self, id: &str) -> Option<&RolloutReport> {
        self.reports.get(id)
    }

    pub fn active_rollouts(&self) -> impl Iterator<Item = &RollingUpdate> {
        self.rollouts.values()
    }

    /// Advances rolling updates, then runs one reconcile pass.
    pub fn tick<D: Dispatcher + ?Sized>(
        &mut self,
        now: u64,
        dispatcher: &mut D,
    ) -> Result<Vec<ActionCommand>, OrchestratorError> {
        self.check_lease()?;
        let ids: Vec<String> = self.rollouts.keys().cloned().collect();
        for id in ids {
            let r = self.rollouts.get_mut(&id).expect("listed above");
            if let Some(report) = r.step(&self.store, &*self.checkpoints, &self.given_up, now)? {
                log::info!("{id} finished: {:?}", report.status);
                self.rollouts.remove(&id);
                self.reports.insert(id, report);
            }
        }
        self.reconcile_once(now, dispatcher)
    }

    /// Plans, records intents, then dispatches.
    pub fn reconcile_once<D: Dispatcher + ?Sized>(
        &mut self,
        now: u64,
        dispatcher: &mut D,
    ) -> Result<Vec<ActionCommand>, OrchestratorError> {
        self.prepare(now)?;
        Ok(self.dispatch(dispatcher))
    }

    /// First half of a pass: decides what to dispatch and writes the intent
    /// records, without dispatching anything.
    pub fn prepare(&mut self, now: u64) -> Result<Vec<ActionCommand>, OrchestratorError> {
        self.check_lease()?;
        self.put_own(&heartbeat_key(), Value::Int(now as i64))?;
        let (changed, cursor) = self.store.changes_since(self.cursor);
        self.cursor = cursor;
        self.dirty.extend(changed);
        self.settle(now)?;

        for entity in mem::take(&mut self.dirty) {
            if entity != LEASE_ENTITY {
                self.recompute(&entity)?;
            }
        }

        let budget = self
            .config
            .max_parallel_actions
            .saturating_sub(self.in_flight.len());
        let picks: Vec<(Priority, String)> = self.index.iter().take(budget).cloned().collect();
        for (priority, slot) in picks {
            self.index.remove(&(priority, slot.clone()));
            let (_, work) = self.backlog.remove(&slot).expect("index and backlog agree");
            if let Work::Node { node, .. } = &work {
                if priority == Priority::Flow {
                    self.flows.pop(node.as_str());
                }
            }
            let n = self.next_id();
            let tag = format!("{}:{}:{n}", self.principal, self.epoch);
            let intent = Intent {
                tag: tag.clone(),
                work: work.clone(),
                at: now,
            };
            self.put_own(&work.intent_key(), intent.to_value())?;
            self.in_flight.insert(
                slot,
                InFlight {
                    tag: tag.clone(),
                    work: work.clone(),
                    priority,
                    sent_at: now,
                },
            );
            self.outbox.push(ActionCommand {
                tag,
                work,
                priority,
            });
        }
        for slot in mem::take(&mut self.resend) {
            if let Some(f) = self.in_flight.get(&slot) {
                self.outbox.push(ActionCommand {
                    tag: f.tag.clone(),
                    work: f.work.clone(),
                    priority: f.priority,
                });
            }
        }
        Ok(self.outbox.clone())
    }

    /// Second half of a pass: hands prepared commands to `dispatcher`.
    pub fn dispatch<D: Dispatcher + ?Sized>(&mut self, dispatcher: &mut D) -> Vec<ActionCommand> {
        let out = mem::take(&mut self.outbox);
        for c in &out {
            dispatcher.dispatch(c.clone());
        }
        out
    }

    /// Retires finished work and schedules resends of unacknowledged work.
    fn settle(&mut self, now: u64) -> Result<(), OrchestratorError> {
        let mut finished = Vec::new();
        for (slot, f) in &mut self.in_flight {
            let outcome = match &f.work {
                Work::Node { node, .. } => match ActionStatus::read(&self.store, node.as_str()) {
                    Some(s) if s.tag == f.tag => s.state.is_final().then_some(s.state),
                    _ => {
                        if now.saturating_sub(f.sent_at) >= self.config.redispatch_after {
                            f.sent_at = now;
                            self.resend.insert(slot.clone());
                        }
                        None
                    }
                },
                Work::Apply { key, value } => {
                    if self.store.value(key, Kind::Fact).as_ref() == Some(value) {
                        Some(ActionState::Done)
                    } else if self.store.value(key, Kind::Desire).as_ref() != Some(value) {
                        Some(ActionState::Rejected)
                    } else {
                        if now.saturating_sub(f.sent_at) >= self.config.redispatch_after {
                            f.sent_at = now;
                            self.resend.insert(slot.clone());
                        }
                        None
                    }
                }
            };
            if let Some(state) = outcome {
                finished.push((slot.clone(), state));
            }
        }
        for (slot, state) in finished {
            let f = self.in_flight.remove(&slot).expect("collected above");
            let entity = match &f.work {
                Work::Node { node, .. } => node.0.clone(),
                Work::Apply { key, .. } => key.entity().to_string(),
            };
            if state == ActionState::Failed {
                self.record_failure(&entity)?;
            }
            self.dirty.insert(entity);
        }
        Ok(())
    }

    fn record_failure(&mut self, node: &str) -> Result<(), OrchestratorError> {
        let n = self.failures.entry(node.to_string()).or_insert(0);
        *n += 1;
        let n = *n;
        self.put_own(&orch_key(node, "failures"), Value::Int(n as i64))?;
        if n >= self.config.retry_limit && self.given_up.insert(node.to_string()) {
            log::warn!("giving up on {node} after {n} failed actions");
            self.put_own(&orch_key(node, "gave_up"), Value::Bool(true))?;
        }
        Ok(())
    }

    fn candidate_for_node(&mut self, node: &NodeId, view: &NodeView) -> Option<(Priority, Work)> {
        if view.emergency {
            if let Some(w) = plan_for_node(&self.graph, node, view) {
                return Some((Priority::Emergency, w));
            }
        }
        while let Some((_, action)) = self.flows.peek(node.as_str()) {
            if let Some(e) = self.graph.edge(view.phase, action.as_str()) {
                return Some((Priority::Flow, work_for(node, e, view)));
            }
            log::debug!("dropping flow action {action} for {node} in {}", view.phase);
            self.flows.pop(node.as_str());
        }
        if self.given_up.contains(node.as_str()) {
            return None;
        }
        plan_for_node(&self.graph, node, view).map(|w| (Priority::Normal, w))
    }

    fn recompute(&mut self, entity: &str) -> Result<(), OrchestratorError> {
        for slot in self.entity_slots.remove(entity).unwrap_or_default() {
            if let Some((p, _)) = self.backlog.remove(&slot) {
                self.index.remove(&(p, slot));
            }
        }
        let mut slots = Vec::new();
        if let Some(view) = NodeView::read(&self.store, entity) {
            let node = NodeId::new(entity);
            self.flows.evaluate(&self.store, entity);
            if !self.in_flight.contains_key(entity) {
                match self.candidate_for_node(&node, &view) {
                    Some(c) => slots.push((entity.to_string(), c)),
                    None => {
                        let settled =
                            view.phase.is_available() || Some(view.phase) == view.desired_phase;
                        if settled && self.failures.remove(entity).is_some() {
                            self.put_own(&orch_key(entity, "failures"), Value::Int(0))?;
                        }
                    }
                }
            }
        }
        for d in self.store.diff(entity) {
            if matches!(d.key.namespace(), "node" | ORCH_NS) {
                continue;
            }
            let slot = d.key.to_string();
            if self.in_flight.contains_key(&slot) {
                continue;
            }
            let priority = if d.origin.as_ref().is_some_and(|o| o.is_emergency()) {
                Priority::Emergency
            } else {
                Priority::Normal
            };
            slots.push((
                slot,
                (
                    priority,
                    Work::Apply {
                        key: d.key,
                        value: d.desire,
                    },
                ),
            ));
        }
        if slots.is_empty() {
            return Ok(());
        }
        let mut names = Vec::with_capacity(slots.len());
        for (slot, (p, w)) in slots {
            self.index.insert((p, slot.clone()));
            self.backlog.insert(slot.clone(), (p, w));
            names.push(slot);
        }
        self.entity_slots.insert(entity.to_string(), names);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::checkpoint::MemCheckpoints;
    use crate::orchestrator::work::PROVISIONER;
    use crate::statestore::RenderId;
    use NodePhase::*;

    fn view(
        phase: NodePhase,
        image: u64,
        dphase: Option<NodePhase>,
        dimage: Option<u64>,
    ) -> NodeView {
        NodeView {
            phase,
            image: Some(Digest(image)),
            desired_phase: dphase,
            desired_image: dimage.map(Digest),
            emergency: false,
        }
    }

    fn action(w: Option<Work>) -> Option<String> {
        match w? {
            Work::Node { action, .. } => Some(action.0),
            Work::Apply { .. } => None,
        }
    }

    #[test]
    fn planner_rules() {
        let g = MutationGraph::default();
        let n = NodeId::new("n1");
        let p = |v| action(plan_for_node(&g, &n, &v));
        assert_eq!(
            p(view(ServicesReady, 1, Some(ServicesReady), Some(1))),
            None
        );
        assert_eq!(p(view(JobRunning, 1, Some(ServicesReady), Some(1))), None);
        assert_eq!(
            p(view(JobRunning, 1, Some(ServicesReady), Some(2))).as_deref(),
            Some("drain")
        );
        assert_eq!(p(view(Draining, 1, Some(ServicesReady), Some(2))), None);
        assert_eq!(
            p(view(Draining, 1, Some(ServicesReady), Some(1))).as_deref(),
            Some("undrain")
        );
        assert_eq!(
            p(view(ServicesReady, 1, None, Some(2))).as_deref(),
            Some("reboot")
        );
        assert_eq!(
            p(view(MinimalOS, 1, Some(ServicesReady), Some(2))).as_deref(),
            Some("power_off")
        );
        assert_eq!(p(view(Quarantined, 1, Some(ServicesReady), Some(2))), None);
        assert_eq!(
            p(view(JobRunning, 1, Some(Quarantined), None)).as_deref(),
            Some("quarantine")
        );
        assert_eq!(
            p(view(Faulted, 1, Some(ServicesReady), None)).as_deref(),
            Some("power_cycle")
        );
        assert_eq!(p(view(PoweredOff, 1, None, None)), None);
        let w = plan_for_node(&g, &n, &view(NetBooting, 1, None, Some(7))).unwrap();
        assert_eq!(
            w,
            Work::Node {
                node: n.clone(),
                action: crate::fleetmodel::ActionId::new("load_minimal_os"),
                image: Some(Digest(7)),
            }
        );
    }

    /// Minimal provisioner: applies each node action along its graph edge
    /// immediately and reports it done.
    struct Instant<'a> {
        store: &'a StateStore,
        graph: MutationGraph,
        log: Vec<(String, String)>,
    }

    impl Instant<'_> {
        fn run(&mut self, cmds: &[ActionCommand]) {
            let p = Principal::new(PROVISIONER);
            for c in cmds {
                match &c.work {
                    Work::Node {
                        node,
                        action,
                        image,
                    } => {
                        let phase = phase_of_store(self.store, node.as_str());
                        let edge = self.graph.edge(phase, action.as_str()).unwrap().clone();
                        self.store
                            .put_fact_next(
                                &p,
                                &StateKey::node(node.as_str(), "phase"),
                                Value::str(edge.to.as_str()),
                            )
                            .unwrap();
                        if let Some(d) = image {
                            self.store
                                .put_fact_next(
                                    &p,
                                    &StateKey::node(node.as_str(), "image"),
                                    Value::Digest(*d),
                                )
                                .unwrap();
                        }
                        let status = ActionStatus {
                            tag: c.tag.clone(),
                            state: ActionState::Done,
                        };
                        self.store
                            .put_fact_next(&p, &ActionStatus::key(node.as_str()), status.to_value())
                            .unwrap();
                        self.log.push((node.0.clone(), action.0.clone()));
                    }
                    Work::Apply { key, value } => {
                        self.store.put_fact_next(&p, key, value.clone()).unwrap();
                        self.log.push((key.to_string(), "apply".into()));
                    }
                }
            }
        }
    }

    fn phase_of_store(store: &StateStore, node: &str) -> NodePhase {
        super::super::work::phase_of(store, node).unwrap()
    }

    fn fleet(n: usize, phase: NodePhase, image: u64) -> Arc<StateStore> {
        let store = Arc::new(StateStore::new("s"));
        let p = Principal::new(PROVISIONER);
        for ns in ["node", "cluster"] {
            store
                .transfer_ownership(KeyRange::namespace(ns), None, p.clone(), 1)
                .unwrap();
        }
        for i in 0..n {
            let id = format!("n{i}");
            store
                .put_fact_next(
                    &p,
                    &StateKey::node(&id, "phase"),
                    Value::str(phase.as_str()),
                )
                .unwrap();
            store
                .put_fact_next(
                    &p,
                    &StateKey::node(&id, "image"),
                    Value::Digest(Digest(image)),
                )
                .unwrap();
        }
        store
    }

    fn orch(store: &Arc<StateStore>, max: usize) -> Orchestrator {
        let config = ReconcileConfig {
            max_parallel_actions: max,
            ..ReconcileConfig::default()
        };
        Orchestrator::acquire(
            "orch-a",
            store.clone(),
            MutationGraph::default(),
            config,
            Arc::new(MemCheckpoints::new()),
            0,
        )
        .unwrap()
    }

    #[test]
    fn fixpoint_dispatches_nothing() {
        let store = fleet(3, ServicesReady, 1);
        for i in 0..3 {
            store.put_desire(
                &StateKey::node(&format!("n{i}"), "image"),
                Value::Digest(Digest(1)),
                RenderId::new("r1"),
            );
        }
        let mut o = orch(&store, 4);
        let mut out = Vec::new();
        assert!(o.reconcile_once(1, &mut out).unwrap().is_empty());
        assert!(o.reconcile_once(2, &mut out).unwrap().is_empty());
    }

    #[test]
    fn budget_limits_dispatch() {
        let store = fleet(5, ServicesReady, 1);
        for i in 0..5 {
            store.put_desire(
                &StateKey::node(&format!("n{i}"), "image"),
                Value::Digest(Digest(2)),
                RenderId::new("r1"),
            );
        }
        let mut o = orch(&store, 2);
        let mut out = Vec::new();
        assert_eq!(o.reconcile_once(1, &mut out).unwrap().len(), 2);
        // Nothing acknowledged yet: the budget is still spent.
        assert_eq!(o.reconcile_once(2, &mut out).unwrap().len(), 0);
    }

    #[test]
    fn image_change_follows_reboot_path() {
        let store = fleet(1, ServicesReady, 1);
        store.put_desire(
            &StateKey::node("n0", "image"),
            Value::Digest(Digest(2)),
            RenderId::new("r1"),
        );
        let g = MutationGraph::default();
        let oracle: Vec<String> = g
            .plan_mutations(ServicesReady, PoweredOn)
            .unwrap()
            .into_iter()
            .chain(g.plan_mutations(PoweredOn, ServicesReady).unwrap())
            .map(|e| e.action.0)
            .collect();
        let mut o = orch(&store, 4);
        let mut prov = Instant {
            store: &store,
            graph: g,
            log: Vec::new(),
        };
        for t in 1..20 {
            let cmds = o.reconcile_once(t, &mut Vec::new()).unwrap();
            prov.run(&cmds);
        }
        let got: Vec<String> = prov.log.iter().map(|(_, a)| a.clone()).collect();
        assert_eq!(got, oracle);
        assert_eq!(super::super::work::image_of(&store, "n0"), Some(Digest(2)));
    }

    #[test]
    fn emergency_work_goes_first() {
        let store = fleet(4, ServicesReady, 1);
        for i in 0..4 {
            store.put_desire(
                &StateKey::node(&format!("n{i}"), "image"),
                Value::Digest(Digest(2)),
                RenderId::new("r1"),
            );
        }
        let mut o = orch(&store, 1);
        o.remediate(&EmergencyEvent::RevokeAccess {
            user: "mallory".into(),
        })
        .unwrap();
        o.remediate(&EmergencyEvent::Quarantine {
            node: NodeId::new("n3"),
            reason: "test".into(),
        })
        .unwrap();
        let mut prov = Instant {
            store: &store,
            graph: MutationGraph::default(),
            log: Vec::new(),
        };
        for t in 1..4 {
            let cmds = o.reconcile_once(t, &mut Vec::new()).unwrap();
            prov.run(&cmds);
        }
        let first: Vec<&str> = prov.log.iter().take(2).map(|(s, _)| s.as_str()).collect();
        assert_eq!(first, ["cluster/access/deny:mallory", "n3"]);
        assert_eq!(phase_of_store(&store, "n3"), Quarantined);
    }

    #[test]
    fn standby_waits_for_stale_heartbeat() {
        let store = fleet(1, ServicesReady, 1);
        let ck: Arc<dyn CheckpointStore> = Arc::new(MemCheckpoints::new());
        let cfg = ReconcileConfig::default();
        let mut a = Orchestrator::acquire(
            "a",
            store.clone(),
            MutationGraph::default(),
            cfg.clone(),
            ck.clone(),
            0,
        )
        .unwrap();
        a.reconcile_once(5, &mut Vec::new()).unwrap();
        assert!(matches!(
            Orchestrator::acquire(
                "b",
                store.clone(),
                MutationGraph::default(),
                cfg.clone(),
                ck.clone(),
                10
            ),
            Err(OrchestratorError::LeaseHeld(_))
        ));
        let b = Orchestrator::acquire("b", store.clone(), MutationGraph::default(), cfg, ck, 16)
            .unwrap();
        assert_eq!(b.epoch(), 2);
        assert!(matches!(
            a.reconcile_once(17, &mut Vec::new()),
            Err(OrchestratorError::LeaseLost)
        ));
    }

    #[test]
    fn undelivered_intent_is_reissued_under_the_new_epoch() {
        let store = fleet(2, ServicesReady, 1);
        store.put_desire(
            &StateKey::node("n1", "image"),
            Value::Digest(Digest(2)),
            RenderId::new("r1"),
        );
        let ck: Arc<dyn CheckpointStore> = Arc::new(MemCheckpoints::new());
        let cfg = ReconcileConfig::default();
        let mut a = Orchestrator::acquire(
            "a",
            store.clone(),
            MutationGraph::default(),
            cfg.clone(),
            ck.clone(),
            0,
        )
        .unwrap();
        let prepared = a.prepare(1).unwrap();
        assert_eq!(prepared.len(), 1);
        drop(a);
        let mut b = Orchestrator::acquire("a", store.clone(), MutationGraph::default(), cfg, ck, 2)
            .unwrap();
        let sent = b.reconcile_once(2, &mut Vec::new()).unwrap();
        assert_eq!(sent.len(), 1);
        assert_eq!(sent[0].work, prepared[0].work);
        assert_eq!(tag_epoch(&sent[0].tag), Some(2));
    }
}
