use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boot::{attest, boot_node, AttestationReport, BootEnv, BootParams, BootTrace, Verdict};
use super::image::{ImageManifest, Layer};
use super::node::{assign_address, SimNode, Wiring};
use super::scenario::{FaultKind, FaultSpec, Scenario};
use super::trace::TraceEvent;
use super::ProvisimError;
use crate::configlayers::{
    merge_layers, ConfigLayer, ImageRegistry, Precedence, RenderResult, Renderer, Scope,
};
use crate::digest::Digest;
use crate::fleetmodel::{
    derive_identity, MacAddr, MutationGraph, NodeId, NodePhase, TopologyLocation,
};
use crate::net::Network;
use crate::orchestrator::{
    phase_of, remediate, run_sequence, tag_epoch, ActionCommand, ActionState, ActionStatus,
    CheckpointStore, DependencyDag, Direction, EmergencyEvent, FlowDefinition, MemCheckpoints,
    Orchestrator, OrchestratorError, RolloutReport, SequenceOptions, SequenceReport, Vertex,
    VertexExecutor, Work, ORCH_NS, PROVISIONER,
};
use crate::replication::{gossip_round, GossipReplica};
use crate::statestore::{KeyRange, Kind, Principal, RenderId, StateKey, StateStore, Value};

/// Network endpoint of whichever orchestrator instance is running.
pub const ORCHESTRATOR_ENDPOINT: &str = "orchestrator";
const PRINCIPALS: [&str; 2] = ["orch-a", "orch-b"];
/// Actions carried out through the node's BMC.
const POWER_ACTIONS: [&str; 3] = ["power_on", "power_off", "power_cycle"];
/// Ticks a sequence readiness probe lets the fleet run before answering.
const PROBE_TICKS: u64 = 500;

#[derive(Debug)]
enum Payload {
    Complete {
        node: usize,
        tag: String,
    },
    Apply {
        key: StateKey,
        value: Value,
    },
    FaultStart(usize),
    FaultEnd(usize),
    JobStart {
        node: usize,
        duration: u64,
    },
    JobEnd {
        node: usize,
    },
    Kill {
        after_prepare: bool,
    },
    Restart,
    Rollout {
        image: Digest,
        max_unavailable: usize,
    },
}

#[derive(Debug)]
struct Scheduled {
    due: u64,
    seq: u64,
    payload: Payload,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.seq) == (other.due, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: the heap pops the earliest (due, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.due, other.seq).cmp(&(self.due, self.seq))
    }
}

#[derive(Clone, Debug)]
struct Running {
    tag: String,
    action: String,
    to: NodePhase,
    failure: NodePhase,
    image: Option<Digest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: String,
    pub seed: u64,
    pub ticks: u64,
    pub seconds: f64,
    /// Every node matches its desires (a node running a job counts as
    /// ServicesReady).
    pub converged: bool,
    pub phases: BTreeMap<String, usize>,
    pub actions: usize,
    pub bytes_transferred: u64,
    pub boots: usize,
    pub attestation_failures: usize,
}

/// The simulated fleet and the provisioner that drives it.
pub struct FleetSim {
    scenario: Scenario,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    store: Arc<StateStore>,
    graph: MutationGraph,
    checkpoints: Arc<MemCheckpoints>,
    orch: Option<Orchestrator>,
    generation: usize,
    restart_pending: bool,
    pending_kill: Option<bool>,
    prov: Principal,
    nodes: Vec<SimNode>,
    index: HashMap<String, usize>,
    phases: Vec<NodePhase>,
    phase_counts: BTreeMap<NodePhase, usize>,
    running: Vec<Option<Running>>,
    measured: Vec<Option<(Digest, Vec<Digest>)>>,
    seen_tags: HashSet<String>,
    accepted: u64,
    wiring: Wiring,
    network: Network<String>,
    bmc_off: BTreeSet<usize>,
    slow: BTreeMap<usize, (u64, BTreeSet<usize>)>,
    faults: Vec<FaultSpec>,
    manifests: BTreeMap<Digest, ImageManifest>,
    registry: ImageRegistry,
    layers: Vec<ConfigLayer>,
    renderer: Renderer,
    replicas: Vec<GossipReplica>,
    rng: ChaCha8Rng,
    trace: Vec<TraceEvent>,
    boots: Vec<BootTrace>,
    attestations: Vec<AttestationReport>,
    bytes_transferred: u64,
}

impl FleetSim {
    pub fn new(scenario: Scenario) -> Result<Self, ProvisimError> {
        scenario.validate()?;
        let graph = match &scenario.graph {
            Some(path) => MutationGraph::from_toml(&std::fs::read_to_string(path)?)?,
            None => MutationGraph::default(),
        };

        let mut nodes = Vec::with_capacity(scenario.fleet.count + scenario.nodes.len());
        let ports = scenario.fleet.ports_per_switch as usize;
        for i in 0..scenario.fleet.count {
            nodes.push(SimNode::new(
                NodeId::new(format!("n{i:05}")),
                TopologyLocation::new((i / ports) as u32, (i % ports) as u16),
                MacAddr::from_u64(0x0200_0000_0000 + i as u64),
                scenario.fleet.memory,
            ));
        }
        for spec in &scenario.nodes {
            let i = nodes.len();
            nodes.push(SimNode::new(
                NodeId::new(spec.id.clone()),
                TopologyLocation::new(spec.chassis, spec.port),
                spec.nic
                    .unwrap_or(MacAddr::from_u64(0x0200_0000_0000 + i as u64)),
                spec.memory.unwrap_or(scenario.fleet.memory),
            ));
        }
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.0.clone(), i).is_some() {
                return Err(ProvisimError::Scenario(format!(
                    "node {} declared twice",
                    n.id
                )));
            }
        }
        let wiring = Wiring::new(&nodes)?;

        let mut manifests = BTreeMap::new();
        let mut registry = ImageRegistry::new();
        for spec in &scenario.images {
            let layers = spec
                .layers
                .iter()
                .map(|(content, size)| Layer::of(&format!("{}/{content}", spec.name), *size))
                .collect();
            let m = ImageManifest::new(spec.name.clone(), spec.kind, layers)?;
            registry.insert(spec.name.clone(), m.id);
            manifests.insert(m.id, m);
        }

        let store = Arc::new(StateStore::new(scenario.name.clone()));
        let prov = Principal::new(PROVISIONER);
        for ns in ["node", "cluster", "service"] {
            store.transfer_ownership(KeyRange::namespace(ns), None, prov.clone(), 1)?;
        }

        let mut sim = FleetSim {
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            store,
            graph: graph.clone(),
            checkpoints: Arc::new(MemCheckpoints::new()),
            orch: None,
            generation: 0,
            restart_pending: true,
            pending_kill: None,
            prov,
            phases: vec![scenario.fleet.initial_phase; nodes.len()],
            phase_counts: BTreeMap::from([(scenario.fleet.initial_phase, nodes.len())]),
            running: vec![None; nodes.len()],
            measured: vec![None; nodes.len()],
            seen_tags: HashSet::new(),
            accepted: 0,
            wiring,
            network: Network::new(),
            bmc_off: BTreeSet::new(),
            slow: BTreeMap::new(),
            faults: Vec::new(),
            renderer: Renderer::new(registry.clone(), graph.clone()),
            layers: Vec::new(),
            manifests,
            registry,
            replicas: (0..scenario.gossip_replicas)
                .map(|i| GossipReplica::new(format!("g{i}")))
                .collect(),
            trace: Vec::new(),
            boots: Vec::new(),
            attestations: Vec::new(),
            bytes_transferred: 0,
            nodes,
            index,
            scenario,
        };
        sim.seed_facts()?;
        sim.render_config()?;
        sim.schedule_scenario()?;
        sim.try_acquire()?;
        if let Some(orch) = sim.orch.as_mut() {
            for flow in sim.scenario.flows.clone() {
                orch.register_flow(flow)?;
            }
        }
        sim.process_due()?;
        Ok(sim)
    }

    pub fn from_toml(text: &str) -> Result<Self, ProvisimError> {
        Self::new(Scenario::from_toml(text)?)
    }

    fn seed_facts(&mut self) -> Result<(), ProvisimError> {
        use NodePhase::*;
        let phase = self.scenario.fleet.initial_phase;
        let booted = matches!(phase, MinimalOS | ServicesReady | JobRunning | Draining);
        let image = match &self.scenario.fleet.initial_image {
            Some(name) => Some(self.image_by_name(name)?),
            None if booted => {
                return Err(ProvisimError::Scenario(format!(
                    "fleet starting in {phase} needs an initial_image"
                )))
            }
            None => None,
        };
        for i in 0..self.nodes.len() {
            let id = self.nodes[i].id.0.clone();
            self.put(StateKey::node(&id, "phase"), Value::str(phase.as_str()))?;
            if phase != Unknown {
                self.write_location(i)?;
            }
            if let (true, Some(img)) = (booted, image) {
                self.put(StateKey::node(&id, "image"), Value::Digest(img))?;
                let layers = self.manifests[&img]
                    .layers
                    .iter()
                    .map(|l| l.digest)
                    .collect();
                self.measured[i] = Some((img, layers));
            }
        }
        Ok(())
    }

    fn render_config(&mut self) -> Result<(), ProvisimError> {
        let mut stack = self.scenario.config.clone();
        if let Some(d) = &self.scenario.desired {
            let mut layer = ConfigLayer::new("scenario-defaults", Precedence::Base, Scope::Global);
            if let Some(image) = &d.image {
                layer = layer.with("defaults.image", image.clone().into());
            }
            if let Some(phase) = d.phase {
                layer = layer.with("defaults.phase", phase.as_str().into());
            }
            stack.insert(0, layer);
        }
        self.layers = stack;
        if !self.layers.is_empty() {
            self.render()?;
        }
        Ok(())
    }

    fn render(&mut self) -> Result<RenderResult, ProvisimError> {
        let effective = merge_layers(&self.layers)?;
        let fleet: Vec<NodeId> = self.nodes.iter().map(|n| n.id.clone()).collect();
        Ok(self
            .renderer
            .render_desires(&effective, &fleet, &self.store)?)
    }

    /// Adds `layer` to the configuration stack, replacing any layer of the
    /// same name, and renders the new desires.
    pub fn apply_layer(&mut self, layer: ConfigLayer) -> Result<RenderResult, ProvisimError> {
        let previous = self.layers.clone();
        match self.layers.iter_mut().find(|l| l.name == layer.name) {
            Some(l) => *l = layer,
            None => self.layers.push(layer),
        }
        let result = self.render();
        if result.is_err() {
            self.layers = previous;
        }
        result
    }

    pub fn layers(&self) -> &[ConfigLayer] {
        &self.layers
    }

    pub fn renderer(&self) -> &Renderer {
        &self.renderer
    }

    fn schedule_scenario(&mut self) -> Result<(), ProvisimError> {
        for f in self.scenario.faults.clone() {
            self.inject_fault(f)?;
        }
        for j in self.scenario.jobs.clone() {
            let node = self.node_index(&j.node)?;
            self.schedule(
                j.at,
                Payload::JobStart {
                    node,
                    duration: j.duration,
                },
            );
        }
        for r in self.scenario.rollouts.clone() {
            let image = self.image_by_name(&r.image)?;
            self.schedule(
                r.at,
                Payload::Rollout {
                    image,
                    max_unavailable: r.max_unavailable,
                },
            );
        }
        for k in self.scenario.kills.clone() {
            self.schedule_kill(k.at, k.down_for, k.after_prepare);
        }
        Ok(())
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn store(&self) -> &Arc<StateStore> {
        &self.store
    }

    pub fn graph(&self) -> &MutationGraph {
        &self.graph
    }

    pub fn checkpoints(&self) -> Arc<dyn CheckpointStore> {
        self.checkpoints.clone()
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn boots(&self) -> &[BootTrace] {
        &self.boots
    }

    pub fn attestations(&self) -> &[AttestationReport] {
        &self.attestations
    }

    pub fn replicas(&self) -> &[GossipReplica] {
        &self.replicas
    }

    pub fn orchestrator(&mut self) -> Option<&mut Orchestrator> {
        self.orch.as_mut()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter().map(|n| &n.id)
    }

    pub fn node(&self, id: &str) -> Option<&SimNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn phase(&self, id: &str) -> Option<NodePhase> {
        self.index.get(id).map(|&i| self.phases[i])
    }

    pub fn phase_count(&self, phase: NodePhase) -> usize {
        self.phase_counts.get(&phase).copied().unwrap_or(0)
    }

    pub fn manifest(&self, id: Digest) -> Option<&ImageManifest> {
        self.manifests.get(&id)
    }

    pub fn image_by_name(&self, name: &str) -> Result<Digest, ProvisimError> {
        self.registry
            .resolve(name)
            .map_err(|_| ProvisimError::UnknownImage(name.to_string()))
    }

    fn node_index(&self, id: &str) -> Result<usize, ProvisimError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| ProvisimError::UnknownNode(id.to_string()))
    }

    fn schedule(&mut self, due: u64, payload: Payload) {
        self.seq += 1;
        self.queue.push(Scheduled {
            due,
            seq: self.seq,
            payload,
        });
    }

    fn put(&self, key: StateKey, value: Value) -> Result<(), ProvisimError> {
        self.store.put_fact_next(&self.prov, &key, value)?;
        Ok(())
    }

    /// Schedules `spec` and returns its fault id.
    pub fn inject_fault(&mut self, spec: FaultSpec) -> Result<usize, ProvisimError> {
        match &spec.kind {
            FaultKind::Crash { node }
            | FaultKind::CorruptLayer { node, .. }
            | FaultKind::BmcOff { node } => {
                self.node_index(node)?;
            }
            FaultKind::SlowLink { nodes, factor } => {
                if *factor == 0 {
                    return Err(ProvisimError::Scenario(
                        "slow_link factor must be at least 1".into(),
                    ));
                }
                for n in nodes {
                    self.node_index(n)?;
                }
            }
            FaultKind::Partition { groups } => {
                for id in groups.iter().flatten() {
                    let known = id == ORCHESTRATOR_ENDPOINT
                        || self.index.contains_key(id)
                        || self.replicas.iter().any(|r| &r.id == id);
                    if !known {
                        return Err(ProvisimError::UnknownNode(id.clone()));
                    }
                }
            }
            FaultKind::LldpOff { switch } => {
                if !self.wiring.has_switch(*switch) {
                    return Err(ProvisimError::UnknownSwitch(*switch));
                }
            }
        }
        let id = self.faults.len();
        let at = spec.at.max(self.now);
        self.faults.push(spec);
        self.schedule(at, Payload::FaultStart(id));
        Ok(id)
    }

    pub fn schedule_kill(&mut self, at: u64, down_for: u64, after_prepare: bool) {
        let at = at.max(self.now);
        self.schedule(at, Payload::Kill { after_prepare });
        self.schedule(at + down_for, Payload::Restart);
    }

    pub fn schedule_rollout(&mut self, at: u64, image: Digest, max_unavailable: usize) {
        self.schedule(
            at.max(self.now),
            Payload::Rollout {
                image,
                max_unavailable,
            },
        );
    }

    /// Starts a rolling update now and runs the fleet until it finishes,
    /// for at most `max_ticks` ticks.
    pub fn rollout(
        &mut self,
        image: Digest,
        max_unavailable: usize,
        max_ticks: u64,
    ) -> Result<RolloutReport, ProvisimError> {
        let limit = self.now + max_ticks;
        self.wait_for_orchestrator(limit)?;
        let id = match self.orch.as_mut() {
            Some(o) => o.start_rollout(image, max_unavailable, None, self.now)?,
            None => return Err(ProvisimError::OrchestratorDown),
        };
        self.trace.push(TraceEvent::RolloutStarted {
            t: self.now,
            id: id.clone(),
        });
        let done = self.run_until(limit - self.now, |s| {
            s.orch
                .as_ref()
                .is_some_and(|o| o.rollout_report(&id).is_some())
        })?;
        match self.orch.as_ref().and_then(|o| o.rollout_report(&id)) {
            Some(r) if done => Ok(r.clone()),
            _ => Err(ProvisimError::Timeout {
                what: format!("rollout {id}"),
                ticks: max_ticks,
            }),
        }
    }

    /// Registers an event-driven flow with the running orchestrator.
    pub fn register_flow(&mut self, def: FlowDefinition) -> Result<String, ProvisimError> {
        match self.orch.as_mut() {
            Some(o) => Ok(o.register_flow(def)?),
            None => Err(ProvisimError::OrchestratorDown),
        }
    }

    fn wait_for_orchestrator(&mut self, limit: u64) -> Result<(), ProvisimError> {
        while self.orch.is_none() {
            if self.now >= limit
                || (!self.restart_pending && self.pending_kill.is_none() && self.queue.is_empty())
            {
                return Err(ProvisimError::OrchestratorDown);
            }
            self.step()?;
        }
        Ok(())
    }

    /// Writes a desire on behalf of an operator.
    pub fn put_desire(&self, key: StateKey, value: Value, origin: &str) {
        self.store.put_desire(&key, value, RenderId::new(origin));
    }

    /// Advances the simulation by one tick.
    pub fn step(&mut self) -> Result<(), ProvisimError> {
        self.now += 1;
        self.process_due()?;
        self.drive_orchestrator()?;
        self.gossip();
        Ok(())
    }

    /// Runs until nothing is left to do or the tick limit is reached.
    pub fn run(&mut self) -> Result<SimReport, ProvisimError> {
        while self.now < self.scenario.max_ticks {
            self.step()?;
            if self.quiescent() {
                break;
            }
        }
        Ok(self.report())
    }

    /// Runs until `done` holds, for at most `max_ticks` more ticks.
    pub fn run_until(
        &mut self,
        max_ticks: u64,
        mut done: impl FnMut(&FleetSim) -> bool,
    ) -> Result<bool, ProvisimError> {
        let limit = self.now + max_ticks;
        while !done(self) {
            if self.now >= limit {
                return Ok(false);
            }
            self.step()?;
        }
        Ok(true)
    }

    /// Nothing is scheduled and the orchestrator's last pass found no work.
    pub fn quiescent(&self) -> bool {
        self.queue.is_empty()
            && self.pending_kill.is_none()
            && self.orch.as_ref().is_some_and(|o| {
                o.in_flight() == 0
                    && o.backlog() == 0
                    && o.active_rollouts().next().is_none()
                    && !o.flows().has_queued()
            })
    }

    pub fn report(&self) -> SimReport {
        SimReport {
            scenario: self.scenario.name.clone(),
            seed: self.scenario.seed,
            ticks: self.now,
            seconds: self.now as f64 / self.scenario.ticks_per_second,
            converged: (0..self.nodes.len()).all(|i| self.node_converged(i)),
            phases: self
                .phase_counts
                .iter()
                .filter(|(_, &c)| c > 0)
                .map(|(p, c)| (p.as_str().to_string(), *c))
                .collect(),
            actions: self.accepted as usize,
            bytes_transferred: self.bytes_transferred,
            boots: self.boots.len(),
            attestation_failures: self
                .attestations
                .iter()
                .filter(|a| a.verdict != Verdict::Pass)
                .count(),
        }
    }

    fn node_converged(&self, i: usize) -> bool {
        self.store.diff(self.nodes[i].id.as_str()).iter().all(|d| {
            d.key.property() == "phase"
                && d.desire.as_str() == Some(NodePhase::ServicesReady.as_str())
                && self.phases[i] == NodePhase::JobRunning
        })
    }

    fn process_due(&mut self) -> Result<(), ProvisimError> {
        while self.queue.peek().is_some_and(|s| s.due <= self.now) {
            let s = self.queue.pop().expect("peeked");
            self.handle(s.payload)?;
        }
        Ok(())
    }

    fn handle(&mut self, payload: Payload) -> Result<(), ProvisimError> {
        match payload {
            Payload::Complete { node, tag } => self.complete(node, &tag)?,
            Payload::Apply { key, value } => {
                self.trace.push(TraceEvent::Applied {
                    t: self.now,
                    key: key.to_string(),
                });
                self.put(key, value)?;
            }
            Payload::FaultStart(id) => self.fault_start(id)?,
            Payload::FaultEnd(id) => self.fault_end(id),
            Payload::JobStart { node, duration } => self.job_start(node, duration)?,
            Payload::JobEnd { node } => self.job_end(node)?,
            Payload::Kill { after_prepare } => self.pending_kill = Some(after_prepare),
            Payload::Restart => {
                self.network.restore(&ORCHESTRATOR_ENDPOINT.to_string());
                self.restart_pending = true;
            }
            Payload::Rollout {
                image,
                max_unavailable,
            } => match self.orch.as_mut() {
                Some(o) => {
                    let id = o.start_rollout(image, max_unavailable, None, self.now)?;
                    self.trace
                        .push(TraceEvent::RolloutStarted { t: self.now, id });
                }
                None => self.schedule(
                    self.now + 1,
                    Payload::Rollout {
                        image,
                        max_unavailable,
                    },
                ),
            },
        }
        Ok(())
    }

    fn try_acquire(&mut self) -> Result<(), ProvisimError> {
        if self.orch.is_some() || !self.restart_pending {
            return Ok(());
        }
        let principal = PRINCIPALS[self.generation % PRINCIPALS.len()];
        match Orchestrator::acquire(
            principal,
            self.store.clone(),
            self.graph.clone(),
            self.scenario.orchestrator.clone(),
            self.checkpoints.clone(),
            self.now,
        ) {
            Ok(o) => {
                self.trace.push(TraceEvent::OrchestratorUp {
                    t: self.now,
                    principal: principal.to_string(),
                    epoch: o.epoch(),
                });
                self.orch = Some(o);
                self.generation += 1;
                self.restart_pending = false;
                Ok(())
            }
            Err(OrchestratorError::LeaseHeld(_)) => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    fn drive_orchestrator(&mut self) -> Result<(), ProvisimError> {
        if let Some(after_prepare) = self.pending_kill.take() {
            if let Some(mut o) = self.orch.take() {
                if after_prepare {
                    // Intents are recorded; the commands die with the process.
                    o.prepare(self.now)?;
                }
                self.trace.push(TraceEvent::OrchestratorDown {
                    t: self.now,
                    principal: o.principal().to_string(),
                    reason: "killed".into(),
                });
            }
            self.restart_pending = false;
            self.network.crash(ORCHESTRATOR_ENDPOINT.to_string());
            return Ok(());
        }
        if self.network.is_up(&ORCHESTRATOR_ENDPOINT.to_string()) {
            self.try_acquire()?;
        }
        let Some(o) = self.orch.as_mut() else {
            return Ok(());
        };
        let mut out: Vec<ActionCommand> = Vec::new();
        match o.tick(self.now, &mut out) {
            Ok(_) => {}
            Err(OrchestratorError::LeaseLost) => {
                self.trace.push(TraceEvent::OrchestratorDown {
                    t: self.now,
                    principal: o.principal().to_string(),
                    reason: "lease lost".into(),
                });
                self.orch = None;
                self.restart_pending = true;
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        }
        for cmd in out {
            self.deliver(cmd)?;
        }
        Ok(())
    }

    fn deliver(&mut self, cmd: ActionCommand) -> Result<(), ProvisimError> {
        match &cmd.work {
            Work::Apply { key, value } => {
                if self.seen_tags.insert(cmd.tag.clone()) {
                    self.schedule(
                        self.now + 1,
                        Payload::Apply {
                            key: key.clone(),
                            value: value.clone(),
                        },
                    );
                }
                Ok(())
            }
            Work::Node { node, .. } => {
                let Some(&i) = self.index.get(node.as_str()) else {
                    log::warn!("command {} for unknown node {node}", cmd.tag);
                    return Ok(());
                };
                if !self
                    .network
                    .reachable(&ORCHESTRATOR_ENDPOINT.to_string(), &node.0)
                {
                    self.trace.push(TraceEvent::Dropped {
                        t: self.now,
                        node: node.0.clone(),
                        tag: cmd.tag,
                    });
                    return Ok(());
                }
                self.accept(i, cmd)
            }
        }
    }

    fn status(&self, i: usize, tag: &str, state: ActionState) -> Result<(), ProvisimError> {
        let s = ActionStatus {
            tag: tag.to_string(),
            state,
        };
        self.put(ActionStatus::key(self.nodes[i].id.as_str()), s.to_value())
    }

    fn reject(
        &mut self,
        i: usize,
        tag: String,
        reason: &str,
        report: bool,
    ) -> Result<(), ProvisimError> {
        if report {
            self.status(i, &tag, ActionState::Rejected)?;
        }
        self.trace.push(TraceEvent::Rejected {
            t: self.now,
            node: self.nodes[i].id.0.clone(),
            tag,
            reason: reason.to_string(),
        });
        Ok(())
    }

    fn accept(&mut self, i: usize, cmd: ActionCommand) -> Result<(), ProvisimError> {
        let Work::Node { action, image, .. } = cmd.work else {
            unreachable!("node work only")
        };
        if !self.seen_tags.insert(cmd.tag.clone()) {
            return Ok(());
        }
        let current = self.store.lease_epoch(&KeyRange::namespace(ORCH_NS));
        if tag_epoch(&cmd.tag).is_none_or(|e| e < current) {
            return self.reject(i, cmd.tag, "stale epoch", false);
        }
        if self.running[i].is_some() {
            return self.reject(i, cmd.tag, "busy", true);
        }
        let Some(edge) = self.graph.edge(self.phases[i], action.as_str()).cloned() else {
            let reason = format!("no {action} from {}", self.phases[i]);
            return self.reject(i, cmd.tag, &reason, true);
        };
        if crate::orchestrator::is_workload_action(action.as_str()) {
            return self.reject(i, cmd.tag, "workload action", true);
        }
        let node = self.nodes[i].id.0.clone();
        if POWER_ACTIONS.contains(&action.as_str()) && self.bmc_off.contains(&i) {
            self.status(i, &cmd.tag, ActionState::Failed)?;
            self.trace.push(TraceEvent::Done {
                t: self.now,
                node,
                action: action.0,
                tag: cmd.tag,
                ok: false,
            });
            return Ok(());
        }
        self.accepted += 1;
        self.status(i, &cmd.tag, ActionState::Accepted)?;
        self.trace.push(TraceEvent::Exec {
            t: self.now,
            node: node.clone(),
            action: action.0.clone(),
            tag: cmd.tag.clone(),
        });
        let jitter = Digest::of_parts([
            &self.scenario.seed.to_le_bytes()[..],
            node.as_bytes(),
            action.0.as_bytes(),
            &self.accepted.to_le_bytes(),
        ])
        .0 % (self.scenario.jitter + 1);
        let factor = self
            .slow
            .values()
            .filter(|(_, nodes)| nodes.is_empty() || nodes.contains(&i))
            .map(|(f, _)| *f)
            .max()
            .unwrap_or(1);
        let duration = (edge.duration + jitter).max(1) * factor;
        self.running[i] = Some(Running {
            tag: cmd.tag.clone(),
            action: action.0,
            to: edge.to,
            failure: edge.failure,
            image,
        });
        self.schedule(
            self.now + duration,
            Payload::Complete {
                node: i,
                tag: cmd.tag,
            },
        );
        Ok(())
    }

    fn complete(&mut self, i: usize, tag: &str) -> Result<(), ProvisimError> {
        if self.running[i].as_ref().is_none_or(|r| r.tag != tag) {
            return Ok(());
        }
        let r = self.running[i].take().expect("checked above");
        let ok = match r.action.as_str() {
            "discover" => match self.wiring.discover(&self.nodes[i]) {
                Ok(_) => {
                    self.write_location(i)?;
                    true
                }
                Err(e) => {
                    log::debug!("{e}");
                    false
                }
            },
            "net_boot" => {
                let prefix = self
                    .scenario
                    .fleet
                    .router_advertisements
                    .then_some(self.scenario.fleet.prefix);
                match assign_address(&self.nodes[i], self.scenario.fleet.address_mode, prefix) {
                    Ok(a) => {
                        self.put(
                            StateKey::node(self.nodes[i].id.as_str(), "address"),
                            Value::str(a.to_string()),
                        )?;
                        true
                    }
                    Err(e) => {
                        log::debug!("{e}");
                        false
                    }
                }
            }
            "load_minimal_os" => self.load_os(i, r.image)?,
            "power_on" | "power_off" | "power_cycle" | "reboot" => {
                self.measured[i] = None;
                self.nodes[i].running = None;
                self.nodes[i].boot_cursor = 0;
                let cleanup = StateKey::node(self.nodes[i].id.as_str(), "needs_cleanup");
                if self.store.value(&cleanup, Kind::Fact) == Some(Value::Bool(true)) {
                    self.put(cleanup, Value::Bool(false))?;
                }
                true
            }
            _ => true,
        };
        let to = if ok { r.to } else { r.failure };
        self.set_phase(i, to, &r.action)?;
        self.status(
            i,
            tag,
            if ok {
                ActionState::Done
            } else {
                ActionState::Failed
            },
        )?;
        self.trace.push(TraceEvent::Done {
            t: self.now,
            node: self.nodes[i].id.0.clone(),
            action: r.action,
            tag: tag.to_string(),
            ok,
        });
        Ok(())
    }

    fn write_location(&mut self, i: usize) -> Result<(), ProvisimError> {
        let n = &self.nodes[i];
        let id = derive_identity(n.location, self.scenario.fleet.prefix);
        let key = |p: &str| StateKey::node(n.id.as_str(), p);
        self.put(key("chassis"), Value::Int(n.location.chassis as i64))?;
        self.put(key("port"), Value::Int(n.location.port as i64))?;
        self.put(key("hostname"), Value::str(id.hostname))?;
        Ok(())
    }

    fn load_os(&mut self, i: usize, image: Option<Digest>) -> Result<bool, ProvisimError> {
        let id = self.nodes[i].id.clone();
        let image = image.or_else(|| {
            self.store
                .value(&StateKey::node(id.as_str(), "image"), Kind::Desire)
                .and_then(|v| v.as_digest())
        });
        let Some(manifest) = image.and_then(|d| self.manifests.get(&d)).cloned() else {
            log::warn!("{id}: no known image to load");
            return Ok(false);
        };
        let n = &self.nodes[i];
        let identity = derive_identity(n.location, self.scenario.fleet.prefix);
        let params = BootParams::default()
            .with("hostname", identity.hostname)
            .with("image", manifest.name.clone())
            .with("root", if manifest.read_only_root { "ro" } else { "rw" })
            .with("overlay", if manifest.overlay { "memory" } else { "none" });
        let env = BootEnv {
            memory: n.memory,
            staged: Some(&n.staged),
            tampered: Some(&n.tampered),
            metadata_bytes: self.scenario.transfer.metadata_bytes,
            start: self.now,
            stage_ticks: 1,
            bytes_per_tick: self.scenario.transfer.bytes_per_tick,
        };
        let result = boot_node(
            &id,
            self.phases[i],
            &manifest,
            self.scenario.transfer.mode,
            &params,
            &self.scenario.reads,
            &env,
        );
        let (trace, ok) = match result {
            Ok(t) => (t, true),
            Err(ProvisimError::DigestMismatch { trace, .. }) => (*trace, false),
            Err(
                e @ (ProvisimError::InsufficientMemory { .. } | ProvisimError::InvalidPhase { .. }),
            ) => {
                log::warn!("{e}");
                return Ok(false);
            }
            Err(e) => return Err(e),
        };
        self.bytes_transferred += trace.bytes_transferred;
        self.trace.push(TraceEvent::Boot {
            t: self.now,
            node: id.0.clone(),
            image: manifest.id,
            bytes: trace.bytes_transferred,
            mode: trace.mode,
            failed_layer: trace.failed_layer(),
        });
        self.measured[i] = Some((manifest.id, trace.measured.clone()));
        self.nodes[i].boot_cursor = trace.stages.len();
        self.boots.push(trace);
        if ok {
            self.nodes[i].running = self.measured[i].clone();
            self.put(
                StateKey::node(id.as_str(), "image"),
                Value::Digest(manifest.id),
            )?;
            self.replicate_image(i, manifest.id);
        } else {
            self.attest_index(i)?;
        }
        Ok(ok)
    }

    fn replicate_image(&mut self, i: usize, image: Digest) {
        if self.replicas.is_empty() {
            return;
        }
        let r = i % self.replicas.len();
        let key = StateKey::node(self.nodes[i].id.as_str(), "image");
        self.replicas[r].write(key, Kind::Fact, Value::Digest(image), self.prov.clone());
    }

    fn set_phase(&mut self, i: usize, to: NodePhase, action: &str) -> Result<(), ProvisimError> {
        let from = self.phases[i];
        if from == to {
            return Ok(());
        }
        *self.phase_counts.get_mut(&from).expect("counted") -= 1;
        *self.phase_counts.entry(to).or_insert(0) += 1;
        self.phases[i] = to;
        self.put(
            StateKey::node(self.nodes[i].id.as_str(), "phase"),
            Value::str(to.as_str()),
        )?;
        self.trace.push(TraceEvent::Phase {
            t: self.now,
            node: self.nodes[i].id.0.clone(),
            from: from.as_str().to_string(),
            to: to.as_str().to_string(),
            action: action.to_string(),
        });
        Ok(())
    }

    /// Measures `node` against the image it booted. A failed verdict
    /// quarantines the node through the emergency path.
    pub fn attest(&mut self, node: &str) -> Result<AttestationReport, ProvisimError> {
        let i = self.node_index(node)?;
        self.attest_index(i)
    }

    fn attest_index(&mut self, i: usize) -> Result<AttestationReport, ProvisimError> {
        let id = self.nodes[i].id.clone();
        let Some((image, measured)) = &self.measured[i] else {
            return Err(ProvisimError::NotBooted(id));
        };
        let manifest = &self.manifests[image];
        let report = attest(&id, measured, manifest);
        self.trace.push(TraceEvent::Attest {
            t: self.now,
            node: id.0.clone(),
            verdict: report.verdict.clone(),
        });
        if let Verdict::Fail { layer } = report.verdict {
            remediate(
                &self.store,
                &EmergencyEvent::Quarantine {
                    node: id,
                    reason: format!("attestation failed at layer {layer}"),
                },
            )?;
        }
        self.attestations.push(report.clone());
        Ok(report)
    }

    /// Places `artifact` in the node's BMC-shared storage. Staged layers are
    /// not fetched over the node network at boot.
    pub fn stage_artifact_oob(
        &mut self,
        node: &str,
        artifact: Digest,
    ) -> Result<(), ProvisimError> {
        let i = self.node_index(node)?;
        if self.bmc_off.contains(&i) {
            return Err(ProvisimError::BmcUnreachable(self.nodes[i].id.clone()));
        }
        self.nodes[i].staged.insert(artifact);
        self.trace.push(TraceEvent::Staged {
            t: self.now,
            node: node.to_string(),
            artifact,
        });
        Ok(())
    }

    /// A principal on the node asks for the staging channel's credentials.
    /// The staging channel is one-way, so this is always refused.
    pub fn node_read_staging_credentials(&mut self, node: &str) -> Result<(), ProvisimError> {
        let i = self.node_index(node)?;
        self.trace.push(TraceEvent::CredentialRead {
            t: self.now,
            node: node.to_string(),
            granted: false,
        });
        Err(ProvisimError::AccessDenied {
            node: self.nodes[i].id.clone(),
            what: "staging credentials".into(),
        })
    }

    fn fault_start(&mut self, id: usize) -> Result<(), ProvisimError> {
        let spec = self.faults[id].clone();
        self.trace.push(TraceEvent::Fault {
            t: self.now,
            fault: spec.kind.clone(),
            active: true,
        });
        match &spec.kind {
            FaultKind::Crash { node } => {
                let i = self.node_index(node)?;
                if let Some(edge) = self.graph.edge(self.phases[i], "crash").cloned() {
                    if let Some(r) = self.running[i].take() {
                        self.status(i, &r.tag, ActionState::Failed)?;
                    }
                    self.measured[i] = None;
                    self.nodes[i].running = None;
                    self.set_phase(i, edge.to, "crash")?;
                }
            }
            FaultKind::Partition { groups } => self.network.partition(groups.clone()),
            FaultKind::SlowLink { factor, nodes } => {
                let set = nodes.iter().map(|n| self.index[n]).collect();
                self.slow.insert(id, (*factor, set));
            }
            FaultKind::CorruptLayer { node, layer } => {
                let i = self.node_index(node)?;
                let d = Digest::of_parts([
                    b"tampered".as_slice(),
                    node.as_bytes(),
                    &layer.to_le_bytes(),
                ]);
                self.nodes[i].tampered.insert(*layer, d);
                let hit = match &mut self.measured[i] {
                    Some((_, m)) if *layer < m.len() => {
                        m[*layer] = d;
                        true
                    }
                    _ => false,
                };
                if hit {
                    self.attest_index(i)?;
                }
            }
            FaultKind::LldpOff { switch } => self.wiring.set_lldp(*switch, false),
            FaultKind::BmcOff { node } => {
                let i = self.node_index(node)?;
                self.bmc_off.insert(i);
            }
        }
        let permanent = matches!(
            spec.kind,
            FaultKind::Crash { .. } | FaultKind::CorruptLayer { .. }
        );
        if let (false, Some(d)) = (permanent, spec.duration) {
            self.schedule(self.now + d, Payload::FaultEnd(id));
        }
        Ok(())
    }

    fn fault_end(&mut self, id: usize) {
        let kind = self.faults[id].kind.clone();
        match &kind {
            FaultKind::Partition { .. } => self.network.heal(),
            FaultKind::SlowLink { .. } => {
                self.slow.remove(&id);
            }
            FaultKind::LldpOff { switch } => self.wiring.set_lldp(*switch, true),
            FaultKind::BmcOff { node } => {
                self.bmc_off.remove(&self.index[node]);
            }
            FaultKind::Crash { .. } | FaultKind::CorruptLayer { .. } => {}
        }
        self.trace.push(TraceEvent::Fault {
            t: self.now,
            fault: kind,
            active: false,
        });
    }

    fn job_start(&mut self, i: usize, duration: u64) -> Result<(), ProvisimError> {
        if self.phases[i] != NodePhase::ServicesReady || self.running[i].is_some() {
            log::debug!("{}: job skipped in {}", self.nodes[i].id, self.phases[i]);
            return Ok(());
        }
        self.set_phase(i, NodePhase::JobRunning, "start_job")?;
        self.trace.push(TraceEvent::Job {
            t: self.now,
            node: self.nodes[i].id.0.clone(),
            started: true,
        });
        self.schedule(self.now + duration.max(1), Payload::JobEnd { node: i });
        Ok(())
    }

    fn job_end(&mut self, i: usize) -> Result<(), ProvisimError> {
        if self.running[i].is_some() {
            self.schedule(self.now + 1, Payload::JobEnd { node: i });
            return Ok(());
        }
        let action = match self.phases[i] {
            NodePhase::JobRunning => "finish_job",
            NodePhase::Draining => "drain_complete",
            _ => return Ok(()),
        };
        self.set_phase(i, NodePhase::ServicesReady, action)?;
        self.put(
            StateKey::node(self.nodes[i].id.as_str(), "needs_cleanup"),
            Value::Bool(true),
        )?;
        self.trace.push(TraceEvent::Job {
            t: self.now,
            node: self.nodes[i].id.0.clone(),
            started: false,
        });
        Ok(())
    }

    /// Every replica gossips with one uniformly chosen live peer.
    fn gossip(&mut self) {
        let n = self.replicas.len();
        if n < 2 {
            return;
        }
        for a in 0..n {
            let peers: Vec<usize> = (0..n)
                .filter(|&b| b != a && self.network.is_up(&self.replicas[b].id))
                .collect();
            let Some(&b) = peers.choose(&mut self.rng) else {
                continue;
            };
            let (x, y) = if a < b {
                let (l, r) = self.replicas.split_at_mut(b);
                (&mut l[a], &mut r[0])
            } else {
                let (l, r) = self.replicas.split_at_mut(a);
                (&mut r[0], &mut l[b])
            };
            let result = gossip_round(x, y, &self.network);
            self.trace.push(TraceEvent::Gossip {
                t: self.now,
                from: x.id.clone(),
                to: y.id.clone(),
                ok: result.is_ok(),
                deltas: result.map_or(0, |s| s.deltas()),
            });
        }
    }

    /// Runs a startup or shutdown sequence over node groups, advancing the
    /// simulation while it waits for each group.
    pub fn run_sequence(
        &mut self,
        task_id: &str,
        dag: &DependencyDag,
        direction: Direction,
        options: SequenceOptions,
    ) -> Result<SequenceReport, OrchestratorError> {
        let checkpoints = self.checkpoints.clone();
        let mut exec = SimExecutor { sim: self };
        run_sequence(task_id, dag, direction, &mut exec, options, &*checkpoints)
    }
}

struct SimExecutor<'a> {
    sim: &'a mut FleetSim,
}

impl SimExecutor<'_> {
    fn set(&mut self, vertex: &Vertex, phase: NodePhase) -> Result<(), String> {
        for n in &vertex.nodes {
            if !self.sim.index.contains_key(n.as_str()) {
                return Err(format!("unknown node {n}"));
            }
        }
        for n in &vertex.nodes {
            self.sim.put_desire(
                StateKey::node(n.as_str(), "phase"),
                Value::str(phase.as_str()),
                &format!("sequence:{}", vertex.name),
            );
        }
        Ok(())
    }
}

impl VertexExecutor for SimExecutor<'_> {
    fn start(&mut self, vertex: &Vertex) -> Result<(), String> {
        self.set(vertex, NodePhase::ServicesReady)
    }

    fn stop(&mut self, vertex: &Vertex) -> Result<(), String> {
        self.set(vertex, NodePhase::PoweredOff)
    }

    fn ready(&mut self, vertex: &Vertex, direction: Direction) -> bool {
        let at_target = |sim: &FleetSim| {
            vertex.nodes.iter().all(|n| {
                let p = phase_of(&sim.store, n.as_str());
                match direction {
                    Direction::Startup => p.is_some_and(NodePhase::is_available),
                    Direction::Shutdown => p == Some(NodePhase::PoweredOff),
                }
            })
        };
        match self.sim.run_until(PROBE_TICKS, at_target) {
            Ok(ready) => ready,
            Err(e) => {
                log::warn!("sequence probe of {}: {e}", vertex.name);
                false
            }
        }
    }
}
