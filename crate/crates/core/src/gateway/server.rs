use std::collections::BTreeSet;
use std::io;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use parking_lot::Mutex;
use serde::Serialize;
use serde_json::{json, Value as JsonValue};

use super::{EndpointSet, GatewayError, Method, Request, Response, FAILOVER_HEADER};
use crate::configlayers::{ConfigError, ConfigLayer};
use crate::digest::Digest;
use crate::metrics::{Metrics, RequestOutcome};
use crate::orchestrator::{
    remediate, DependencyDag, Direction, EmergencyEvent, FlowDefinition, OrchestratorError,
    SequenceOptions,
};
use crate::provisim::{FaultSpec, FleetSim, ProvisimError, Scenario};
use crate::statestore::{
    Consistency, KeyRange, Kind, Principal, ReadMode, RenderId, StateKey, StateStore, StoreError,
    Value,
};

pub const GATEWAY_PRINCIPAL: &str = "gateway";

/// Request types the gateway meters, one per route.
pub const REQUEST_TYPES: &[&str] = &[
    "get_fact",
    "put_desires",
    "get_diff",
    "rollout",
    "sequence",
    "remediate",
    "flows",
    "metrics",
    "sim_fault",
    "sim_run",
    "attest",
    "unknown",
];

const DEFAULT_ROLLOUT_TICKS: u64 = 1_000_000;

struct ApiError {
    status: u16,
    body: JsonValue,
    failover: bool,
}

impl ApiError {
    fn new(status: u16, message: impl ToString) -> Self {
        ApiError {
            status,
            body: json!({ "error": message.to_string() }),
            failover: false,
        }
    }

    fn bad_request(message: impl ToString) -> Self {
        Self::new(400, message)
    }

    fn unavailable(message: impl ToString) -> Self {
        ApiError {
            failover: true,
            ..Self::new(503, message)
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound { .. } => 404,
            StoreError::StaleVersion { .. }
            | StoreError::VersionGap { .. }
            | StoreError::ConsistencyMismatch(_) => 409,
            StoreError::NotOwner { .. } | StoreError::Lease(_) => 403,
            StoreError::CrossStoreQuery(_) => 400,
        };
        ApiError::new(status, e)
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Store(e) => e.into(),
            OrchestratorError::LeaseLost | OrchestratorError::LeaseHeld(_) => {
                ApiError::unavailable(e)
            }
            OrchestratorError::DuplicateName(_) => ApiError::new(409, e),
            OrchestratorError::ReadinessFailed {
                ref vertex,
                ref report,
            } => ApiError {
                status: 409,
                body: json!({ "error": e.to_string(), "vertex": vertex, "report": report }),
                failover: false,
            },
            OrchestratorError::Codec(_) | OrchestratorError::Io(_) => ApiError::new(500, e),
            _ => ApiError::bad_request(e),
        }
    }
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::UnknownImage(_) => ApiError::new(404, e),
            ConfigError::AmbiguousPrecedence { .. } => ApiError::new(409, e),
            ConfigError::Codec(_) => ApiError::new(500, e),
            _ => ApiError::bad_request(e),
        }
    }
}

impl From<ProvisimError> for ApiError {
    fn from(e: ProvisimError) -> Self {
        match e {
            ProvisimError::Orchestrator(e) => e.into(),
            ProvisimError::Store(e) => e.into(),
            ProvisimError::Config(e) => e.into(),
            ProvisimError::OrchestratorDown => ApiError::unavailable(e),
            ProvisimError::UnknownNode(_)
            | ProvisimError::UnknownSwitch(_)
            | ProvisimError::UnknownImage(_) => ApiError::new(404, e),
            ProvisimError::Scenario(_) | ProvisimError::Toml(_) | ProvisimError::Graph(_) => {
                ApiError::bad_request(e)
            }
            ProvisimError::AccessDenied { .. } => ApiError::new(403, e),
            ProvisimError::Timeout { .. } => ApiError::new(504, e),
            ProvisimError::Io(_) => ApiError::new(500, e),
            _ => ApiError::new(409, e),
        }
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Store(e) => e.into(),
            _ => ApiError::bad_request(e),
        }
    }
}

type ApiResult = Result<JsonValue, ApiError>;

fn to_json<T: Serialize>(v: &T) -> JsonValue {
    serde_json::to_value(v).expect("response types serialize")
}

fn field<'a>(body: &'a JsonValue, name: &str) -> Result<&'a JsonValue, ApiError> {
    body.get(name)
        .filter(|v| !v.is_null())
        .ok_or_else(|| ApiError::bad_request(format!("missing field {name:?}")))
}

fn str_field<'a>(body: &'a JsonValue, name: &str) -> Result<&'a str, ApiError> {
    field(body, name)?
        .as_str()
        .ok_or_else(|| ApiError::bad_request(format!("field {name:?} must be a string")))
}

fn opt_u64(body: &JsonValue, name: &str) -> Result<Option<u64>, ApiError> {
    match body.get(name) {
        None | Some(JsonValue::Null) => Ok(None),
        Some(v) => v.as_u64().map(Some).ok_or_else(|| {
            ApiError::bad_request(format!("field {name:?} must be a non-negative integer"))
        }),
    }
}

fn classify(method: Option<Method>, segs: &[&str]) -> &'static str {
    use Method::*;
    match (method, segs) {
        (Some(Get), ["v1", "facts", _, _, _]) => "get_fact",
        (Some(Put), ["v1", "desires"]) => "put_desires",
        (Some(Get), ["v1", "diff", _]) => "get_diff",
        (Some(Post), ["v1", "orchestrate", "rollout"]) => "rollout",
        (Some(Post), ["v1", "orchestrate", "sequence"]) => "sequence",
        (Some(Post), ["v1", "remediate"]) => "remediate",
        (Some(Post), ["v1", "flows"]) => "flows",
        (Some(Get), ["v1", "metrics"]) => "metrics",
        (Some(Post), ["v1", "sim", "fault"]) => "sim_fault",
        (Some(Post), ["v1", "sim", "run"]) => "sim_run",
        (Some(Post), ["v1", "attest", _]) => "attest",
        _ => "unknown",
    }
}

/// State shared by every gateway replica of one cluster: the simulated
/// fleet behind the API, its store and the request metrics.
pub struct GatewayRuntime {
    sim: Mutex<FleetSim>,
    store: Arc<StateStore>,
    metrics: Metrics,
    cluster: String,
    principal: Principal,
    endpoints: Mutex<BTreeSet<String>>,
    sequences: AtomicU64,
}

impl GatewayRuntime {
    /// Takes the gateway namespace lease in the fleet's store and publishes
    /// an empty endpoint set.
    pub fn new(sim: FleetSim, cluster: &str) -> Result<Arc<Self>, GatewayError> {
        let store = sim.store().clone();
        let principal = Principal::new(GATEWAY_PRINCIPAL);
        let range = KeyRange::namespace("gateway");
        let epoch = store.lease_epoch(&range) + 1;
        let holder = store
            .lease_for(&EndpointSet::key(cluster)?)
            .map(|l| l.owner);
        store.transfer_ownership(range, holder.as_ref(), principal.clone(), epoch)?;
        let metrics = Metrics::new();
        for t in REQUEST_TYPES {
            metrics.register(t);
        }
        let rt = Arc::new(GatewayRuntime {
            sim: Mutex::new(sim),
            store,
            metrics,
            cluster: cluster.to_string(),
            principal,
            endpoints: Mutex::new(BTreeSet::new()),
            sequences: AtomicU64::new(0),
        });
        rt.endpoint_set().publish(&rt.store, &rt.principal)?;
        Ok(rt)
    }

    pub fn store(&self) -> &Arc<StateStore> {
        &self.store
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn cluster(&self) -> &str {
        &self.cluster
    }

    pub fn with_sim<R>(&self, f: impl FnOnce(&mut FleetSim) -> R) -> R {
        f(&mut self.sim.lock())
    }

    pub fn endpoint_set(&self) -> EndpointSet {
        EndpointSet {
            cluster: self.cluster.clone(),
            endpoints: self.endpoints.lock().iter().cloned().collect(),
        }
    }

    pub fn register_endpoint(&self, addr: &str) -> Result<(), GatewayError> {
        let mut eps = self.endpoints.lock();
        if eps.insert(addr.to_string()) {
            self.publish(&eps)?;
        }
        Ok(())
    }

    pub fn deregister_endpoint(&self, addr: &str) -> Result<(), GatewayError> {
        let mut eps = self.endpoints.lock();
        if eps.remove(addr) {
            self.publish(&eps)?;
        }
        Ok(())
    }

    fn publish(&self, eps: &BTreeSet<String>) -> Result<(), GatewayError> {
        EndpointSet {
            cluster: self.cluster.clone(),
            endpoints: eps.iter().cloned().collect(),
        }
        .publish(&self.store, &self.principal)
    }

    /// Routes and answers one request, recording it in the metrics.
    pub fn handle(&self, req: &Request) -> Response {
        self.serve(Some(req.method), &req.path, Ok(req.body.clone()), true)
    }

    fn serve(
        &self,
        method: Option<Method>,
        url: &str,
        body: Result<Option<JsonValue>, String>,
        available: bool,
    ) -> Response {
        let (path, query) = url.split_once('?').unwrap_or((url, ""));
        let segs: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
        let request_type = classify(method, &segs);
        let span = self.metrics.begin(request_type);
        let started = Instant::now();
        let result = if !available {
            Err(ApiError::unavailable("gateway replica is not serving"))
        } else {
            body.map_err(ApiError::bad_request).and_then(|b| {
                self.dispatch(request_type, &segs, query, b.unwrap_or(JsonValue::Null))
            })
        };
        let response = match result {
            Ok(body) => Response::json(200, body),
            Err(e) => Response {
                status: e.status,
                body: e.body,
                failover: e.failover,
            },
        };
        let outcome = if response.is_success() {
            RequestOutcome::Success
        } else {
            RequestOutcome::Failure
        };
        let _ = span.finish(started.elapsed().as_secs_f64() * 1e3, outcome);
        response
    }

    fn dispatch(
        &self,
        request_type: &str,
        segs: &[&str],
        query: &str,
        body: JsonValue,
    ) -> ApiResult {
        match request_type {
            "get_fact" => self.get_fact(segs[2], segs[3], segs[4], query),
            "put_desires" => self.put_desires(&body),
            "get_diff" => Ok(to_json(&self.store.diff(segs[2]))),
            "rollout" => self.rollout(&body),
            "sequence" => self.sequence(&body),
            "remediate" => {
                let event = EmergencyEvent::from_json(&body)?;
                Ok(to_json(&remediate(&self.store, &event)?))
            }
            "flows" => {
                let def = FlowDefinition::from_toml(str_field(&body, "flow")?)?;
                let id = self.sim.lock().register_flow(def)?;
                Ok(json!({ "id": id }))
            }
            "metrics" => Ok(to_json(&self.metrics.snapshot_all())),
            "sim_fault" => {
                let fault: FaultSpec =
                    serde_json::from_value(body).map_err(ApiError::bad_request)?;
                let id = self.sim.lock().inject_fault(fault)?;
                Ok(json!({ "id": id }))
            }
            "sim_run" => self.sim_run(&body),
            "attest" => Ok(to_json(&self.sim.lock().attest(segs[2])?)),
            _ => Err(ApiError::new(404, "no such route")),
        }
    }

    fn get_fact(&self, ns: &str, entity: &str, prop: &str, query: &str) -> ApiResult {
        let key = StateKey::new(ns, entity, prop).map_err(ApiError::bad_request)?;
        let mut kind = Kind::Fact;
        let mut mode = match self.store.consistency_of(&key) {
            Consistency::Strong => ReadMode::Strong,
            Consistency::Eventual => ReadMode::Local,
        };
        for pair in query.split('&').filter(|p| !p.is_empty()) {
            match pair.split_once('=').unwrap_or((pair, "")) {
                ("kind", "fact") => kind = Kind::Fact,
                ("kind", "desire") => kind = Kind::Desire,
                ("mode", "strong") => mode = ReadMode::Strong,
                ("mode", "local") => mode = ReadMode::Local,
                _ => {
                    return Err(ApiError::bad_request(format!(
                        "bad query parameter {pair:?}"
                    )))
                }
            }
        }
        Ok(to_json(&self.store.get(&key, kind, mode)?))
    }

    fn put_desires(&self, body: &JsonValue) -> ApiResult {
        if let Some(layer) = body.get("layer") {
            let text = layer
                .as_str()
                .ok_or_else(|| ApiError::bad_request("layer must be a TOML string"))?;
            let layer = ConfigLayer::from_toml(text)?;
            let result = self.sim.lock().apply_layer(layer)?;
            return Ok(json!({ "render": result.id, "written": result.written }));
        }
        let items = field(body, "desires")?
            .as_array()
            .ok_or_else(|| ApiError::bad_request("desires must be a list"))?;
        let mut parsed = Vec::with_capacity(items.len());
        for item in items {
            let key: StateKey = serde_json::from_value(field(item, "key")?.clone())
                .map_err(ApiError::bad_request)?;
            let value: Value = serde_json::from_value(field(item, "value")?.clone())
                .map_err(ApiError::bad_request)?;
            let origin = item
                .get("origin")
                .and_then(|o| o.as_str())
                .unwrap_or("operator");
            parsed.push((key, value, RenderId::new(origin)));
        }
        let written: Vec<_> = parsed
            .into_iter()
            .map(|(k, v, o)| self.store.put_desire(&k, v, o))
            .collect();
        Ok(json!({ "written": written }))
    }

    fn rollout(&self, body: &JsonValue) -> ApiResult {
        let image = str_field(body, "image")?;
        let max_unavailable = opt_u64(body, "max_unavailable")?
            .ok_or_else(|| ApiError::bad_request("missing field \"max_unavailable\""))?;
        if max_unavailable == 0 {
            return Err(ApiError::bad_request("max_unavailable must be at least 1"));
        }
        let ticks = opt_u64(body, "max_ticks")?.unwrap_or(DEFAULT_ROLLOUT_TICKS);
        let mut sim = self.sim.lock();
        let digest = match sim.image_by_name(image) {
            Ok(d) => d,
            Err(e) => match image.parse::<Digest>() {
                Ok(d) if sim.manifest(d).is_some() => d,
                _ => return Err(e.into()),
            },
        };
        Ok(to_json(&sim.rollout(
            digest,
            max_unavailable as usize,
            ticks,
        )?))
    }

    fn sequence(&self, body: &JsonValue) -> ApiResult {
        let dag = DependencyDag::from_toml(str_field(body, "dag")?)?;
        let direction: Direction = str_field(body, "direction")?.parse()?;
        let task_id = match body.get("task_id").and_then(|t| t.as_str()) {
            Some(t) => t.to_string(),
            None => format!(
                "sequence-{}",
                self.sequences.fetch_add(1, Ordering::Relaxed) + 1
            ),
        };
        let report =
            self.sim
                .lock()
                .run_sequence(&task_id, &dag, direction, SequenceOptions::default())?;
        Ok(to_json(&report))
    }

    fn sim_run(&self, body: &JsonValue) -> ApiResult {
        let seed = opt_u64(body, "seed")?;
        let ticks = opt_u64(body, "ticks")?;
        if let Some(text) = body.get("scenario").and_then(|s| s.as_str()) {
            let mut scenario = Scenario::from_toml(text)?;
            if let Some(seed) = seed {
                scenario.seed = seed;
            }
            if let Some(t) = ticks {
                scenario.max_ticks = t;
            }
            let mut sim = FleetSim::new(scenario)?;
            return Ok(to_json(&sim.run()?));
        }
        let mut sim = self.sim.lock();
        match ticks {
            Some(n) => {
                for _ in 0..n {
                    sim.step()?;
                }
                Ok(to_json(&sim.report()))
            }
            None => Ok(to_json(&sim.run()?)),
        }
    }
}

/// One gateway replica listening on its own address.
pub struct GatewayServer {
    addr: String,
    runtime: Arc<GatewayRuntime>,
    server: Arc<tiny_http::Server>,
    available: Arc<AtomicBool>,
    stopping: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl GatewayServer {
    /// Binds `listen` (port 0 picks a free port), starts `threads` workers
    /// and adds the replica to the cluster's endpoint set.
    pub fn start(runtime: Arc<GatewayRuntime>, listen: &str, threads: usize) -> io::Result<Self> {
        let server = Arc::new(tiny_http::Server::http(listen).map_err(io::Error::other)?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("not an IP listener"))?
            .to_string();
        let available = Arc::new(AtomicBool::new(true));
        let stopping = Arc::new(AtomicBool::new(false));
        let workers = (0..threads.max(1))
            .map(|_| {
                let (server, runtime, available, stopping) = (
                    server.clone(),
                    runtime.clone(),
                    available.clone(),
                    stopping.clone(),
                );
                std::thread::spawn(move || loop {
                    match server.recv() {
                        Ok(rq) => serve_http(&runtime, rq, available.load(Ordering::SeqCst)),
                        Err(_) if stopping.load(Ordering::SeqCst) => break,
                        Err(e) => log::warn!("gateway accept: {e}"),
                    }
                })
            })
            .collect();
        runtime.register_endpoint(&addr).map_err(io::Error::other)?;
        log::info!("gateway replica serving {} on {addr}", runtime.cluster());
        Ok(GatewayServer {
            addr,
            runtime,
            server,
            available,
            stopping,
            workers,
        })
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn runtime(&self) -> &Arc<GatewayRuntime> {
        &self.runtime
    }

    pub fn is_available(&self) -> bool {
        self.available.load(Ordering::SeqCst)
    }

    /// An unavailable replica answers every request with 503 and the
    /// failover header, and leaves the endpoint set.
    pub fn set_available(&self, on: bool) -> Result<(), GatewayError> {
        self.available.store(on, Ordering::SeqCst);
        if on {
            self.runtime.register_endpoint(&self.addr)
        } else {
            self.runtime.deregister_endpoint(&self.addr)
        }
    }

    pub fn stop(self) {
        drop(self)
    }
}

impl Drop for GatewayServer {
    fn drop(&mut self) {
        let _ = self.runtime.deregister_endpoint(&self.addr);
        self.stopping.store(true, Ordering::SeqCst);
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn serve_http(runtime: &GatewayRuntime, mut rq: tiny_http::Request, available: bool) {
    let method = match rq.method() {
        tiny_http::Method::Get => Some(Method::Get),
        tiny_http::Method::Put => Some(Method::Put),
        tiny_http::Method::Post => Some(Method::Post),
        _ => None,
    };
    let url = rq.url().to_string();
    let mut raw = Vec::new();
    let body = match rq.as_reader().read_to_end(&mut raw) {
        Err(e) => Err(e.to_string()),
        Ok(_) if raw.iter().all(u8::is_ascii_whitespace) => Ok(None),
        Ok(_) => serde_json::from_slice(&raw)
            .map(Some)
            .map_err(|e| format!("body: {e}")),
    };
    let response = runtime.serve(method, &url, body, available);
    let mut out = tiny_http::Response::from_string(response.body.to_string())
        .with_status_code(response.status)
        .with_header(
            tiny_http::Header::from_bytes("Content-Type", "application/json")
                .expect("static header"),
        );
    if response.failover {
        out.add_header(
            tiny_http::Header::from_bytes(FAILOVER_HEADER, "true").expect("static header"),
        );
    }
    if let Err(e) = rq.respond(out) {
        log::debug!("gateway respond: {e}");
    }
}
