use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EndpointSet, GatewayError, Request, Response};
use crate::digest::Digest;

/// What came back from one endpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum Reply {
    Response(Response),
    /// The server said it cannot serve the request.
    Unavailable,
}

pub trait Transport {
    /// Sends `request` to `endpoint`. Returns the reply and how long it
    /// took, or `None` when nothing arrived within `deadline`.
    fn send(
        &mut self,
        endpoint: &str,
        request: &Request,
        deadline: Duration,
    ) -> Option<(Reply, Duration)>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "order", rename_all = "snake_case")]
pub enum Rotation {
    /// Endpoints in published order.
    Listed,
    /// Published order, starting at a position derived from `key`, so that
    /// different clients spread over different endpoints.
    Hashed { key: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailoverPolicy {
    pub max_attempts: usize,
    pub attempt_deadline: Duration,
    pub rotation: Rotation,
}

impl Default for FailoverPolicy {
    fn default() -> Self {
        FailoverPolicy {
            max_attempts: 3,
            attempt_deadline: Duration::from_secs(5),
            rotation: Rotation::Listed,
        }
    }
}

impl FailoverPolicy {
    /// Endpoints in the order attempts visit them, wrapping around.
    pub fn order<'a>(&self, endpoints: &'a EndpointSet) -> impl Iterator<Item = &'a str> + 'a {
        let n = endpoints.endpoints.len();
        let start = match &self.rotation {
            Rotation::Listed => 0,
            Rotation::Hashed { key } if n > 0 => (Digest::of(key.as_bytes()).0 % n as u64) as usize,
            Rotation::Hashed { .. } => 0,
        };
        (0..self.max_attempts).map(move |i| endpoints.endpoints[(start + i) % n].as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Ok,
    Unavailable,
    /// No reply; the attempt used up its deadline.
    Silent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub endpoint: String,
    pub signal: Signal,
    pub elapsed: Duration,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptLog(pub Vec<Attempt>);

impl AttemptLog {
    pub fn total(&self) -> Duration {
        self.0.iter().map(|a| a.elapsed).sum()
    }

    /// Attempts that ended by waiting out their deadline.
    pub fn timeout_waits(&self) -> usize {
        self.0.iter().filter(|a| a.signal == Signal::Silent).count()
    }

    pub fn per_endpoint(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for a in &self.0 {
            *m.entry(a.endpoint.as_str()).or_insert(0) += 1;
        }
        m
    }
}

/// Sends `request` to the endpoints in policy order until one answers. An
/// unavailable reply moves on at once; only silence costs the deadline.
pub fn call_with_failover<T: Transport + ?Sized>(
    request: &Request,
    endpoints: &EndpointSet,
    policy: &FailoverPolicy,
    transport: &mut T,
) -> Result<(Response, AttemptLog), GatewayError> {
    if endpoints.endpoints.is_empty() {
        return Err(GatewayError::NoEndpoints(endpoints.cluster.clone()));
    }
    let mut log = AttemptLog::default();
    for endpoint in policy.order(endpoints) {
        let (signal, elapsed, response) =
            match transport.send(endpoint, request, policy.attempt_deadline) {
                Some((Reply::Response(r), rtt)) => (Signal::Ok, rtt, Some(r)),
                Some((Reply::Unavailable, rtt)) => (Signal::Unavailable, rtt, None),
                None => (Signal::Silent, policy.attempt_deadline, None),
            };
        log.0.push(Attempt {
            endpoint: endpoint.to_string(),
            signal,
            elapsed,
        });
        if let Some(r) = response {
            return Ok((r, log));
        }
    }
    Err(GatewayError::AllEndpointsFailed(log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EndpointState {
    Up,
    /// Answers every request with an explicit unavailable signal.
    Draining,
    /// Never answers.
    Dead,
}

/// In-memory transport with a fixed simulated round trip.
#[derive(Clone, Debug)]
pub struct SimTransport {
    pub rtt: Duration,
    pub states: BTreeMap<String, EndpointState>,
    pub delivered: Vec<String>,
}

impl SimTransport {
    pub fn new(rtt: Duration) -> Self {
        SimTransport {
            rtt,
            states: BTreeMap::new(),
            delivered: Vec::new(),
        }
    }

    pub fn set(&mut self, endpoint: &str, state: EndpointState) {
        self.states.insert(endpoint.to_string(), state);
    }
}

impl Transport for SimTransport {
    fn send(
        &mut self,
        endpoint: &str,
        request: &Request,
        _deadline: Duration,
    ) -> Option<(Reply, Duration)> {
        match self
            .states
            .get(endpoint)
            .copied()
            .unwrap_or(EndpointState::Dead)
        {
            EndpointState::Up => {
                self.delivered.push(endpoint.to_string());
                let body = serde_json::json!({ "served_by": endpoint, "path": request.path });
                Some((Reply::Response(Response::json(200, body)), self.rtt))
            }
            EndpointState::Draining => Some((Reply::Unavailable, self.rtt)),
            EndpointState::Dead => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(n: usize) -> EndpointSet {
        EndpointSet {
            cluster: "c".into(),
            endpoints: (0..n).map(|i| format!("e{i}")).collect(),
        }
    }

    fn req() -> Request {
        Request::get("/v1/metrics")
    }

    #[test]
    fn unavailable_then_success() {
        let mut t = SimTransport::new(Duration::from_millis(2));
        t.set("e0", EndpointState::Draining);
        t.set("e1", EndpointState::Up);
        let (_, log) =
            call_with_failover(&req(), &set(2), &FailoverPolicy::default(), &mut t).unwrap();
        assert_eq!(log.0.len(), 2);
        assert_eq!(log.timeout_waits(), 0);
        assert_eq!(log.total(), Duration::from_millis(4));
    }

    #[test]
    fn first_success_is_one_attempt() {
        let mut t = SimTransport::new(Duration::from_millis(2));
        t.set("e0", EndpointState::Up);
        let (_, log) =
            call_with_failover(&req(), &set(3), &FailoverPolicy::default(), &mut t).unwrap();
        assert_eq!(log.0.len(), 1);
    }

    #[test]
    fn all_unavailable_fails_with_full_log() {
        let mut t = SimTransport::new(Duration::from_millis(2));
        for i in 0..3 {
            t.set(&format!("e{i}"), EndpointState::Draining);
        }
        match call_with_failover(&req(), &set(3), &FailoverPolicy::default(), &mut t) {
            Err(GatewayError::AllEndpointsFailed(log)) => {
                assert_eq!(log.0.len(), 3);
                assert!(log.0.iter().all(|a| a.signal == Signal::Unavailable));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn silence_costs_the_deadline() {
        let mut t = SimTransport::new(Duration::from_millis(2));
        t.set("e1", EndpointState::Up);
        let policy = FailoverPolicy {
            attempt_deadline: Duration::from_millis(500),
            ..FailoverPolicy::default()
        };
        let (_, log) = call_with_failover(&req(), &set(2), &policy, &mut t).unwrap();
        assert_eq!(log.timeout_waits(), 1);
        assert_eq!(log.0[0].elapsed, Duration::from_millis(500));
    }

    #[test]
    fn rotation_is_deterministic_and_wraps() {
        let s = set(3);
        let p = FailoverPolicy {
            max_attempts: 5,
            rotation: Rotation::Hashed {
                key: "client-7".into(),
            },
            ..FailoverPolicy::default()
        };
        let a: Vec<&str> = p.order(&s).collect();
        assert_eq!(a, p.order(&s).collect::<Vec<_>>());
        assert_eq!(a.len(), 5);
        assert_eq!(a[0], a[3]);
        assert!(matches!(
            call_with_failover(&req(), &set(0), &p, &mut SimTransport::new(Duration::ZERO)),
            Err(GatewayError::NoEndpoints(_))
        ));
    }
}
