use std::time::{Duration, Instant};

use serde_json::Value as JsonValue;

use super::failover::{call_with_failover, AttemptLog, FailoverPolicy, Reply, Transport};
use super::{Command, EndpointSet, GatewayError, Request, Response, FAILOVER_HEADER};

/// Plain HTTP transport. A refused connection counts as an explicit
/// unavailable signal, like a 503 carrying the failover header.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport {
            agent: ureq::AgentBuilder::new().build(),
        }
    }
}

impl HttpTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

fn url(endpoint: &str, path: &str) -> String {
    if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
        format!("{}{path}", endpoint.trim_end_matches('/'))
    } else {
        format!("http://{endpoint}{path}")
    }
}

fn into_response(status: u16, r: ureq::Response) -> Response {
    let failover = r
        .header(FAILOVER_HEADER)
        .is_some_and(|v| v.eq_ignore_ascii_case("true"));
    let body = r.into_json::<JsonValue>().unwrap_or(JsonValue::Null);
    Response {
        status,
        body,
        failover,
    }
}

impl Transport for HttpTransport {
    fn send(
        &mut self,
        endpoint: &str,
        request: &Request,
        deadline: Duration,
    ) -> Option<(Reply, Duration)> {
        let started = Instant::now();
        let call = self
            .agent
            .request(request.method.as_str(), &url(endpoint, &request.path))
            .timeout(deadline);
        let result = match &request.body {
            Some(b) => call.send_json(b),
            None => call.call(),
        };
        let reply = match result {
            Ok(r) => Reply::Response(into_response(r.status(), r)),
            Err(ureq::Error::Status(status, r)) => {
                let resp = into_response(status, r);
                if status == 503 && resp.failover {
                    Reply::Unavailable
                } else {
                    Reply::Response(resp)
                }
            }
            Err(ureq::Error::Transport(t)) if t.kind() == ureq::ErrorKind::ConnectionFailed => {
                Reply::Unavailable
            }
            Err(e) => {
                log::debug!("{endpoint}: {e}");
                return None;
            }
        };
        Some((reply, started.elapsed()))
    }
}

/// Finds the gateway replicas of a cluster through the store and sends
/// requests to them with failover.
pub struct GatewayClient<T: Transport = HttpTransport> {
    cluster: String,
    seeds: Vec<String>,
    endpoints: EndpointSet,
    policy: FailoverPolicy,
    transport: T,
}

impl<T: Transport> GatewayClient<T> {
    /// Starts with `seeds` as the endpoint set until discovery replaces it.
    pub fn new(cluster: &str, seeds: Vec<String>, policy: FailoverPolicy, transport: T) -> Self {
        GatewayClient {
            cluster: cluster.to_string(),
            endpoints: EndpointSet {
                cluster: cluster.to_string(),
                endpoints: seeds.clone(),
            },
            seeds,
            policy,
            transport,
        }
    }

    pub fn endpoints(&self) -> &EndpointSet {
        &self.endpoints
    }

    pub fn policy(&self) -> &FailoverPolicy {
        &self.policy
    }

    /// Reads the published endpoint set through any reachable replica.
    pub fn discover(&mut self) -> Result<&EndpointSet, GatewayError> {
        let mut candidates = self.endpoints.clone();
        for s in &self.seeds {
            if !candidates.endpoints.contains(s) {
                candidates.endpoints.push(s.clone());
            }
        }
        let key = EndpointSet::key(&self.cluster)?;
        let request = Request::get(format!(
            "/v1/facts/{}/{}/{}?mode=local",
            key.namespace(),
            key.entity(),
            key.property()
        ));
        let policy = FailoverPolicy {
            max_attempts: candidates.endpoints.len(),
            ..self.policy.clone()
        };
        let (response, _) =
            call_with_failover(&request, &candidates, &policy, &mut self.transport)?;
        if !response.is_success() {
            return Err(GatewayError::Discovery(format!(
                "status {}: {}",
                response.status, response.body
            )));
        }
        let value = serde_json::from_value(response.body["value"].clone())
            .map_err(|e| GatewayError::Discovery(e.to_string()))?;
        let set = EndpointSet::from_value(&self.cluster, &value)?;
        if !set.endpoints.is_empty() {
            self.endpoints = set;
        }
        Ok(&self.endpoints)
    }

    /// Sends `request`; when every endpoint fails, refreshes the endpoint
    /// set once and retries if it changed.
    pub fn send(&mut self, request: &Request) -> Result<(Response, AttemptLog), GatewayError> {
        match call_with_failover(request, &self.endpoints, &self.policy, &mut self.transport) {
            Err(GatewayError::AllEndpointsFailed(mut log)) => {
                let before = self.endpoints.clone();
                if self.discover().is_err() || self.endpoints == before {
                    return Err(GatewayError::AllEndpointsFailed(log));
                }
                let (r, more) =
                    call_with_failover(request, &self.endpoints, &self.policy, &mut self.transport)
                        .map_err(|e| match e {
                            GatewayError::AllEndpointsFailed(more) => {
                                log.0.extend(more.0.clone());
                                GatewayError::AllEndpointsFailed(log.clone())
                            }
                            e => e,
                        })?;
                log.0.extend(more.0);
                Ok((r, log))
            }
            other => other,
        }
    }

    pub fn execute(&mut self, command: &Command) -> Result<(Response, AttemptLog), GatewayError> {
        let request = command.to_request()?;
        self.send(&request)
    }
}
