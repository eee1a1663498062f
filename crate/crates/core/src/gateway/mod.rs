//! Service and operator surface.
//!
//! A gateway replica serves the HTTP API over a shared [`GatewayRuntime`]
//! and advertises itself in the cluster's [`EndpointSet`], which is stored
//! as an eventually consistent fact. Clients read the set and fail over
//! between replicas: a replica that cannot serve answers at once with an
//! explicit unavailable signal, so only a silent replica costs a timeout.

mod client;
mod command;
mod failover;
mod server;

use serde::{Deserialize, Serialize};
use serde_json::Value as JsonValue;

pub use client::{GatewayClient, HttpTransport};
pub use command::Command;
pub use failover::{
    call_with_failover, Attempt, AttemptLog, EndpointState, FailoverPolicy, Reply, Rotation,
    Signal, SimTransport, Transport,
};
pub use server::{GatewayRuntime, GatewayServer, GATEWAY_PRINCIPAL, REQUEST_TYPES};

use crate::statestore::{Kind, Principal, ReadMode, StateKey, StateStore, StoreError, Value};

/// Response header that marks a 503 as safe to retry elsewhere.
pub const FAILOVER_HEADER: &str = "X-Failover";

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("cluster {0:?} has no endpoints")]
    NoEndpoints(String),
    #[error("all {} attempts failed", .0 .0.len())]
    AllEndpointsFailed(AttemptLog),
    #[error("validation: {0}")]
    Validation(String),
    #[error("endpoint discovery: {0}")]
    Discovery(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Put,
    Post,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Put => "PUT",
            Method::Post => "POST",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub method: Method,
    /// Path and optional query string.
    pub path: String,
    pub body: Option<JsonValue>,
}

impl Request {
    pub fn get(path: impl Into<String>) -> Self {
        Request {
            method: Method::Get,
            path: path.into(),
            body: None,
        }
    }

    pub fn post(path: impl Into<String>, body: JsonValue) -> Self {
        Request {
            method: Method::Post,
            path: path.into(),
            body: Some(body),
        }
    }

    pub fn put(path: impl Into<String>, body: JsonValue) -> Self {
        Request {
            method: Method::Put,
            path: path.into(),
            body: Some(body),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub status: u16,
    pub body: JsonValue,
    /// Set on 503s that ask the client to try another endpoint.
    #[serde(default)]
    pub failover: bool,
}

impl Response {
    pub fn json(status: u16, body: JsonValue) -> Self {
        Response {
            status,
            body,
            failover: false,
        }
    }

    pub fn error(status: u16, message: impl Into<String>) -> Self {
        Response::json(status, serde_json::json!({ "error": message.into() }))
    }

    pub fn unavailable(message: impl Into<String>) -> Self {
        Response {
            failover: true,
            ..Response::error(503, message)
        }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

/// The gateway replicas currently serving a cluster.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointSet {
    pub cluster: String,
    pub endpoints: Vec<String>,
}

impl EndpointSet {
    pub fn key(cluster: &str) -> Result<StateKey, GatewayError> {
        StateKey::new("gateway", cluster, "endpoints")
            .map_err(|e| GatewayError::Validation(e.to_string()))
    }

    /// Decodes the fact value written by [`EndpointSet::publish`].
    pub fn from_value(cluster: &str, value: &Value) -> Result<Self, GatewayError> {
        let text = value.as_str().ok_or_else(|| {
            GatewayError::Discovery(format!("endpoint set of {cluster} is not a string"))
        })?;
        let endpoints: Vec<String> =
            serde_json::from_str(text).map_err(|e| GatewayError::Discovery(e.to_string()))?;
        Ok(EndpointSet {
            cluster: cluster.to_string(),
            endpoints,
        })
    }

    pub fn to_value(&self) -> Value {
        Value::str(serde_json::to_string(&self.endpoints).expect("strings serialize"))
    }

    pub fn publish(&self, store: &StateStore, owner: &Principal) -> Result<(), GatewayError> {
        store.put_fact_next(owner, &Self::key(&self.cluster)?, self.to_value())?;
        Ok(())
    }

    pub fn read(store: &StateStore, cluster: &str) -> Result<Self, GatewayError> {
        let record = store.get(&Self::key(cluster)?, Kind::Fact, ReadMode::Local)?;
        Self::from_value(cluster, &record.value)
    }
}
