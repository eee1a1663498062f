use serde_json::{json, Value as JsonValue};

use super::{GatewayError, Request};
use crate::configlayers::ConfigLayer;
use crate::orchestrator::{DependencyDag, Direction, EmergencyEvent, FlowDefinition};
use crate::provisim::{FaultSpec, Scenario};
use crate::statestore::{Kind, ReadMode, StateKey};

/// An operator request, validated before it is sent anywhere.
#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    /// Adds or replaces a configuration layer given as TOML.
    ApplyLayer {
        layer: String,
    },
    /// Writes desires directly: a list of `{key, value, origin?}` objects.
    PutDesires {
        desires: JsonValue,
    },
    Get {
        key: StateKey,
        kind: Kind,
        mode: Option<ReadMode>,
    },
    Diff {
        entity: String,
    },
    Rollout {
        image: String,
        max_unavailable: usize,
    },
    Sequence {
        dag: String,
        direction: Direction,
    },
    Attest {
        node: String,
    },
    Remediate {
        event: JsonValue,
    },
    AddFlow {
        flow: String,
    },
    SimFault {
        fault: JsonValue,
    },
    /// Runs `scenario` from scratch, or advances the gateway's own fleet by
    /// `ticks` (until quiescent when absent).
    SimRun {
        scenario: Option<String>,
        seed: Option<u64>,
        ticks: Option<u64>,
    },
    Metrics,
}

fn invalid(e: impl ToString) -> GatewayError {
    GatewayError::Validation(e.to_string())
}

impl Command {
    pub fn validate(&self) -> Result<(), GatewayError> {
        match self {
            Command::ApplyLayer { layer } => {
                ConfigLayer::from_toml(layer).map(drop).map_err(invalid)
            }
            Command::PutDesires { desires } => match desires.as_array() {
                Some(_) => Ok(()),
                None => Err(invalid("desires must be a list")),
            },
            Command::Get { .. } | Command::Metrics => Ok(()),
            Command::Diff { entity } | Command::Attest { node: entity } => {
                if entity.is_empty() || entity.contains('/') {
                    Err(invalid(format!("malformed name {entity:?}")))
                } else {
                    Ok(())
                }
            }
            Command::Rollout {
                image,
                max_unavailable,
            } => {
                if *max_unavailable == 0 {
                    Err(invalid("max_unavailable must be at least 1"))
                } else if image.is_empty() {
                    Err(invalid("image is empty"))
                } else {
                    Ok(())
                }
            }
            Command::Sequence { dag, .. } => {
                DependencyDag::from_toml(dag).map(drop).map_err(invalid)
            }
            Command::Remediate { event } => {
                EmergencyEvent::from_json(event).map(drop).map_err(invalid)
            }
            Command::AddFlow { flow } => FlowDefinition::from_toml(flow).map(drop).map_err(invalid),
            Command::SimFault { fault } => serde_json::from_value::<FaultSpec>(fault.clone())
                .map(drop)
                .map_err(invalid),
            Command::SimRun { scenario, .. } => match scenario {
                Some(s) => Scenario::from_toml(s).map(drop).map_err(invalid),
                None => Ok(()),
            },
        }
    }

    pub fn to_request(&self) -> Result<Request, GatewayError> {
        self.validate()?;
        Ok(match self {
            Command::ApplyLayer { layer } => Request::put("/v1/desires", json!({ "layer": layer })),
            Command::PutDesires { desires } => {
                Request::put("/v1/desires", json!({ "desires": desires }))
            }
            Command::Get { key, kind, mode } => {
                let mut q = vec![];
                if *kind == Kind::Desire {
                    q.push("kind=desire".to_string());
                }
                if let Some(m) = mode {
                    q.push(format!("mode={}", mode_str(*m)));
                }
                let mut path = format!(
                    "/v1/facts/{}/{}/{}",
                    key.namespace(),
                    key.entity(),
                    key.property()
                );
                if !q.is_empty() {
                    path = format!("{path}?{}", q.join("&"));
                }
                Request::get(path)
            }
            Command::Diff { entity } => Request::get(format!("/v1/diff/{entity}")),
            Command::Rollout {
                image,
                max_unavailable,
            } => Request::post(
                "/v1/orchestrate/rollout",
                json!({ "image": image, "max_unavailable": max_unavailable }),
            ),
            Command::Sequence { dag, direction } => Request::post(
                "/v1/orchestrate/sequence",
                json!({ "dag": dag, "direction": direction }),
            ),
            Command::Attest { node } => Request::post(format!("/v1/attest/{node}"), json!({})),
            Command::Remediate { event } => Request::post("/v1/remediate", event.clone()),
            Command::AddFlow { flow } => Request::post("/v1/flows", json!({ "flow": flow })),
            Command::SimFault { fault } => Request::post("/v1/sim/fault", fault.clone()),
            Command::SimRun {
                scenario,
                seed,
                ticks,
            } => Request::post(
                "/v1/sim/run",
                json!({ "scenario": scenario, "seed": seed, "ticks": ticks }),
            ),
            Command::Metrics => Request::get("/v1/metrics"),
        })
    }
}

pub(crate) fn mode_str(m: ReadMode) -> &'static str {
    match m {
        ReadMode::Strong => "strong",
        ReadMode::Local => "local",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_max_unavailable_is_rejected_locally() {
        let c = Command::Rollout {
            image: "img".into(),
            max_unavailable: 0,
        };
        assert!(matches!(c.to_request(), Err(GatewayError::Validation(_))));
    }

    #[test]
    fn get_builds_query() {
        let c = Command::Get {
            key: "node/n1/phase".parse().unwrap(),
            kind: Kind::Desire,
            mode: Some(ReadMode::Local),
        };
        assert_eq!(
            c.to_request().unwrap().path,
            "/v1/facts/node/n1/phase?kind=desire&mode=local"
        );
    }

    #[test]
    fn cyclic_dag_is_rejected_locally() {
        let dag = "[[vertex]]\nname = \"a\"\nnodes = []\n[[vertex]]\nname = \"b\"\nnodes = []\n\
                   [[edge]]\nbefore = \"a\"\nafter = \"b\"\n[[edge]]\nbefore = \"b\"\nafter = \"a\"\n";
        let c = Command::Sequence {
            dag: dag.into(),
            direction: Direction::Startup,
        };
        assert!(c.validate().is_err());
    }
}
