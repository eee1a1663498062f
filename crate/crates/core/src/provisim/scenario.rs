use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::boot::{Read, TransferMode, DEFAULT_METADATA_BYTES};
use super::image::ImageKind;
use super::node::AddressMode;
use super::ProvisimError;
use crate::configlayers::ConfigLayer;
use crate::fleetmodel::{MacAddr, NodePhase, SitePrefix};
use crate::orchestrator::{FlowDefinition, ReconcileConfig};

/// A simulation run: the fleet, its images and configuration, the workload
/// and the faults to inject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// The run stops after this many ticks even if work remains.
    pub max_ticks: u64,
    pub ticks_per_second: f64,
    /// Upper bound on the extra ticks added to each action.
    pub jitter: u64,
    /// Optional mutation graph file; the built-in graph otherwise.
    pub graph: Option<String>,
    pub fleet: FleetSpec,
    #[serde(rename = "node")]
    pub nodes: Vec<NodeSpec>,
    #[serde(rename = "image")]
    pub images: Vec<ImageSpec>,
    pub transfer: TransferSpec,
    /// Workload reads issued against each booted image in lazy mode.
    pub reads: Vec<Read>,
    pub orchestrator: ReconcileConfig,
    pub desired: Option<DesiredSpec>,
    #[serde(rename = "config")]
    pub config: Vec<ConfigLayer>,
    #[serde(rename = "flow")]
    pub flows: Vec<FlowDefinition>,
    #[serde(rename = "fault")]
    pub faults: Vec<FaultSpec>,
    #[serde(rename = "job")]
    pub jobs: Vec<JobSpec>,
    #[serde(rename = "rollout")]
    pub rollouts: Vec<RolloutSpec>,
    #[serde(rename = "kill")]
    pub kills: Vec<KillSpec>,
    /// Eventual-consistency replicas gossiping node image facts.
    pub gossip_replicas: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "scenario".into(),
            seed: 0,
            max_ticks: 1_000_000,
            ticks_per_second: 1.0,
            jitter: 2,
            graph: None,
            fleet: FleetSpec::default(),
            nodes: Vec::new(),
            images: Vec::new(),
            transfer: TransferSpec::default(),
            reads: Vec::new(),
            orchestrator: ReconcileConfig::default(),
            desired: None,
            config: Vec::new(),
            flows: Vec::new(),
            faults: Vec::new(),
            jobs: Vec::new(),
            rollouts: Vec::new(),
            kills: Vec::new(),
            gossip_replicas: 0,
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ProvisimError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenarios serialize")
    }

    pub fn validate(&self) -> Result<(), ProvisimError> {
        let bad = |m: String| Err(ProvisimError::Scenario(m));
        if self.fleet.ports_per_switch == 0 {
            return bad("ports_per_switch must be at least 1".into());
        }
        if self.ticks_per_second <= 0.0 {
            return bad("ticks_per_second must be positive".into());
        }
        let mut names = BTreeSet::new();
        for i in &self.images {
            if !names.insert(i.name.as_str()) {
                return bad(format!("image {} declared twice", i.name));
            }
            if i.layers.is_empty() {
                return bad(format!("image {} has no layers", i.name));
            }
        }
        self.orchestrator.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetSpec {
    /// Generated nodes `n00000`, `n00001`, ... wired port by port.
    pub count: usize,
    pub ports_per_switch: u16,
    pub memory: u64,
    pub prefix: SitePrefix,
    pub address_mode: AddressMode,
    pub router_advertisements: bool,
    /// Starting phase of every node; later phases imply a completed boot.
    pub initial_phase: NodePhase,
    pub initial_image: Option<String>,
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec {
            count: 0,
            ports_per_switch: 48,
            memory: 4 << 30,
            prefix: SitePrefix::default(),
            address_mode: AddressMode::Location,
            router_advertisements: true,
            initial_phase: NodePhase::Unknown,
            initial_image: None,
        }
    }
}

/// An explicitly wired node, in addition to the generated ones.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub chassis: u32,
    pub port: u16,
    pub nic: Option<MacAddr>,
    pub memory: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub name: String,
    #[serde(default = "minimal_os")]
    pub kind: ImageKind,
    /// `[content name, size]` per layer, bottom first.
    pub layers: Vec<(String, u64)>,
}

fn minimal_os() -> ImageKind {
    ImageKind::MinimalOs
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSpec {
    pub mode: TransferMode,
    pub metadata_bytes: u64,
    /// Bytes per tick a boot stage moves; zero makes transfers instant.
    pub bytes_per_tick: u64,
}

impl Default for TransferSpec {
    fn default() -> Self {
        TransferSpec {
            mode: TransferMode::Full,
            metadata_bytes: DEFAULT_METADATA_BYTES,
            bytes_per_tick: 0,
        }
    }
}

/// Shorthand for a base configuration layer setting fleet-wide defaults.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesiredSpec {
    pub image: Option<String>,
    pub phase: Option<NodePhase>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    #[serde(flatten)]
    pub kind: FaultKind,
    pub at: u64,
    /// Ticks until the fault clears. Crashes and corruption are permanent.
    pub duration: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    /// The node's hardware fails and it drops to Faulted.
    Crash { node: String },
    /// Endpoints in different groups cannot reach each other. Unlisted
    /// endpoints form one more group together.
    Partition { groups: Vec<Vec<String>> },
    /// Actions on the listed nodes (all nodes if empty) take `factor` times
    /// longer.
    SlowLink {
        factor: u64,
        #[serde(default)]
        nodes: Vec<String>,
    },
    /// One layer of the node's image no longer matches its digest.
    CorruptLayer { node: String, layer: usize },
    /// The switch stops answering link-layer discovery.
    LldpOff { switch: u32 },
    /// The node's BMC loses power.
    BmcOff { node: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub node: String,
    pub at: u64,
    pub duration: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSpec {
    pub at: u64,
    pub image: String,
    pub max_unavailable: usize,
}

/// The orchestrator process dies at `at` and a replacement starts
/// `down_for` ticks later.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KillSpec {
    pub at: u64,
    pub down_for: u64,
    /// Die after recording intents but before sending any command.
    #[serde(default)]
    pub after_prepare: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_scenario_file() {
        let s = Scenario::from_toml(
            r#"
            name = "small"
            seed = 9
            [fleet]
            count = 4
            ports_per_switch = 2
            [desired]
            image = "os"
            phase = "ServicesReady"
            [[image]]
            name = "os"
            layers = [["kernel", 100], ["userland", 400]]
            [transfer]
            mode = { mode = "lazy", cache_bytes = 64 }
            [[fault]]
            kind = "partition"
            groups = [["orchestrator"], ["n00000"]]
            at = 5
            duration = 10
            [[fault]]
            kind = "corrupt_layer"
            node = "n00001"
            layer = 1
            at = 0
            [[kill]]
            at = 7
            down_for = 12
            after_prepare = true
            "#,
        )
        .unwrap();
        assert_eq!(s.fleet.count, 4);
        assert_eq!(s.transfer.mode, TransferMode::Lazy { cache_bytes: 64 });
        assert_eq!(s.faults.len(), 2);
        assert!(matches!(
            s.faults[1].kind,
            FaultKind::CorruptLayer { layer: 1, .. }
        ));
        assert_eq!(Scenario::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn rejects_bad_scenarios() {
        assert!(Scenario::from_toml("bogus = 1").is_err());
        assert!(Scenario::from_toml("[[image]]\nname = \"a\"\nlayers = []").is_err());
    }
}
