use std::collections::{BTreeSet, HashMap};

use fleet_core::fleetmodel::NodePhase;
use fleet_core::orchestrator::{
    run_sequence, DagEdge, DependencyDag, Direction, MemCheckpoints, OrchestratorError,
    SequenceOptions, Vertex, VertexExecutor, VertexOutcome,
};
use fleet_core::provisim::{
    DesiredSpec, FleetSim, ImageKind, ImageSpec, KillSpec, RolloutSpec, Scenario, TraceEvent,
};
use fleet_core::statestore::{Kind, StateKey, Value};
use proptest::prelude::*;

/// Records every call and checks ordering against the edges it was given.
struct Recorder {
    edges: Vec<(String, String)>,
    direction: Direction,
    broken: BTreeSet<String>,
    confirmed: BTreeSet<String>,
    touched: Vec<String>,
    early: Vec<String>,
}

impl Recorder {
    fn must_precede(&self, v: &str) -> Vec<&String> {
        self.edges
            .iter()
            .filter_map(|(a, b)| match self.direction {
                Direction::Startup if b == v => Some(a),
                Direction::Shutdown if a == v => Some(b),
                _ => None,
            })
            .collect()
    }

    fn touch(&mut self, v: &Vertex) -> Result<(), String> {
        if self
            .must_precede(&v.name)
            .iter()
            .any(|p| !self.confirmed.contains(*p))
        {
            self.early.push(v.name.clone());
        }
        self.touched.push(v.name.clone());
        Ok(())
    }
}

impl VertexExecutor for Recorder {
    fn start(&mut self, v: &Vertex) -> Result<(), String> {
        self.touch(v)
    }

    fn stop(&mut self, v: &Vertex) -> Result<(), String> {
        self.touch(v)
    }

    fn ready(&mut self, v: &Vertex, _: Direction) -> bool {
        let ok = !self.broken.contains(&v.name);
        if ok {
            self.confirmed.insert(v.name.clone());
        }
        ok
    }
}

fn arb_dag() -> impl Strategy<Value = (usize, Vec<(usize, usize)>, BTreeSet<usize>)> {
    (2usize..10).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        let m = pairs.len();
        (
            Just(n),
            proptest::sample::subsequence(pairs, 0..=m),
            proptest::collection::btree_set(0..n, 0..3),
        )
    })
}

proptest! {
    #[test]
    fn sequencing_waits_for_readiness((n, edges, broken) in arb_dag(), shutdown in any::<bool>()) {
        let name = |i: usize| format!("v{i}");
        // Reversed so the order has to come from the edges.
        let vertices = (0..n).rev().map(|i| Vertex { name: name(i), nodes: vec![] }).collect();
        let dag_edges = edges.iter().map(|&(a, b)| DagEdge { before: name(a), after: name(b) }).collect();
        let dag = DependencyDag::new(vertices, dag_edges).unwrap();
        let direction = if shutdown { Direction::Shutdown } else { Direction::Startup };
        let mut rec = Recorder {
            edges: edges.iter().map(|&(a, b)| (name(a), name(b))).collect(),
            direction,
            broken: broken.iter().map(|&i| name(i)).collect(),
            confirmed: BTreeSet::new(),
            touched: vec![],
            early: vec![],
        };
        let report = match run_sequence("prop", &dag, direction, &mut rec, SequenceOptions::default(), &MemCheckpoints::new()) {
            Ok(r) => r,
            Err(OrchestratorError::ReadinessFailed { report, .. }) => *report,
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!(rec.early.is_empty(), "touched before prerequisites: {:?}", rec.early);

        // Reference: a vertex is reachable iff every prerequisite is ready.
        let mut ok = BTreeSet::new();
        let topo: Vec<usize> = if shutdown { (0..n).rev().collect() } else { (0..n).collect() };
        for &v in &topo {
            let prereqs_ok = rec.must_precede(&name(v)).iter().all(|p| ok.contains(*p));
            if prereqs_ok && !rec.broken.contains(&name(v)) {
                ok.insert(name(v));
            }
        }
        let ready: BTreeSet<String> = report
            .vertices
            .iter()
            .filter(|r| r.outcome == VertexOutcome::Ready)
            .map(|r| r.vertex.clone())
            .collect();
        prop_assert_eq!(&ready, &ok);
        prop_assert_eq!(report.succeeded(), broken.is_empty());
        let unique: BTreeSet<&String> = rec.touched.iter().collect();
        prop_assert_eq!(unique.len(), rec.touched.len());
    }
}

fn rollout_fleet(nodes: usize, max_unavailable: usize) -> Scenario {
    let mut s = Scenario::default();
    s.fleet.count = nodes;
    s.fleet.initial_phase = NodePhase::ServicesReady;
    s.fleet.initial_image = Some("v1".into());
    for name in ["v1", "v2"] {
        s.images.push(ImageSpec {
            name: name.into(),
            kind: ImageKind::MinimalOs,
            layers: vec![(format!("root-{name}"), 4096)],
        });
    }
    s.desired = Some(DesiredSpec {
        image: Some("v1".into()),
        phase: Some(NodePhase::ServicesReady),
    });
    s.rollouts.push(RolloutSpec {
        at: 1,
        image: "v2".into(),
        max_unavailable,
    });
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn killed_orchestrator_finishes_the_rollout(
        max_unavailable in 1usize..8,
        kill_at in 2u64..60,
        down_for in 1u64..25,
        after_prepare in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut s = rollout_fleet(40, max_unavailable);
        s.seed = seed;
        s.kills.push(KillSpec { at: kill_at, down_for, after_prepare });
        let mut sim = FleetSim::new(s).unwrap();
        let report = sim.run().unwrap();
        prop_assert!(report.converged, "not converged after {} ticks", report.ticks);

        let v2 = Value::Digest(sim.image_by_name("v2").unwrap());
        for id in sim.node_ids() {
            prop_assert_eq!(sim.phase(id.as_str()), Some(NodePhase::ServicesReady));
            prop_assert_eq!(sim.store().value(&StateKey::node(id.as_str(), "image"), Kind::Fact), Some(v2.clone()));
        }

        let mut loads: HashMap<&str, usize> = HashMap::new();
        let mut down = BTreeSet::new();
        for e in sim.trace() {
            match e {
                TraceEvent::Exec { node, action, .. } if action == "load_minimal_os" => {
                    *loads.entry(node.as_str()).or_default() += 1;
                }
                TraceEvent::Phase { node, to, .. } => {
                    if to == "ServicesReady" || to == "JobRunning" {
                        down.remove(node);
                    } else {
                        down.insert(node.clone());
                    }
                    prop_assert!(down.len() <= max_unavailable, "{} nodes down", down.len());
                }
                _ => {}
            }
        }
        prop_assert!(loads.values().all(|&n| n == 1), "loads: {loads:?}");
    }
}
