use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::image::ImageManifest;
use super::ProvisimError;
use crate::digest::Digest;
use crate::fleetmodel::{NodeId, NodePhase};

/// Metadata fetched per layer in lazy mode before any content is read.
pub const DEFAULT_METADATA_BYTES: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TransferMode {
    /// The whole image is copied into node memory before it runs.
    Full,
    /// Content is fetched when read and kept in an LRU cache.
    Lazy { cache_bytes: u64 },
}

/// One read issued by the workload against an image layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Read {
    pub layer: usize,
    pub offset: u64,
    pub len: u64,
}

/// Kernel-command-line style parameters applied at boot.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootParams(pub BTreeMap<String, String>);

impl BootParams {
    pub fn with(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.0.insert(k.into(), v.into());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum StageOutcome {
    Ok,
    DigestMismatch { layer: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub start: u64,
    pub end: u64,
    #[serde(flatten)]
    pub outcome: StageOutcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootTrace {
    pub node: NodeId,
    pub image: Digest,
    pub stages: Vec<StageRecord>,
    /// Bytes moved over the node network.
    pub bytes_transferred: u64,
    pub mode: TransferMode,
    pub params: BootParams,
    /// The boot RAM disk stays mounted under the running system.
    pub initial_stage_resident: bool,
    /// Digest of every layer as it arrived at the node.
    pub measured: Vec<Digest>,
}

impl BootTrace {
    pub fn failed_layer(&self) -> Option<usize> {
        self.stages.iter().find_map(|s| match s.outcome {
            StageOutcome::DigestMismatch { layer } => Some(layer),
            StageOutcome::Ok => None,
        })
    }
}

/// What the node's boot path sees: its memory, locally staged layers and
/// any layers altered in transit or at rest.
#[derive(Clone, Debug, Default)]
pub struct BootEnv<'a> {
    pub memory: u64,
    pub staged: Option<&'a BTreeSet<Digest>>,
    pub tampered: Option<&'a BTreeMap<usize, Digest>>,
    pub metadata_bytes: u64,
    pub start: u64,
    /// Ticks per stage before byte costs.
    pub stage_ticks: u64,
    /// Bytes moved per tick; zero means transfers are free in time.
    pub bytes_per_tick: u64,
}

/// Fetch accounting for lazily transferred layers.
///
/// The cache holds exact byte intervals. A read fetches only the parts of
/// its range that are not cached, so the bytes fetched never exceed the
/// bytes read.
#[derive(Debug)]
pub struct LazyCache {
    capacity: u64,
    used: u64,
    clock: u64,
    /// (layer, start) -> (end, last use)
    spans: BTreeMap<(usize, u64), (u64, u64)>,
}

impl LazyCache {
    pub fn new(capacity: u64) -> Self {
        LazyCache {
            capacity,
            used: 0,
            clock: 0,
            spans: BTreeMap::new(),
        }
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    /// Serves `read` and returns the bytes fetched from the image server.
    pub fn read(&mut self, read: Read) -> u64 {
        self.clock += 1;
        let (start, end) = (read.offset, read.offset.saturating_add(read.len));
        let mut covered = Vec::new();
        let lo = self
            .spans
            .range(..(read.layer, start))
            .next_back()
            .filter(|((l, _), (e, _))| *l == read.layer && *e > start)
            .map(|(k, _)| *k)
            .unwrap_or((read.layer, start));
        for (&(l, s), (e, used)) in self.spans.range_mut(lo..(read.layer, end)) {
            if l != read.layer || *e <= start {
                continue;
            }
            *used = self.clock;
            covered.push((s.max(start), (*e).min(end)));
        }
        let mut gaps = Vec::new();
        let mut at = start;
        for (s, e) in covered {
            if s > at {
                gaps.push((at, s));
            }
            at = at.max(e);
        }
        if at < end {
            gaps.push((at, end));
        }
        let fetched = gaps.iter().map(|(s, e)| e - s).sum();
        for (s, e) in gaps {
            if e - s <= self.capacity {
                self.spans.insert((read.layer, s), (e, self.clock));
                self.used += e - s;
            }
        }
        self.evict();
        fetched
    }

    fn evict(&mut self) {
        while self.used > self.capacity {
            let victim = self
                .spans
                .iter()
                .min_by_key(|(k, (_, t))| (*t, **k))
                .map(|(k, (e, _))| (*k, *e))
                .expect("used bytes imply a span");
            self.spans.remove(&victim.0);
            self.used -= victim.1 - victim.0 .1;
        }
    }
}

/// Boots `manifest` on a node and accounts for every transferred byte.
///
/// Each stage checks the digest of the layer it is about to run; the first
/// mismatch stops the boot and is returned with the partial trace. Layers present in `env.staged` were delivered
/// out of band and cost nothing on the node network.
pub fn boot_node(
    node: &NodeId,
    phase: NodePhase,
    manifest: &ImageManifest,
    mode: TransferMode,
    params: &BootParams,
    reads: &[Read],
    env: &BootEnv<'_>,
) -> Result<BootTrace, ProvisimError> {
    if !matches!(phase, NodePhase::PoweredOn | NodePhase::NetBooting) {
        return Err(ProvisimError::InvalidPhase {
            node: node.clone(),
            phase,
        });
    }
    if mode == TransferMode::Full && manifest.total_size() > env.memory {
        return Err(ProvisimError::InsufficientMemory {
            node: node.clone(),
            need: manifest.total_size(),
            have: env.memory,
        });
    }
    if let Some(r) = reads.iter().find(|r| {
        manifest
            .layers
            .get(r.layer)
            .is_none_or(|l| r.offset.saturating_add(r.len) > l.size)
    }) {
        return Err(ProvisimError::Scenario(format!(
            "read {r:?} outside image {}",
            manifest.name
        )));
    }
    let staged = |d: &Digest| env.staged.is_some_and(|s| s.contains(d));
    let measured: Vec<Digest> = manifest
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            env.tampered
                .and_then(|t| t.get(&i))
                .copied()
                .unwrap_or(l.digest)
        })
        .collect();

    let mut stages = Vec::new();
    let mut now = env.start;
    let mut push = |stage: String, cost: u64, outcome: StageOutcome, now: &mut u64| {
        let ticks = env.stage_ticks + cost.checked_div(env.bytes_per_tick).unwrap_or(0);
        stages.push(StageRecord {
            stage,
            start: *now,
            end: *now + ticks,
            outcome,
        });
        *now += ticks;
    };
    push("firmware".into(), 0, StageOutcome::Ok, &mut now);
    push("net_boot".into(), 0, StageOutcome::Ok, &mut now);

    let mut bytes = 0;
    let mut per_layer = vec![0u64; manifest.layers.len()];
    match mode {
        TransferMode::Full => {
            for (i, l) in manifest.layers.iter().enumerate() {
                if !staged(&l.digest) {
                    per_layer[i] = l.size;
                }
            }
        }
        TransferMode::Lazy { cache_bytes } => {
            let mut cache = LazyCache::new(cache_bytes);
            for (i, l) in manifest.layers.iter().enumerate() {
                if !staged(&l.digest) {
                    per_layer[i] = env.metadata_bytes;
                }
            }
            for r in reads {
                if !staged(&manifest.layers[r.layer].digest) {
                    per_layer[r.layer] += cache.read(*r);
                }
            }
        }
    }
    for (i, l) in manifest.layers.iter().enumerate() {
        bytes += per_layer[i];
        let outcome = if measured[i] == l.digest {
            StageOutcome::Ok
        } else {
            StageOutcome::DigestMismatch { layer: i }
        };
        let failed = outcome != StageOutcome::Ok;
        push(format!("layer{i}"), per_layer[i], outcome, &mut now);
        if failed {
            break;
        }
    }
    let trace = BootTrace {
        node: node.clone(),
        image: manifest.id,
        stages,
        bytes_transferred: bytes,
        mode,
        params: params.clone(),
        initial_stage_resident: true,
        measured,
    };
    match trace.failed_layer() {
        Some(layer) => Err(ProvisimError::DigestMismatch {
            layer,
            trace: Box::new(trace),
        }),
        None => Ok(trace),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub expected: Digest,
    pub measured: Option<Digest>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail { layer: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationReport {
    pub node: NodeId,
    pub image: Digest,
    pub layers: Vec<LayerCheck>,
    #[serde(flatten)]
    pub verdict: Verdict,
}

/// Compares the measured layer digests against `expected`, layer by layer.
/// A missing measurement counts as a mismatch.
pub fn attest(node: &NodeId, measured: &[Digest], expected: &ImageManifest) -> AttestationReport {
    let layers: Vec<LayerCheck> = expected
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerCheck {
            expected: l.digest,
            measured: measured.get(i).copied(),
        })
        .collect();
    let verdict = layers
        .iter()
        .position(|c| c.measured != Some(c.expected))
        .map_or(Verdict::Pass, |layer| Verdict::Fail { layer });
    AttestationReport {
        node: node.clone(),
        image: expected.id,
        layers,
        verdict,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provisim::image::{ImageKind, Layer};
    use proptest::prelude::*;

    fn manifest(sizes: &[u64]) -> ImageManifest {
        let layers = sizes
            .iter()
            .enumerate()
            .map(|(i, s)| Layer::of(&format!("l{i}"), *s))
            .collect();
        ImageManifest::new("img", ImageKind::MinimalOs, layers).unwrap()
    }

    fn env(memory: u64) -> BootEnv<'static> {
        BootEnv {
            memory,
            metadata_bytes: DEFAULT_METADATA_BYTES,
            stage_ticks: 1,
            ..BootEnv::default()
        }
    }

    fn boot(
        m: &ImageManifest,
        mode: TransferMode,
        reads: &[Read],
        e: &BootEnv<'_>,
    ) -> Result<BootTrace, ProvisimError> {
        boot_node(
            &NodeId::new("n1"),
            NodePhase::PoweredOn,
            m,
            mode,
            &BootParams::default(),
            reads,
            e,
        )
    }

    #[test]
    fn full_mode_moves_every_byte() {
        let m = manifest(&[100, 50]);
        let t = boot(&m, TransferMode::Full, &[], &env(1000)).unwrap();
        assert_eq!(t.bytes_transferred, 150);
        assert!(t.initial_stage_resident);
        assert_eq!(t.failed_layer(), None);
        assert!(matches!(
            boot(&m, TransferMode::Full, &[], &env(149)),
            Err(ProvisimError::InsufficientMemory { .. })
        ));
    }

    #[test]
    fn lazy_mode_small_read() {
        let m = manifest(&[100, 50]);
        let reads = [Read {
            layer: 0,
            offset: 5,
            len: 10,
        }];
        let t = boot(&m, TransferMode::Lazy { cache_bytes: 64 }, &reads, &env(0)).unwrap();
        assert!(t.bytes_transferred <= 14, "{}", t.bytes_transferred);
    }

    #[test]
    fn staged_layers_are_free() {
        let m = manifest(&[100, 50]);
        let staged: BTreeSet<Digest> = [m.layers[0].digest].into();
        let e = BootEnv {
            staged: Some(&staged),
            ..env(1000)
        };
        assert_eq!(
            boot(&m, TransferMode::Full, &[], &e)
                .unwrap()
                .bytes_transferred,
            50
        );
    }

    #[test]
    fn tampered_layer_stops_boot_and_fails_attestation() {
        let m = manifest(&[10, 10, 10]);
        let t: BTreeMap<usize, Digest> = [(1, Digest(7))].into();
        let e = BootEnv {
            tampered: Some(&t),
            ..env(1000)
        };
        let tr = match boot(&m, TransferMode::Full, &[], &e) {
            Err(ProvisimError::DigestMismatch { layer: 1, trace }) => *trace,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(tr.failed_layer(), Some(1));
        assert_eq!(tr.stages.last().unwrap().stage, "layer1");
        let r = attest(&tr.node, &tr.measured, &m);
        assert_eq!(r.verdict, Verdict::Fail { layer: 1 });
        assert_eq!(
            attest(
                &tr.node,
                &m.layers.iter().map(|l| l.digest).collect::<Vec<_>>(),
                &m
            )
            .verdict,
            Verdict::Pass
        );
    }

    #[test]
    fn boot_requires_power() {
        let m = manifest(&[1]);
        let r = boot_node(
            &NodeId::new("n1"),
            NodePhase::PoweredOff,
            &m,
            TransferMode::Full,
            &BootParams::default(),
            &[],
            &env(10),
        );
        assert!(matches!(r, Err(ProvisimError::InvalidPhase { .. })));
    }

    /// Replays reads against a byte-level model of the cache contents.
    fn oracle_fetch(reads: &[Read], capacity: u64) -> Vec<u64> {
        // Spans as (layer, start, end, last_use); same eviction order.
        let mut spans: Vec<(usize, u64, u64, u64)> = Vec::new();
        let mut out = Vec::new();
        for (t, r) in reads.iter().enumerate() {
            let t = t as u64 + 1;
            let mut fetched = 0;
            let mut gaps = Vec::new();
            let mut gap_start: Option<u64> = None;
            for b in r.offset..r.offset + r.len {
                let hit = spans
                    .iter_mut()
                    .find(|s| s.0 == r.layer && s.1 <= b && b < s.2);
                match hit {
                    Some(s) => {
                        s.3 = t;
                        if let Some(g) = gap_start.take() {
                            gaps.push((g, b));
                        }
                    }
                    None => {
                        fetched += 1;
                        gap_start.get_or_insert(b);
                    }
                }
            }
            if let Some(g) = gap_start {
                gaps.push((g, r.offset + r.len));
            }
            for (s, e) in gaps {
                if e - s <= capacity {
                    spans.push((r.layer, s, e, t));
                }
            }
            while spans.iter().map(|s| s.2 - s.1).sum::<u64>() > capacity {
                let i = (0..spans.len())
                    .min_by_key(|&i| (spans[i].3, spans[i].0, spans[i].1))
                    .unwrap();
                spans.remove(i);
            }
            out.push(fetched);
        }
        out
    }

    fn reads(layers: usize, size: u64) -> impl Strategy<Value = Vec<Read>> {
        proptest::collection::vec(
            (0..layers, 0..size).prop_flat_map(move |(layer, offset)| {
                (1..=size - offset).prop_map(move |len| Read { layer, offset, len })
            }),
            0..40,
        )
    }

    proptest! {
        #[test]
        fn lazy_cache_matches_byte_oracle(rs in reads(3, 64), capacity in 0u64..200) {
            let mut cache = LazyCache::new(capacity);
            let got: Vec<u64> = rs.iter().map(|r| cache.read(*r)).collect();
            prop_assert_eq!(got, oracle_fetch(&rs, capacity));
            prop_assert!(cache.used() <= capacity);
        }

        #[test]
        fn lazy_bytes_bounded_by_reads(rs in reads(3, 64), capacity in 0u64..200) {
            let m = manifest(&[64, 64, 64]);
            let t = boot(&m, TransferMode::Lazy { cache_bytes: capacity }, &rs, &env(0)).unwrap();
            let read: u64 = rs.iter().map(|r| r.len).sum();
            prop_assert!(t.bytes_transferred <= read + 3 * DEFAULT_METADATA_BYTES);
        }

        #[test]
        fn attestation_fails_iff_some_layer_differs(
            tamper in proptest::collection::btree_map(0usize..4, any::<u64>(), 0..3)
        ) {
            let m = manifest(&[1, 2, 3, 4]);
            let measured: Vec<Digest> = m.layers.iter().enumerate()
                .map(|(i, l)| tamper.get(&i).map(|d| Digest(*d)).unwrap_or(l.digest))
                .collect();
            let first = (0..4).find(|i| measured[*i] != m.layers[*i].digest);
            let r = attest(&NodeId::new("n"), &measured, &m);
            prop_assert_eq!(r.verdict, first.map_or(Verdict::Pass, |layer| Verdict::Fail { layer }));
        }
    }
}
