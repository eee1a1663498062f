use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::boot::{TransferMode, Verdict};
use super::scenario::FaultKind;
use crate::digest::Digest;

/// One line of the simulation trace. `t` is the tick it happened at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    /// The provisioner accepted a command and started the action.
    Exec {
        t: u64,
        node: String,
        action: String,
        tag: String,
    },
    /// An action finished.
    Done {
        t: u64,
        node: String,
        action: String,
        tag: String,
        ok: bool,
    },
    Rejected {
        t: u64,
        node: String,
        tag: String,
        reason: String,
    },
    /// A command never reached the provisioner.
    Dropped {
        t: u64,
        node: String,
        tag: String,
    },
    /// A fact written by a non-node action.
    Applied {
        t: u64,
        key: String,
    },
    Phase {
        t: u64,
        node: String,
        from: String,
        to: String,
        action: String,
    },
    Boot {
        t: u64,
        node: String,
        image: Digest,
        bytes: u64,
        mode: TransferMode,
        failed_layer: Option<usize>,
    },
    Attest {
        t: u64,
        node: String,
        #[serde(flatten)]
        verdict: Verdict,
    },
    Fault {
        t: u64,
        #[serde(flatten)]
        fault: FaultKind,
        active: bool,
    },
    Job {
        t: u64,
        node: String,
        started: bool,
    },
    Staged {
        t: u64,
        node: String,
        artifact: Digest,
    },
    /// A principal on the node tried to read the staging channel's
    /// credentials.
    CredentialRead {
        t: u64,
        node: String,
        granted: bool,
    },
    Gossip {
        t: u64,
        from: String,
        to: String,
        ok: bool,
        deltas: usize,
    },
    OrchestratorUp {
        t: u64,
        principal: String,
        epoch: u64,
    },
    OrchestratorDown {
        t: u64,
        principal: String,
        reason: String,
    },
    RolloutStarted {
        t: u64,
        id: String,
    },
}

impl TraceEvent {
    pub fn tick(&self) -> u64 {
        use TraceEvent::*;
        match self {
            Exec { t, .. }
            | Done { t, .. }
            | Rejected { t, .. }
            | Dropped { t, .. }
            | Applied { t, .. }
            | Phase { t, .. }
            | Boot { t, .. }
            | Attest { t, .. }
            | Fault { t, .. }
            | Job { t, .. }
            | Staged { t, .. }
            | CredentialRead { t, .. }
            | Gossip { t, .. }
            | OrchestratorUp { t, .. }
            | OrchestratorDown { t, .. }
            | RolloutStarted { t, .. } => *t,
        }
    }
}

pub fn write_jsonl<W: Write>(w: &mut W, events: &[TraceEvent]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut *w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> std::io::Result<Vec<TraceEvent>> {
    r.lines()
        .filter(|l| !l.as_ref().is_ok_and(|l| l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
