use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::codec::{encode_frame, read_frame};
use crate::digest::Digest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    RollingUpdate,
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Safety {
    SafeToRepeat,
    ResumeOnly,
}

/// Fixed for the life of a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub task_id: String,
    pub kind: TaskKind,
    pub safety: Safety,
    pub params: serde_json::Value,
}

/// Progress, rewritten as the task advances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBody {
    pub cursor: u64,
    /// Digest of the units finished before `cursor`.
    pub completed: Digest,
    #[serde(default)]
    pub state: serde_json::Value,
    pub complete: bool,
}

/// Persisted as two checksummed frames, header then body, so a damaged
/// body still reveals whether the task may be repeated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub body: CheckpointBody,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Resumption {
    /// Continue from the body's cursor.
    Resume(Checkpoint),
    /// The body is unreadable but the task is safe to repeat from zero.
    Restart(CheckpointHeader),
    /// The task already finished.
    NoOp,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = encode_frame(&serde_json::to_vec(&self.header).expect("header serializes"));
        out.extend(encode_frame(
            &serde_json::to_vec(&self.body).expect("body serializes"),
        ));
        out
    }

    /// Decodes the header alone, then the body.
    pub fn decode(bytes: &[u8]) -> (Option<CheckpointHeader>, Option<CheckpointBody>) {
        let mut r = bytes;
        let header = read_frame(&mut r, 0)
            .ok()
            .flatten()
            .and_then(|f| serde_json::from_slice(&f).ok());
        let body = header.as_ref().and_then(|_| {
            read_frame(&mut r, 1)
                .ok()
                .flatten()
                .and_then(|f| serde_json::from_slice(&f).ok())
        });
        (header, body)
    }
}

/// Decides how a task continues from its persisted checkpoint.
pub fn resume(bytes: &[u8]) -> Result<Resumption, OrchestratorError> {
    match Checkpoint::decode(bytes) {
        (Some(header), Some(body)) => Ok(if body.complete {
            Resumption::NoOp
        } else {
            Resumption::Resume(Checkpoint { header, body })
        }),
        (Some(header), None) if header.safety == Safety::SafeToRepeat => {
            Ok(Resumption::Restart(header))
        }
        (Some(header), None) => Err(OrchestratorError::CheckpointInvalid(format!(
            "progress of resume-only task {} is unreadable; operator action required",
            header.task_id
        ))),
        (None, _) => Err(OrchestratorError::CheckpointInvalid(
            "checkpoint header is unreadable; operator action required".into(),
        )),
    }
}

/// Durable home for checkpoints and other orchestrator records. Survives
/// the orchestrator process.
pub trait CheckpointStore: Send + Sync {
    fn save(&self, id: &str, bytes: Vec<u8>) -> io::Result<()>;
    fn load(&self, id: &str) -> io::Result<Option<Vec<u8>>>;
    fn list(&self) -> io::Result<Vec<String>>;
}

/// In-memory store; clones share contents.
#[derive(Clone, Default)]
pub struct MemCheckpoints(Arc<Mutex<BTreeMap<String, Vec<u8>>>>);

impl MemCheckpoints {
    pub fn new() -> Self {
        Self::default()
    }

    /// Direct access for fault injection.
    pub fn with_raw<R>(&self, f: impl FnOnce(&mut BTreeMap<String, Vec<u8>>) -> R) -> R {
        f(&mut self.0.lock())
    }
}

impl CheckpointStore for MemCheckpoints {
    fn save(&self, id: &str, bytes: Vec<u8>) -> io::Result<()> {
        self.0.lock().insert(id.to_string(), bytes);
        Ok(())
    }

    fn load(&self, id: &str) -> io::Result<Option<Vec<u8>>> {
        Ok(self.0.lock().get(id).cloned())
    }

    fn list(&self) -> io::Result<Vec<String>> {
        Ok(self.0.lock().keys().cloned().collect())
    }
}

/// One file per record in a directory. Writes go through a temporary file
/// and a rename.
pub struct DirCheckpoints {
    dir: PathBuf,
}

impl DirCheckpoints {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(DirCheckpoints { dir })
    }

    fn path(&self, id: &str) -> PathBuf {
        let name: String = id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        self.dir
            .join(format!("{name}-{}.ckpt", Digest::of(id.as_bytes())))
    }
}

impl CheckpointStore for DirCheckpoints {
    fn save(&self, id: &str, bytes: Vec<u8>) -> io::Result<()> {
        let path = self.path(id);
        let tmp = path.with_extension("tmp");
        let mut framed = encode_frame(id.as_bytes());
        framed.extend(bytes);
        fs::write(&tmp, framed)?;
        fs::rename(tmp, path)
    }

    fn load(&self, id: &str) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.path(id)) {
            Ok(b) => {
                let mut r = b.as_slice();
                read_frame(&mut r, 0).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                Ok(Some(r.to_vec()))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn list(&self) -> io::Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("ckpt") {
                continue;
            }
            let bytes = fs::read(&path)?;
            if let Ok(Some(id)) = read_frame(&mut bytes.as_slice(), 0) {
                ids.push(String::from_utf8_lossy(&id).into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }
}
