//! Layered configuration: merge, desire rendering and sealed secrets.

mod layer;
mod merge;
mod render;
mod secrets;

pub use layer::{ConfigLayer, Precedence, Scope};
pub use merge::{merge_layers, EffectiveConfig, Resolved};
pub use render::{Changeset, ImageRegistry, RenderEntry, RenderResult, Renderer};
pub use secrets::{seal_secret, unseal_secret, Keyring, SealedSecret};

use crate::codec::CodecError;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid scope {0:?}")]
    InvalidScope(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("layer file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("key {key:?} defined by layers {layers:?} at the same precedence")]
    AmbiguousPrecedence { key: String, layers: Vec<String> },
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("key id {0:?} not in keyring")]
    KeyNotFound(String),
    #[error("sealed secret failed integrity check")]
    Integrity,
    #[error(transparent)]
    Codec(#[from] CodecError),
}
