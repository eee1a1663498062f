use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::{xxh3_64, Xxh3};

/// A 64-bit content digest.
///
/// Digests are fast non-cryptographic hashes. They identify image layers,
/// manifests, configuration layers and completed-unit sets; nothing here
/// depends on collision resistance against an adversary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Digest(pub u64);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(xxh3_64(bytes))
    }

    /// Digest over a sequence of byte strings, length-delimited so that
    /// `["ab", "c"]` and `["a", "bc"]` differ.
    pub fn of_parts<I, B>(parts: I) -> Self
    where
        I: IntoIterator<Item = B>,
        B: AsRef<[u8]>,
    {
        let mut h = Xxh3::new();
        for part in parts {
            let part = part.as_ref();
            h.update(&(part.len() as u64).to_le_bytes());
            h.update(part);
        }
        Digest(h.digest())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid digest {0:?}: expected 16 hex digits")]
pub struct ParseDigestError(String);

impl FromStr for Digest {
    type Err = ParseDigestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let hex = s.strip_prefix("0x").unwrap_or(s);
        if hex.is_empty() || hex.len() > 16 {
            return Err(ParseDigestError(s.to_string()));
        }
        u64::from_str_radix(hex, 16)
            .map(Digest)
            .map_err(|_| ParseDigestError(s.to_string()))
    }
}

impl From<Digest> for String {
    fn from(d: Digest) -> Self {
        d.to_string()
    }
}

impl TryFrom<String> for Digest {
    type Error = ParseDigestError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parts_are_length_delimited() {
        assert_ne!(Digest::of_parts(["ab", "c"]), Digest::of_parts(["a", "bc"]));
        assert_eq!(Digest::of_parts(["ab", "c"]), Digest::of_parts(["ab", "c"]));
    }

    #[test]
    fn text_form_round_trips() {
        let d = Digest::of(b"layer");
        assert_eq!(d.to_string().parse::<Digest>().unwrap(), d);
        assert_eq!("0x2a".parse::<Digest>().unwrap(), Digest(42));
        assert!("zz".parse::<Digest>().is_err());
        assert!("".parse::<Digest>().is_err());
    }
}
