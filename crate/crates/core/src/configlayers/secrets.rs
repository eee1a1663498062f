use std::collections::BTreeMap;
use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{Key, Tag, XChaCha20Poly1305, XNonce};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::ConfigError;

/// Symmetric keys by id. Key material never appears in `Debug` output.
#[derive(Clone, Default)]
pub struct Keyring {
    keys: BTreeMap<String, [u8; 32]>,
}

impl fmt::Debug for Keyring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keyring")
            .field("ids", &self.keys.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Keyring {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, key: [u8; 32]) {
        self.keys.insert(id.into(), key);
    }

    /// Adds a freshly generated key.
    pub fn generate(&mut self, id: impl Into<String>) {
        let mut key = [0u8; 32];
        rand::rng().fill_bytes(&mut key);
        self.insert(id, key);
    }

    pub fn remove(&mut self, id: &str) -> bool {
        self.keys.remove(id).is_some()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.keys.contains_key(id)
    }

    /// Parses a keyring file: one `id = "<base64 key>"` line per key.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let raw: BTreeMap<String, String> = toml::from_str(text)?;
        let mut ring = Keyring::new();
        for (id, encoded) in raw {
            let bytes = B64
                .decode(encoded.trim())
                .map_err(|e| ConfigError::Validation(format!("key {id}: {e}")))?;
            let key: [u8; 32] = bytes
                .try_into()
                .map_err(|_| ConfigError::Validation(format!("key {id}: expected 32 bytes")))?;
            ring.insert(id, key);
        }
        Ok(ring)
    }

    pub fn to_toml(&self) -> String {
        let raw: BTreeMap<&str, String> = self
            .keys
            .iter()
            .map(|(id, k)| (id.as_str(), B64.encode(k)))
            .collect();
        toml::to_string(&raw).expect("string map is valid TOML")
    }

    fn cipher(&self, id: &str) -> Result<XChaCha20Poly1305, ConfigError> {
        let key = self
            .keys
            .get(id)
            .ok_or_else(|| ConfigError::KeyNotFound(id.to_string()))?;
        Ok(XChaCha20Poly1305::new(Key::from_slice(key)))
    }
}

/// An encrypted value. Binary fields serialize as base64.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedSecret {
    pub key_id: String,
    #[serde(with = "b64")]
    pub nonce: Vec<u8>,
    #[serde(with = "b64")]
    pub ciphertext: Vec<u8>,
    #[serde(with = "b64")]
    pub tag: Vec<u8>,
}

mod b64 {
    use super::{Engine, B64};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s).map_err(serde::de::Error::custom)
    }
}

/// Encrypts `plaintext` under `key_id` with a fresh random nonce. The key id
/// is bound as associated data.
pub fn seal_secret(
    ring: &Keyring,
    plaintext: &[u8],
    key_id: &str,
) -> Result<SealedSecret, ConfigError> {
    let cipher = ring.cipher(key_id)?;
    let mut nonce = [0u8; 24];
    rand::rng().fill_bytes(&mut nonce);
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(XNonce::from_slice(&nonce), key_id.as_bytes(), &mut buf)
        .map_err(|_| ConfigError::Integrity)?;
    Ok(SealedSecret {
        key_id: key_id.to_string(),
        nonce: nonce.to_vec(),
        ciphertext: buf,
        tag: tag.to_vec(),
    })
}

pub fn unseal_secret(ring: &Keyring, sealed: &SealedSecret) -> Result<Vec<u8>, ConfigError> {
    let cipher = ring.cipher(&sealed.key_id)?;
    if sealed.nonce.len() != 24 || sealed.tag.len() != 16 {
        return Err(ConfigError::Integrity);
    }
    let mut buf = sealed.ciphertext.clone();
    cipher
        .decrypt_in_place_detached(
            XNonce::from_slice(&sealed.nonce),
            sealed.key_id.as_bytes(),
            &mut buf,
            Tag::from_slice(&sealed.tag),
        )
        .map_err(|_| ConfigError::Integrity)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring() -> Keyring {
        let mut r = Keyring::new();
        r.generate("k1");
        r
    }

    #[test]
    fn round_trip() {
        let r = ring();
        let s = seal_secret(&r, b"hunter2", "k1").unwrap();
        assert_eq!(unseal_secret(&r, &s).unwrap(), b"hunter2");
    }

    #[test]
    fn nonces_differ() {
        let r = ring();
        let a = seal_secret(&r, b"same", "k1").unwrap();
        let b = seal_secret(&r, b"same", "k1").unwrap();
        assert_ne!(a.nonce, b.nonce);
        assert_ne!(a.ciphertext, b.ciphertext);
    }

    #[test]
    fn unknown_key() {
        let r = ring();
        assert!(matches!(
            seal_secret(&r, b"x", "nope"),
            Err(ConfigError::KeyNotFound(id)) if id == "nope"
        ));
        let s = seal_secret(&r, b"x", "k1").unwrap();
        assert!(matches!(
            unseal_secret(&Keyring::new(), &s),
            Err(ConfigError::KeyNotFound(_))
        ));
    }

    #[test]
    fn every_flipped_bit_is_detected() {
        let r = ring();
        let s = seal_secret(&r, b"top secret value", "k1").unwrap();
        for i in 0..s.ciphertext.len() * 8 {
            let mut t = s.clone();
            t.ciphertext[i / 8] ^= 1 << (i % 8);
            assert!(matches!(unseal_secret(&r, &t), Err(ConfigError::Integrity)));
        }
        let mut t = s.clone();
        t.tag[0] ^= 1;
        assert!(matches!(unseal_secret(&r, &t), Err(ConfigError::Integrity)));
    }

    #[test]
    fn key_id_is_authenticated() {
        let mut r = ring();
        let k = r.keys["k1"];
        r.insert("k2", k);
        let mut s = seal_secret(&r, b"x", "k1").unwrap();
        s.key_id = "k2".into();
        assert!(matches!(unseal_secret(&r, &s), Err(ConfigError::Integrity)));
    }

    #[test]
    fn serialized_form_hides_plaintext_and_keys() {
        let r = ring();
        let s = seal_secret(&r, b"correct-horse-battery", "k1").unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert!(!json.contains("correct-horse-battery"));
        let back: SealedSecret = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(!format!("{r:?}").contains(&B64.encode(r.keys["k1"])));
        let r2 = Keyring::from_toml(&r.to_toml()).unwrap();
        assert_eq!(unseal_secret(&r2, &s).unwrap(), b"correct-horse-battery");
    }
}
