//! Length-prefixed, checksummed record framing.
//!
//! Every persisted log in the crate (the state store audit log, render logs,
//! orchestrator checkpoints) uses the same frame:
//!
//! ```text
//! +-----------+-----------+------------------+
//! | len: u32  | crc32: u32| payload (len B)  |
//! +-----------+-----------+------------------+
//! ```
//!
//! Both integers are little-endian and the checksum covers the payload only.
//! Payloads are JSON.

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("checksum mismatch in frame {index}")]
    Checksum { index: usize },
    #[error("truncated frame {index}")]
    Truncated { index: usize },
    #[error("payload of frame {index}: {source}")]
    Payload {
        index: usize,
        source: serde_json::Error,
    },
}

pub fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

pub fn write_record<W: Write, T: Serialize>(w: &mut W, record: &T) -> Result<(), CodecError> {
    let payload = serde_json::to_vec(record).map_err(|e| CodecError::Payload {
        index: 0,
        source: e,
    })?;
    if payload.len() > MAX_FRAME {
        return Err(CodecError::TooLarge(payload.len()));
    }
    w.write_all(&encode_frame(&payload))?;
    Ok(())
}

pub fn write_records<'a, W, T, I>(w: &mut W, records: I) -> Result<(), CodecError>
where
    W: Write,
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    for r in records {
        write_record(w, r)?;
    }
    Ok(())
}

/// Reads one frame payload, or `None` at a clean end of input. `index` is
/// only used to label errors.
pub fn read_frame<R: Read>(r: &mut R, index: usize) -> Result<Option<Vec<u8>>, CodecError> {
    let mut header = [0u8; 8];
    match read_exact_or_eof(r, &mut header)? {
        0 => return Ok(None),
        8 => {}
        _ => return Err(CodecError::Truncated { index }),
    }
    let len = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let crc = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if len > MAX_FRAME {
        return Err(CodecError::TooLarge(len));
    }
    let mut payload = vec![0u8; len];
    if read_exact_or_eof(r, &mut payload)? != len {
        return Err(CodecError::Truncated { index });
    }
    if crc32fast::hash(&payload) != crc {
        return Err(CodecError::Checksum { index });
    }
    Ok(Some(payload))
}

/// Reads raw frame payloads until EOF, verifying each checksum.
pub fn read_frames<R: Read>(r: &mut R) -> Result<Vec<Vec<u8>>, CodecError> {
    let mut frames = Vec::new();
    while let Some(f) = read_frame(r, frames.len())? {
        frames.push(f);
    }
    Ok(frames)
}

pub fn read_records<R: Read, T: DeserializeOwned>(r: &mut R) -> Result<Vec<T>, CodecError> {
    read_frames(r)?
        .into_iter()
        .enumerate()
        .map(|(index, p)| {
            serde_json::from_slice(&p).map_err(|source| CodecError::Payload { index, source })
        })
        .collect()
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn records_round_trip(items in proptest::collection::vec(".*", 0..8)) {
            let mut buf = Vec::new();
            write_records(&mut buf, &items).unwrap();
            let back: Vec<String> = read_records(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, items);
        }
    }

    #[test]
    fn flipped_bit_is_detected() {
        let mut buf = Vec::new();
        write_record(&mut buf, &"hello").unwrap();
        write_record(&mut buf, &"world").unwrap();
        let last = buf.len() - 2;
        buf[last] ^= 0x01;
        match read_records::<_, String>(&mut buf.as_slice()) {
            Err(CodecError::Checksum { index: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_is_detected() {
        let mut buf = Vec::new();
        write_record(&mut buf, &"hello").unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(
            read_records::<_, String>(&mut buf.as_slice()),
            Err(CodecError::Truncated { index: 0 })
        ));
    }
}
