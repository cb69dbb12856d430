//! Binary container shared by dataset and checkpoint files.
//!
//! Layout:
//!
//! ```text
//! magic        6 bytes   ("UNFDS1" or "UNFCK1")
//! header_len   u64 LE
//! header       header_len bytes of UTF-8 JSON; always carries "version"
//!              and "blocks" (the shape of every float block, in order)
//! payload      the blocks back to back, each as little-endian f64
//! ```
//!
//! The payload length must match the declared block shapes exactly.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const FORMAT_VERSION: u32 = 1;

const MAGIC_LEN: usize = 6;
const PREFIX_LEN: usize = MAGIC_LEN + 8;

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    version: u32,
    #[serde(flatten)]
    meta: M,
    blocks: Vec<Shape>,
}

pub(crate) fn encode<M: Serialize>(magic: &[u8; 6], meta: &M, blocks: &[&Tensor]) -> Result<Vec<u8>> {
    let env = Envelope {
        version: FORMAT_VERSION,
        meta,
        blocks: blocks.iter().map(|b| b.shape().clone()).collect(),
    };
    let header = serde_json::to_vec(&env).map_err(|e| Error::Contract(format!("header: {e}")))?;
    let floats: usize = blocks.iter().map(|b| b.numel()).sum();
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + 8 * floats);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for b in blocks {
        for v in b.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

pub(crate) fn decode<M: DeserializeOwned>(magic: &[u8; 6], bytes: &[u8]) -> Result<(M, Vec<Tensor>)> {
    if bytes.len() < MAGIC_LEN || &bytes[..MAGIC_LEN] != magic {
        return Err(format_err(
            0,
            format!("missing magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(format_err(bytes.len(), "truncated header length"));
    }
    let header_len = u64::from_le_bytes(bytes[MAGIC_LEN..PREFIX_LEN].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|l| l.checked_add(PREFIX_LEN))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format_err(MAGIC_LEN, format!("header length {header_len} exceeds file")))?;
    let header = &bytes[PREFIX_LEN..header_end];

    let json_err = |e: serde_json::Error| {
        // headers are written on one line, so the column is the byte position
        let col = if e.line() <= 1 { e.column().saturating_sub(1) } else { 0 };
        format_err(PREFIX_LEN + col, format!("header: {e}"))
    };
    let value: Value = serde_json::from_slice(header).map_err(json_err)?;
    let version = value
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| format_err(PREFIX_LEN, "header lacks a version"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let env: Envelope<M> = serde_json::from_value(value).map_err(|e| format_err(PREFIX_LEN, format!("header: {e}")))?;

    let mut total = 0usize;
    for s in &env.blocks {
        total = total
            .checked_add(s.numel())
            .ok_or_else(|| format_err(PREFIX_LEN, "declared blocks overflow"))?;
    }
    let payload = &bytes[header_end..];
    let expected = total
        .checked_mul(8)
        .ok_or_else(|| format_err(PREFIX_LEN, "declared blocks overflow"))?;
    if payload.len() < expected {
        return Err(format_err(
            bytes.len(),
            format!("payload truncated: {} of {expected} bytes", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(format_err(header_end + expected, "trailing bytes after payload"));
    }
    let mut blocks = Vec::with_capacity(env.blocks.len());
    let mut chunks = payload.chunks_exact(8);
    for s in env.blocks {
        let data: Vec<f64> = chunks
            .by_ref()
            .take(s.numel())
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blocks.push(Tensor::from_vec(s.dims(), data)?);
    }
    Ok((env.meta, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Meta {
        name: String,
    }

    fn sample() -> Vec<u8> {
        let a = Tensor::from_rows(&[&[1.0, -0.0], &[f64::MIN_POSITIVE, 3.5]]);
        let b = Tensor::column(&[1e-300, -7.25]);
        encode(b"TESTC1", &Meta { name: "x".into() }, &[&a, &b]).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let bytes = sample();
        let (meta, blocks): (Meta, _) = decode(b"TESTC1", &bytes).unwrap();
        assert_eq!(meta.name, "x");
        assert_eq!(blocks[0].data()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(blocks[1].data()[0], 1e-300);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample();
        for cut in 0..bytes.len() {
            let err = decode::<Meta>(b"TESTC1", &bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let bytes = sample();
        assert!(matches!(
            decode::<Meta>(b"OTHER1", &bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut patched = bytes.clone();
        let key = b"\"version\":1";
        let at = patched.windows(key.len()).position(|w| w == key).unwrap();
        patched[at + key.len() - 1] = b'9';
        let err = decode::<Meta>(b"TESTC1", &patched).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, expected: 1 }));
    }
}
