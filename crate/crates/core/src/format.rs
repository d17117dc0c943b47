//! Shared layout of the binary artifacts: 8 magic bytes, a little-endian
//! u64 header length, a UTF-8 JSON header, then little-endian f32 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn encode(magic: &[u8; 8], header: &str, payload: impl IntoIterator<Item = f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + header.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Splits a file into its JSON header and raw payload bytes.
pub(crate) fn decode<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(&'a str, &'a [u8])> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            needed: 8,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != magic {
        return Err(Error::MagicMismatch {
            expected: *magic,
            found: bytes[..8].to_vec(),
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            needed: 16,
            found: bytes.len(),
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.saturating_add(len);
    if bytes.len() < end {
        return Err(Error::Truncated {
            needed: end,
            found: bytes.len(),
        });
    }
    let header = std::str::from_utf8(&bytes[16..end]).map_err(|e| Error::Header(e.to_string()))?;
    Ok((header, &bytes[end..]))
}

/// Reads exactly `count` f32 values. Short payloads are truncation, long
/// ones disagree with the header.
pub(crate) fn read_f32s(payload: &[u8], count: usize) -> Result<Vec<f32>> {
    let needed = count * 4;
    if payload.len() < needed {
        return Err(Error::Truncated {
            needed,
            found: payload.len(),
        });
    }
    if payload.len() != needed {
        return Err(Error::SizeMismatch {
            expected: needed,
            actual: payload.len(),
        });
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// Writes through a sibling temporary file so readers never see a partial
/// artifact.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_guards() {
        let bytes = encode(b"TESTMAG1", "{\"a\":1}", [1.5f32, -2.0]);
        let (h, p) = decode(&bytes, b"TESTMAG1").unwrap();
        assert_eq!(h, "{\"a\":1}");
        assert_eq!(read_f32s(p, 2).unwrap(), vec![1.5, -2.0]);
        assert!(matches!(read_f32s(p, 3), Err(Error::Truncated { .. })));
        assert!(matches!(read_f32s(p, 1), Err(Error::SizeMismatch { .. })));
        assert!(matches!(decode(&bytes, b"OTHERMAG"), Err(Error::MagicMismatch { .. })));
        assert!(matches!(decode(&bytes[..12], b"TESTMAG1"), Err(Error::Truncated { .. })));
        assert!(matches!(decode(&bytes[..18], b"TESTMAG1"), Err(Error::Truncated { .. })));
    }
}
