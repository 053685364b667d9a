//! Shared on-disk framing: 4-byte magic, `u32` version, `u64` header length,
//! UTF-8 JSON header, then a little-endian `f32` payload.

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write(path: &Path, magic: [u8; 4], version: u32, header: &[u8], payload: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + header.len() + 4 * payload.len());
    bytes.extend_from_slice(&magic);
    bytes.extend_from_slice(&version.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Returns the header bytes and the raw payload after checking magic and version.
pub(crate) fn read(path: &Path, magic: [u8; 4], version: u32) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let truncated = |what: &str| Error::Truncated(format!("{}: {what}", path.display()));
    let found: [u8; 4] = bytes
        .get(..4)
        .ok_or_else(|| truncated("missing magic"))?
        .try_into()
        .expect("4 bytes");
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let v = u32::from_le_bytes(bytes.get(4..8).ok_or_else(|| truncated("missing version"))?.try_into().expect("4 bytes"));
    if v != version {
        return Err(Error::Version {
            found: v,
            expected: version,
        });
    }
    let len = u64::from_le_bytes(bytes.get(8..16).ok_or_else(|| truncated("missing header length"))?.try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| truncated("header runs past end of file"))?;
    Ok((bytes[16..end].to_vec(), bytes[end..].to_vec()))
}

/// Decodes `count` floats starting at byte `offset` of `payload`.
pub(crate) fn floats(payload: &[u8], offset: u64, count: usize, what: &str) -> Result<Vec<f32>> {
    let start = usize::try_from(offset).map_err(|_| Error::Format(format!("{what}: offset overflows")))?;
    let end = start
        .checked_add(4 * count)
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| Error::Truncated(format!("{what}: payload ends before byte {}", start + 4 * count)))?;
    Ok(payload[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}
