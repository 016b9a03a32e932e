//! Raw little-endian float32 arrays, the payload format of datasets and checkpoints.

use std::fs;
use std::path::Path;

use crate::error::{LneError, Result};

pub(crate) fn write_f32s(path: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| LneError::io(path, e))
}

/// Read exactly `expected` floats; a size mismatch is reported as corruption.
pub(crate) fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(LneError::MissingFile(path.into())),
        Err(e) => return Err(LneError::io(path, e)),
    };
    if bytes.len() != expected * 4 {
        return Err(LneError::Corrupt {
            path: path.into(),
            reason: format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
