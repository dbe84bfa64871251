//! File framing shared by checkpoints, dataset containers and map archives:
//! a single-line JSON header terminated by `\n`, then little-endian binary
//! blocks whose layout the header describes.

use std::io::{self, BufRead, Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

/// Headers longer than this are treated as corrupt.
const MAX_HEADER_BYTES: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("expected a {expected} file, found {found:?}")]
    Kind {
        expected: &'static str,
        found: String,
    },
    #[error("unsupported {kind} version {found} (this build reads version {supported})")]
    Version {
        kind: &'static str,
        found: u32,
        supported: u32,
    },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("inconsistent file: {0}")]
    Inconsistent(String),
}

pub fn write_header<W: Write>(w: &mut W, header: &impl Serialize) -> Result<(), FormatError> {
    let mut line = serde_json::to_vec(header)?;
    line.push(b'\n');
    w.write_all(&line)?;
    Ok(())
}

/// Reads the header line; returns it with its length in bytes (newline included).
pub fn read_header<R: BufRead, H: DeserializeOwned>(r: &mut R) -> Result<(H, u64), FormatError> {
    let mut line = Vec::new();
    let n = r
        .take(MAX_HEADER_BYTES as u64)
        .read_until(b'\n', &mut line)?;
    if n == 0 {
        return Err(FormatError::Truncated("empty file".into()));
    }
    if line.last() != Some(&b'\n') {
        return Err(FormatError::Truncated("header line not terminated".into()));
    }
    let header = serde_json::from_slice(&line[..line.len() - 1])?;
    Ok((header, n as u64))
}

pub fn write_f32s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f32>) -> io::Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_f32s<R: Read>(r: &mut R, count: usize, what: &str) -> Result<Vec<f32>, FormatError> {
    let mut buf = vec![0u8; count * 4];
    read_exact(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_bytes<R: Read>(r: &mut R, count: usize, what: &str) -> Result<Vec<u8>, FormatError> {
    let mut buf = vec![0u8; count];
    read_exact(r, &mut buf, what)?;
    Ok(buf)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => {
            FormatError::Truncated(format!("{what}: expected {} bytes", buf.len()))
        }
        _ => FormatError::Io(e),
    })
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: &std::path::Path) -> io::Result<String> {
    use sha2::{Digest, Sha256};
    let mut f = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
