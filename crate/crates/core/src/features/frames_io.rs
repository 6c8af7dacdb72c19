//! `VLF1` frame files: magic, `u32` dimension, `u32` frame count, `f32`
//! frame period, then the frames as little-endian `f32`, time-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::VocoderFrameSequence;
use crate::error::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"VLF1";
const HEADER_LEN: usize = 16;

pub fn write_frames(seq: &VocoderFrameSequence, path: &Path) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::arg("refusing to write an empty frame sequence"));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + seq.as_slice().len() * 4);
    buf.extend_from_slice(FRAME_MAGIC);
    buf.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    buf.extend_from_slice(&seq.frame_period_ms().to_le_bytes());
    for v in seq.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
}

/// Dimension and frame count from a file header.
pub fn read_header(path: &Path) -> Result<(usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(path, &bytes).map(|(d, l, _)| (d, l))
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(usize, usize, f32)> {
    if bytes.len() < 4 {
        return Err(format_err(
            path,
            bytes.len(),
            "file ends inside the magic bytes",
        ));
    }
    if &bytes[..4] != FRAME_MAGIC {
        return Err(format_err(path, 0, "missing VLF1 magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(path, bytes.len(), "file ends inside the header"));
    }
    let dim = u32_at(bytes, 4) as usize;
    let len = u32_at(bytes, 8) as usize;
    let period = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if dim == 0 {
        return Err(format_err(path, 4, "feature dimension is zero"));
    }
    if len == 0 {
        return Err(format_err(path, 8, "frame count is zero"));
    }
    if !(period.is_finite() && period > 0.0) {
        return Err(format_err(
            path,
            12,
            format!("invalid frame period {period}"),
        ));
    }
    Ok((dim, len, period))
}

pub fn read_frames(path: &Path) -> Result<VocoderFrameSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dim, len, period) = parse_header(path, &bytes)?;
    let want = HEADER_LEN + dim * len * 4;
    if bytes.len() < want {
        let whole = (bytes.len() - HEADER_LEN) / 4 * 4 + HEADER_LEN;
        return Err(format_err(
            path,
            whole,
            format!(
                "payload truncated: expected {want} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > want {
        return Err(format_err(path, want, "trailing bytes after payload"));
    }
    let frames = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(VocoderFrameSequence::new(dim, frames)?.with_period(period))
}

/// Like [`read_frames`] but fails with a corpus-consistency error when the
/// file's dimension differs from `dim`.
pub fn read_frames_expecting(path: &Path, dim: usize) -> Result<VocoderFrameSequence> {
    let seq = read_frames(path)?;
    if seq.dim() != dim {
        return Err(Error::Corpus(format!(
            "{} has feature dimension {}, corpus uses {dim}",
            path.display(),
            seq.dim()
        )));
    }
    Ok(seq)
}
