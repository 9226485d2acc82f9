//! `SPEC1` spectrogram files: magic `SPEC1\0`, `u32` LE frame count,
//! `u32` LE band count, then `frames × bands` `f32` LE values, row-major.
//! Files always hold model-space (normalized) spectrograms.

use std::fs;
use std::path::Path;

use gmvae_core::dsp::Spectrogram;

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 6] = b"SPEC1\0";

pub fn encode(s: &Spectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 4 * s.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(s.frames as u32).to_le_bytes());
    out.extend_from_slice(&(s.bands as u32).to_le_bytes());
    for v in &s.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Spectrogram, String> {
    let body = bytes.strip_prefix(MAGIC.as_slice()).ok_or("bad SPEC1 magic")?;
    if body.len() < 8 {
        return Err("truncated SPEC1 header".into());
    }
    let frames = u32::from_le_bytes(body[0..4].try_into().unwrap()) as usize;
    let bands = u32::from_le_bytes(body[4..8].try_into().unwrap()) as usize;
    let data = &body[8..];
    let expected = frames.checked_mul(bands).and_then(|n| n.checked_mul(4)).ok_or("SPEC1 dimensions overflow")?;
    if data.len() != expected {
        return Err(format!("SPEC1 body holds {} bytes, {frames}x{bands} needs {expected}", data.len()));
    }
    let values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Spectrogram::new(frames, bands, values, true).map_err(|e| e.to_string())
}

pub fn write(path: &Path, s: &Spectrogram) -> AppResult<()> {
    fs::write(path, encode(s)).map_err(AppError::io(path))
}

pub fn read(path: &Path) -> AppResult<Spectrogram> {
    let bytes = fs::read(path).map_err(AppError::io(path))?;
    decode(&bytes).map_err(|detail| AppError::Format { path: path.to_path_buf(), detail })
}
