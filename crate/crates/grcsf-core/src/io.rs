//! File formats and atomic write helpers.
//!
//! Images are 16-bit grayscale PNG. Float planes (HU slices, residual maps)
//! use a small raw format: magic `GRCF`, version, dims, then little-endian
//! `f32` values in row-major order. All writers go through a
//! write-to-temp-then-rename so partially written artifacts never appear
//! under their final name.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;

use crate::{Error, Result};

const RAW_MAGIC: &[u8; 4] = b"GRCF";
const RAW_VERSION: u32 = 1;

/// Writes `bytes` to `path` atomically (temp file + rename in the same
/// directory). Creates parent directories as needed.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let nonce = COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp: PathBuf = {
        let mut name = path
            .file_name()
            .ok_or_else(|| Error::format(path, "path has no file name"))?
            .to_os_string();
        name.push(format!(".tmp-{}-{nonce}", std::process::id()));
        path.with_file_name(name)
    };
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        Ok(())
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Serializes a `(H, W)` float plane in the raw `GRCF` format.
pub fn raw_plane_bytes(a: &Array2<f32>) -> Vec<u8> {
    let (h, w) = a.dim();
    let mut out = Vec::with_capacity(16 + a.len() * 4);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_raw_plane(path: &Path, a: &Array2<f32>) -> Result<()> {
    atomic_write(path, &raw_plane_bytes(a))
}

pub fn read_raw_plane(path: &Path) -> Result<Array2<f32>> {
    let bytes = read_bytes(path)?;
    parse_raw_plane(&bytes).map_err(|m| Error::format(path, m))
}

fn parse_raw_plane(bytes: &[u8]) -> std::result::Result<Array2<f32>, String> {
    if bytes.len() < 16 {
        return Err("truncated header".into());
    }
    if &bytes[0..4] != RAW_MAGIC {
        return Err("bad magic, expected GRCF".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != RAW_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let (h, w) = (u32_at(8) as usize, u32_at(12) as usize);
    let need = 16 + h * w * 4;
    if bytes.len() != need {
        return Err(format!("expected {need} bytes for {h}x{w}, got {}", bytes.len()));
    }
    let data: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((h, w), data).map_err(|e| e.to_string())
}

/// Saves a `[0, 1]` float plane as 16-bit grayscale PNG (values clamped,
/// scaled by 65535, rounded to nearest).
pub fn write_png16(path: &Path, a: &Array2<f32>) -> Result<()> {
    let (h, w) = a.dim();
    let data: Vec<u16> = a
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, data)
        .expect("buffer length matches dims");
    let mut bytes: Vec<u8> = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::format(path, format!("png encode: {e}")))?;
    atomic_write(path, &bytes)
}

/// Loads a 16-bit grayscale PNG into a `[0, 1]` float plane. 8-bit inputs are
/// accepted and rescaled.
pub fn read_png16(path: &Path) -> Result<Array2<f32>> {
    let bytes = read_bytes(path)?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::format(path, format!("png decode: {e}")))?;
    let g = img.into_luma16();
    let (w, h) = g.dimensions();
    let data: Vec<f32> = g.into_raw().iter().map(|&v| v as f32 / 65535.0).collect();
    Array2::from_shape_vec((h as usize, w as usize), data)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Saves a binary mask as 16-bit PNG (0 or 65535).
pub fn write_mask_png(path: &Path, m: &Array2<u8>) -> Result<()> {
    let f = m.mapv(|v| if v != 0 { 1.0f32 } else { 0.0 });
    write_png16(path, &f)
}

/// Loads a mask PNG back to `{0, 1}` (threshold at half intensity).
pub fn read_mask_png(path: &Path) -> Result<Array2<u8>> {
    let f = read_png16(path)?;
    Ok(f.mapv(|v| u8::from(v >= 0.5)))
}

/// Writes pretty JSON atomically.
pub fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
