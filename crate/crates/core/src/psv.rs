//! `.psv` volume files.
//!
//! Layout (all little-endian):
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic `PSATVOL1`                          |
//! | 2     | format version (u16, currently 1)         |
//! | 2     | dtype (u16): 0 = f32 intensity, 1 = u16 label |
//! | 12    | shape z, y, x (u32 each)                  |
//! | 12    | spacing dz, dy, dx in mm (f32 each)       |
//! | ...   | voxel payload, row-major (z, y, x)        |

use std::fs;
use std::path::Path;

use crate::error::{PsatError, Result};
use crate::volumes::{Grid, Spacing, Voxel};

pub const MAGIC: &[u8; 8] = b"PSATVOL1";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 8 + 2 + 2 + 12 + 12;

pub fn encode<T: Voxel>(grid: &Grid<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.to_le_bytes());
    for n in grid.shape() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for s in grid.spacing().as_array() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    for &v in grid.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode<T: Voxel>(bytes: &[u8], origin: &Path) -> Result<Grid<T>> {
    let err = |m: String| PsatError::format(origin, m);
    if bytes.len() < HEADER_LEN {
        return Err(err(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(err("bad magic, not a PSATVOL1 file".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let f32_at = |o: usize| f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(8);
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let dtype = u16_at(10);
    if dtype != T::DTYPE {
        return Err(err(format!("dtype tag {dtype}, expected {}", T::DTYPE)));
    }
    let shape = [u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize];
    let spacing = Spacing::new(f32_at(24) as f64, f32_at(28) as f64, f32_at(32) as f64)?;
    let n: usize = shape.iter().product();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n * T::BYTES {
        return Err(err(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            payload.len(),
            n * T::BYTES
        )));
    }
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    Grid::new(shape, spacing, data)
}

pub fn write<T: Voxel>(path: &Path, grid: &Grid<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(grid))?;
    Ok(())
}

pub fn read<T: Voxel>(path: &Path) -> Result<Grid<T>> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}
