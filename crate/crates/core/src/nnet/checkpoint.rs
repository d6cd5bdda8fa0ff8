//! `.psc` checkpoint files.
//!
//! Layout: magic `PSATCKP1`, u16 version, u32 header length, JSON header,
//! u32 tensor count, then per tensor: u16 name length, name bytes, u8 rank,
//! u32 dims, little-endian f32 payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{ParamStore, Tensor, UNetConfig};
use crate::error::{PsatError, Result};
use crate::plan::TrainingPlan;

const MAGIC: &[u8; 8] = b"PSATCKP1";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: UNetConfig,
    pub plan: TrainingPlan,
    pub plan_hash: String,
    pub strategy: String,
    pub epoch: usize,
    pub rng_state: u64,
    /// Case ids the weights were fitted on, used for split-leak checks.
    pub train_ids: Vec<String>,
    pub organ_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| PsatError::invalid("value exceeds u32 in checkpoint"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if ckpt.header.config != ckpt.params.config {
        return Err(PsatError::invalid("checkpoint header config differs from parameter config"));
    }
    let header = serde_json::to_vec(&ckpt.header)?;
    let mut out = Vec::with_capacity(64 + header.len() + 4 * ckpt.params.num_params());
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    put_u32(&mut out, ckpt.params.tensors.len())?;
    for t in &ckpt.params.tensors {
        let name = t.name.as_bytes();
        put_u16(&mut out, u16::try_from(name.len()).map_err(|_| PsatError::invalid("tensor name too long"))?);
        out.extend_from_slice(name);
        out.push(u8::try_from(t.shape.len()).map_err(|_| PsatError::invalid("tensor rank too large"))?);
        for &d in &t.shape {
            put_u32(&mut out, d)?;
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
    let fail = |m: String| PsatError::format(origin, m);
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).map_err(fail)? != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = r.u16().map_err(fail)?;
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let hlen = r.u32().map_err(fail)?;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(hlen).map_err(fail)?).map_err(|e| fail(format!("header: {e}")))?;
    header.config.validate()?;
    let mut params = ParamStore::<f32>::zeros(&header.config)?;
    let count = r.u32().map_err(fail)?;
    if count != params.tensors.len() {
        return Err(fail(format!("{count} tensors stored, config implies {}", params.tensors.len())));
    }
    for slot in params.tensors.iter_mut() {
        let nlen = r.u16().map_err(fail)? as usize;
        let name = String::from_utf8(r.take(nlen).map_err(fail)?.to_vec()).map_err(|e| fail(e.to_string()))?;
        let rank = r.u8().map_err(fail)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().map_err(fail)?);
        }
        if name != slot.name || shape != slot.shape {
            return Err(fail(format!(
                "tensor {name} {shape:?} does not match expected {} {:?}",
                slot.name, slot.shape
            )));
        }
        let payload = r.take(4 * slot.data.len()).map_err(fail)?;
        for (v, chunk) in slot.data.iter_mut().zip(payload.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        if slot.data.iter().any(|v| !v.is_finite()) {
            return Err(fail(format!("tensor {name} holds non-finite values")));
        }
    }
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { header, params })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

/// Load and insist on a specific network configuration.
pub fn load_checkpoint_expecting(path: &Path, config: &UNetConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.header.config != config {
        return Err(PsatError::format(
            path.display().to_string(),
            format!("network config {:?} differs from expected {:?}", ckpt.header.config, config),
        ));
    }
    Ok(ckpt)
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.tensor(name)
    }
}
