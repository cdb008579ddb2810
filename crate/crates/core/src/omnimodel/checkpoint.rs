use std::io::{Read, Write};
use std::path::Path;

use tensorkit::Tensor;

use super::{ModelConfig, ModelError, ModelState, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OMNISEG\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Layout, all little-endian: magic, version `u32`, config JSON length `u64`
/// and bytes, parameter count `u32`, then per parameter: name length `u32`,
/// name bytes, rank `u32`, extents `u64` each, values `f64` each.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(state.num_values() * 8 + 4096);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&state.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, t) in state.names().iter().zip(state.tensors()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &s in t.shape() {
            buf.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r.take(numel * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push(Tensor::new(&shape, data)?);
        names.push(name);
    }
    if r.pos != buf.len() {
        return Err(ModelError::Checkpoint("trailing bytes after parameter table".into()));
    }
    ModelState::from_parts(config, names, tensors)
}
