//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic     b"ESNT"
//! version   u32 (= 1)
//! config    u32 block length, then depth u32, base_filters u32, kernel u32,
//!           dropout_rate f64, time_steps u32, pitch_count u32, pitch_offset u32
//! count     u32 number of tensors
//! table     per tensor: name length u16, name (UTF-8), dtype u8 (1 = f32),
//!           kind u8 (0 = parameter, 1 = buffer), rank u8, dims u32 * rank,
//!           byte offset u64 into the payload
//! payload   f32 values
//! ```

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use super::unet::{NamedTensor, ScorerModel, UNetConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ESNT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const CONFIG_LEN: u32 = 4 * 6 + 8;

pub fn to_bytes(model: &ScorerModel) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&CONFIG_LEN.to_le_bytes());
    for v in [c.depth as u32, c.base_filters as u32, c.kernel as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&c.dropout_rate.to_le_bytes());
    for v in [c.time_steps as u32, c.pitch_count as u32, u32::from(c.pitch_offset)] {
        out.extend_from_slice(&v.to_le_bytes());
    }

    let entries: Vec<(&NamedTensor, u8)> = model
        .params
        .iter()
        .map(|p| (p, 0u8))
        .chain(model.buffers.iter().map(|b| (b, 1u8)))
        .collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (t, kind) in &entries {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(*kind);
        out.push(t.tensor.shape().len() as u8);
        for &d in t.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.tensor.len() as u64;
    }
    for (t, _) in &entries {
        for &v in t.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ScorerModel> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let block = c.u32()?;
    if block != CONFIG_LEN {
        return Err(Error::Format(format!(
            "config block of {block} bytes, expected {CONFIG_LEN}"
        )));
    }
    let depth = c.u32()? as usize;
    let base_filters = c.u32()? as usize;
    let kernel = c.u32()? as usize;
    let dropout_rate = c.f64()?;
    let time_steps = c.u32()? as usize;
    let pitch_count = c.u32()? as usize;
    let pitch_offset = u8::try_from(c.u32()?).map_err(|_| Error::Format("pitch offset above 255".into()))?;
    let config = UNetConfig {
        depth,
        base_filters,
        kernel,
        dropout_rate,
        time_steps,
        pitch_count,
        pitch_offset,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("config block: {e}")))?;

    let count = c.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor {name}: unsupported dtype {dtype}")));
        }
        let kind = c.u8()?;
        if kind > 1 {
            return Err(Error::Format(format!("tensor {name}: unknown kind {kind}")));
        }
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let offset = c.u64()?;
        table.push((name, kind, shape, offset));
    }
    let payload = &bytes[c.pos..];
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for (name, kind, shape, offset) in table {
        let n: usize = shape.iter().product();
        let start = usize::try_from(offset).map_err(|_| Error::Format("offset overflow".into()))?;
        let end = start
            .checked_add(4 * n)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::Format(format!("tensor {name} runs past the payload")))?;
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = NamedTensor {
            name,
            tensor: Tensor::from_vec(&shape, data)?,
        };
        if kind == 0 {
            params.push(t);
        } else {
            buffers.push(t);
        }
    }
    let model = ScorerModel {
        config,
        params,
        buffers,
    };
    model
        .check_layout()
        .map_err(|e| Error::Format(format!("shape table: {e}")))?;
    if model.params.iter().chain(&model.buffers).any(|t| !t.tensor.is_finite()) {
        return Err(Error::Format("non-finite parameter value".into()));
    }
    Ok(model)
}

pub fn save_model(model: &ScorerModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ScorerModel> {
    from_bytes(&fs::read(path)?)
}
