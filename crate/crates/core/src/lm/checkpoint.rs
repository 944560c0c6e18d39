//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! "OVTLAB01"
//! u64 header length, header JSON (UTF-8): {"format_version", "step", "config"}
//! repeated until EOF:
//!   u64 name length, name (UTF-8)
//!   u64 rank, rank × u64 dims
//!   product(dims) × f64 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ParamStore, Transformer};
use crate::error::{Error, Result};
use crate::tensor::Array;

pub const MAGIC: &[u8; 8] = b"OVTLAB01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub step: u64,
    pub format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    config: ModelConfig,
}

impl Checkpoint {
    /// Snapshot of a model's dense parameters. Adapters must be merged first.
    pub fn from_model(model: &Transformer, step: u64) -> Result<Self> {
        if model.lora.is_some() {
            return Err(Error::Checkpoint(
                "model carries unmerged LoRA adapters".into(),
            ));
        }
        Ok(Self {
            config: model.config.clone(),
            params: model.params.clone(),
            step,
            format_version: FORMAT_VERSION,
        })
    }

    pub fn to_model(&self) -> Result<Transformer> {
        Transformer::from_params(self.config.clone(), self.params.clone())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        let header = serde_json::to_vec(&Header {
            format_version: self.format_version,
            step: self.step,
            config: self.config.clone(),
        })?;
        write_u64(&mut w, header.len() as u64)?;
        w.write_all(&header)?;
        for (name, array) in &self.params {
            write_u64(&mut w, name.len() as u64)?;
            w.write_all(name.as_bytes())?;
            write_u64(&mut w, array.shape().len() as u64)?;
            for &d in array.shape() {
                write_u64(&mut w, d as u64)?;
            }
            for v in array.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let header_len = read_u64(&mut r)? as usize;
        let header_bytes = take(&mut r, header_len)?;
        let header: Header = serde_json::from_slice(header_bytes)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut params = ParamStore::new();
        while !r.is_empty() {
            let name_len = read_u64(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let payload = take(&mut r, len * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Array::new(shape, data)?);
        }
        let ckpt = Self {
            config: header.config,
            params,
            step: header.step,
            format_version: header.format_version,
        };
        // shape consistency with the config
        ckpt.to_model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let bytes = take(r, 8)?;
    Ok(u64::from_le_bytes(bytes.try_into().expect("8 bytes")))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint(format!(
            "truncated: wanted {n} bytes, {} left",
            r.len()
        )));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}
