//! CWT1 weight files.
//!
//! Little-endian layout: magic `b"CWT1"`, `u16` format version, `u32` record
//! count, then per record a `u16` name length, the UTF-8 name, a `u8` rank,
//! `rank × u32` dims and `product(dims) × f64` values. Batch-norm running
//! statistics are ordinary records named `…/running_mean` and
//! `…/running_var`. The input size is kept in a one-element
//! `meta/input_size` record so a file fully determines its network.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, DECODER_DEPTH, ENCODER_DEPTH};
use crate::tensor::Tensor;

pub const CWT_MAGIC: &[u8; 4] = b"CWT1";
pub const CWT_VERSION: u16 = 1;
const META_INPUT_SIZE: &str = "meta/input_size";

fn push_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CWT_MAGIC);
    out.extend_from_slice(&CWT_VERSION.to_le_bytes());
    out.extend_from_slice(&((params.len() + 1) as u32).to_le_bytes());
    push_record(
        &mut out,
        META_INPUT_SIZE,
        &Tensor::scalar(params.config().input_size as f64),
    );
    for (name, t) in params.iter() {
        push_record(&mut out, name, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {} (needed {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn channels_from(tensors: &IndexMap<String, Tensor>, path: &Path) -> Result<ModelConfig> {
    let dim = |name: &str, axis: usize| -> Result<usize> {
        tensors
            .get(name)
            .and_then(|t| t.shape().get(axis).copied())
            .ok_or_else(|| Error::format(path, format!("missing or malformed record {name}")))
    };
    let encoder_channels = (1..=ENCODER_DEPTH)
        .map(|i| dim(&format!("enc{i}/conv/weight"), 0))
        .collect::<Result<_>>()?;
    let decoder_channels = (1..=DECODER_DEPTH)
        .map(|i| {
            if i % 2 == 1 {
                dim(&format!("dec{i}/tconv/weight"), 1)
            } else {
                dim(&format!("dec{i}/conv/weight"), 0)
            }
        })
        .collect::<Result<_>>()?;
    let input_size = tensors
        .get(META_INPUT_SIZE)
        .and_then(|t| t.item().ok())
        .ok_or_else(|| Error::format(path, "missing meta/input_size"))?;
    Ok(ModelConfig {
        input_size: input_size as usize,
        encoder_channels,
        bottleneck_channels: dim("mid/conv/weight", 0)?,
        decoder_channels,
        seed: 0,
    })
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CWT_MAGIC {
        return Err(Error::format(path, "bad magic, expected CWT1"));
    }
    let version = r.u16()?;
    if version != CWT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "record name is not UTF-8"))?
            .to_string();
        let ndim = r.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "record too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(path, format!("duplicate record {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last record"));
    }
    let config = channels_from(&tensors, path)?;
    tensors.shift_remove(META_INPUT_SIZE);
    ModelParams::from_parts(config, tensors).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_weights(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
