//! Little-endian binary container for named tensors, shared by encoder and
//! head checkpoints.
//!
//! Layout: magic `ESLG`, `u32` version, `u32` entry count, then per entry a
//! `u16`-prefixed UTF-8 name, a `u8` dtype code, a `u8` rank, `u32` dims and
//! the payload (raw `f32`, int4 block payload, or UTF-8 text).

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{build_model, EncoderModel, LinearWeight, ModelConfig};
use crate::error::{Error, Result};
use crate::quant::{int4_payload_len, QuantizedTensor};
use crate::tensor::Tensor;
use crate::training::LoraAdapter;

pub const MAGIC: &[u8; 4] = b"ESLG";
pub const VERSION: u32 = 1;
pub const CONFIG_ENTRY: &str = "config";

const DTYPE_REAL32: u8 = 0;
const DTYPE_INT4: u8 = 1;
const DTYPE_TEXT: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum EntryValue {
    Real32(Tensor<f32>),
    Int4(QuantizedTensor),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: EntryValue,
}

impl Entry {
    pub fn real(name: impl Into<String>, t: Tensor<f32>) -> Self {
        Self { name: name.into(), value: EntryValue::Real32(t) }
    }

    pub fn text(name: impl Into<String>, s: impl Into<String>) -> Self {
        Self { name: name.into(), value: EntryValue::Text(s.into()) }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_container(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, entries.len())?;
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("entry name too long: {}", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let (dtype, dims): (u8, Vec<usize>) = match &e.value {
            EntryValue::Real32(t) => (DTYPE_REAL32, t.dims().to_vec()),
            EntryValue::Int4(q) => (DTYPE_INT4, q.dims().to_vec()),
            EntryValue::Text(s) => (DTYPE_TEXT, vec![s.len()]),
        };
        out.push(dtype);
        out.push(u8::try_from(dims.len()).map_err(|_| Error::Format("rank above 255".into()))?);
        for d in dims {
            put_u32(&mut out, d)?;
        }
        match &e.value {
            EntryValue::Real32(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            EntryValue::Int4(q) => out.extend_from_slice(&q.encode_payload()),
            EntryValue::Text(s) => out.extend_from_slice(s.as_bytes()),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

pub fn decode_container(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint container (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("size overflow".into()))?;
        let value = match dtype {
            DTYPE_REAL32 => EntryValue::Real32(Tensor::new(dims, c.f32s(numel)?).map_err(|e| Error::Format(e.to_string()))?),
            DTYPE_INT4 => {
                let block_size = c.u32()? as usize;
                let blocks = c.u32()? as usize;
                if block_size == 0 || numel.div_ceil(block_size) != blocks {
                    return Err(Error::Format(format!("int4 entry {name} has inconsistent block header")));
                }
                let scales = c.f32s(blocks)?;
                let packed = c.take(numel.div_ceil(2))?.to_vec();
                debug_assert_eq!(8 + 4 * blocks + packed.len(), int4_payload_len(numel, block_size));
                let q = QuantizedTensor::from_parts(dims, block_size, scales, packed)
                    .map_err(|e| Error::Format(format!("int4 entry {name}: {e}")))?;
                EntryValue::Int4(q)
            }
            DTYPE_TEXT if rank == 1 => {
                EntryValue::Text(String::from_utf8(c.take(numel)?.to_vec()).map_err(|_| Error::Format("text entry is not UTF-8".into()))?)
            }
            other => return Err(Error::Format(format!("unknown dtype code {other} for entry {name}"))),
        };
        entries.push(Entry { name, value });
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after last entry", buf.len() - c.pos)));
    }
    Ok(entries)
}

pub fn write_container(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = encode_container(entries)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<Entry>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_container(&buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LoraMeta {
    rank: usize,
    alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    model: ModelConfig,
    #[serde(default)]
    lora: BTreeMap<String, LoraMeta>,
}

/// Every tensor of `model` as container entries, config first.
pub fn model_entries(model: &EncoderModel<f32>) -> Result<Vec<Entry>> {
    let lora =
        model.linears().into_iter().filter_map(|(n, l)| l.lora.as_ref().map(|a| (n, LoraMeta { rank: a.rank, alpha: a.alpha }))).collect();
    let header = ModelHeader { model: model.config.clone(), lora };
    let mut entries = vec![Entry::text(CONFIG_ENTRY, serde_json::to_string(&header)?)];
    model.visit_tensors(|name, t| entries.push(Entry::real(name, t.clone())));
    for (name, lin) in model.linears() {
        if let LinearWeight::Quantized(q) = &lin.weight {
            entries.push(Entry { name: format!("{name}.weight"), value: EntryValue::Int4(q.clone()) });
        }
    }
    Ok(entries)
}

/// Rebuilds a model from container entries, checking every tensor's shape.
pub fn model_from_entries(entries: Vec<Entry>) -> Result<EncoderModel<f32>> {
    let mut map: BTreeMap<String, EntryValue> = BTreeMap::new();
    for e in entries {
        if map.insert(e.name.clone(), e.value).is_some() {
            return Err(Error::Format(format!("duplicate entry {}", e.name)));
        }
    }
    let header: ModelHeader = match map.remove(CONFIG_ENTRY) {
        Some(EntryValue::Text(s)) => serde_json::from_str(&s).map_err(|e| Error::Format(format!("bad config entry: {e}")))?,
        _ => return Err(Error::Format("checkpoint has no config entry".into())),
    };
    let mut model = build_model(&header.model, 0).map_err(|e| Error::Format(format!("bad model config: {e}")))?;
    for (name, lin) in model.linears_mut() {
        let key = format!("{name}.weight");
        if let Some(EntryValue::Int4(_)) = map.get(&key) {
            let Some(EntryValue::Int4(q)) = map.remove(&key) else { unreachable!() };
            if q.dims() != [lin.in_dim(), lin.out_dim()] {
                return Err(Error::Format(format!("{key} has dims {:?}", q.dims())));
            }
            lin.weight = LinearWeight::Quantized(q);
        }
        if let Some(meta) = header.lora.get(&name) {
            lin.lora = Some(LoraAdapter {
                rank: meta.rank,
                alpha: meta.alpha,
                a: Tensor::zeros(&[meta.rank, lin.in_dim()]),
                b: Tensor::zeros(&[lin.out_dim(), meta.rank]),
            });
        }
    }
    let mut failure = None;
    model.visit_tensors_mut(|name, t| {
        if failure.is_some() {
            return;
        }
        match map.remove(name) {
            Some(EntryValue::Real32(src)) if src.dims() == t.dims() => *t = src,
            Some(EntryValue::Real32(src)) => {
                failure = Some(Error::Format(format!("{name} has dims {:?}, expected {:?}", src.dims(), t.dims())))
            }
            Some(_) => failure = Some(Error::Format(format!("{name} has the wrong dtype"))),
            None => failure = Some(Error::Format(format!("checkpoint is missing {name}"))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Format(format!("unexpected entry {extra}")));
    }
    Ok(model)
}

pub fn save_model(model: &EncoderModel<f32>, path: &Path) -> Result<()> {
    write_container(path, &model_entries(model)?)
}

pub fn load_model(path: &Path) -> Result<EncoderModel<f32>> {
    model_from_entries(read_container(path)?)
}
