use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ESEM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
    pub slice_count: usize,
}

/// Per-protein vectors from one model, tagged with the model's name.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub embed_dim: usize,
    pub model_tag: String,
    pub records: Vec<EmbeddingRecord>,
}

fn short_string(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Format(format!("string too long for store: {s}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

impl EmbeddingStore {
    pub fn new(embed_dim: usize, model_tag: &str) -> Self {
        Self { embed_dim, model_tag: model_tag.to_string(), records: Vec::new() }
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }

    /// Layout: magic, `u32` version, `u32` count, `u32` embed_dim, `u16`-prefixed
    /// model tag; per record a `u16`-prefixed id, `u16` slice count and the
    /// `f32` vector.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.records.len() * (self.embed_dim * 4 + 16));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.records.len()).map_err(|_| Error::Format("too many records".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&(self.embed_dim as u32).to_le_bytes());
        short_string(&mut out, &self.model_tag)?;
        for r in &self.records {
            if r.vector.len() != self.embed_dim {
                return Err(Error::Shape(format!("{} has {} values, store holds {}", r.id, r.vector.len(), self.embed_dim)));
            }
            short_string(&mut out, &r.id)?;
            let slices = u16::try_from(r.slice_count).map_err(|_| Error::Format(format!("{}: too many slices", r.id)))?;
            out.extend_from_slice(&slices.to_le_bytes());
            for x in &r.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= buf.len()).ok_or_else(|| Error::Format("truncated embedding store".into()))?;
            let s = &buf[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::Format("not an embedding store (bad magic)".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let u16_at = |b: &[u8]| u16::from_le_bytes(b.try_into().expect("2 bytes"));
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let count = u32_at(take(4)?) as usize;
        let embed_dim = u32_at(take(4)?) as usize;
        let text = |b: &[u8]| String::from_utf8(b.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()));
        let tag_len = u16_at(take(2)?) as usize;
        let model_tag = text(take(tag_len)?)?;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id_len = u16_at(take(2)?) as usize;
            let id = text(take(id_len)?)?;
            let slice_count = u16_at(take(2)?) as usize;
            let vector = take(embed_dim * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            records.push(EmbeddingRecord { id, vector, slice_count });
        }
        if pos != buf.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Self { embed_dim, model_tag, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// `id, slice_count, values…`, tab-separated, values with 9 significant digits.
    pub fn write_tsv(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            write!(w, "{}\t{}", r.id, r.slice_count)?;
            for x in &r.vector {
                write!(w, "\t{x:.8e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}
