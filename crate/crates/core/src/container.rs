//! AQT1 tensor container.
//!
//! Layout: the 4 magic bytes `AQT1`, a little-endian `u32` header length, a
//! UTF-8 JSON header mapping each name to `{dtype, shape, offset, byte_len}`,
//! then the raw little-endian payload. Offsets are relative to the start of
//! the payload. Entries are written in name order so equal contents always
//! produce equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AQT1";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl Payload {
    fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::U8(_) => "u8",
            Payload::U32(_) => "u32",
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::U32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    byte_len: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: BTreeMap<String, Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    fn insert(&mut self, name: &str, shape: Vec<usize>, payload: Payload) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != payload.len() {
            return Err(Error::Format(format!(
                "entry {name}: shape {shape:?} does not match {} values",
                payload.len()
            )));
        }
        self.entries
            .insert(name.to_string(), Entry { shape, payload });
        Ok(())
    }

    pub fn put_tensor(&mut self, name: &str, t: &Tensor) {
        self.entries.insert(
            name.to_string(),
            Entry {
                shape: t.shape().to_vec(),
                payload: Payload::F32(t.data().to_vec()),
            },
        );
    }

    pub fn put_u8(&mut self, name: &str, shape: Vec<usize>, data: Vec<u8>) -> Result<()> {
        self.insert(name, shape, Payload::U8(data))
    }

    pub fn put_u32(&mut self, name: &str, shape: Vec<usize>, data: Vec<u32>) -> Result<()> {
        self.insert(name, shape, Payload::U32(data))
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing entry {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.entry(name)?;
        match &e.payload {
            Payload::F32(v) => Tensor::new(e.shape.clone(), v.clone()),
            p => Err(Error::Format(format!(
                "entry {name} is {}, not f32",
                p.dtype()
            ))),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<(&[usize], &[u8])> {
        let e = self.entry(name)?;
        match &e.payload {
            Payload::U8(v) => Ok((&e.shape, v)),
            p => Err(Error::Format(format!(
                "entry {name} is {}, not u8",
                p.dtype()
            ))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<(&[usize], &[u32])> {
        let e = self.entry(name)?;
        match &e.payload {
            Payload::U32(v) => Ok((&e.shape, v)),
            p => Err(Error::Format(format!(
                "entry {name} is {}, not u32",
                p.dtype()
            ))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, e) in &self.entries {
            let offset = payload.len();
            e.payload.write(&mut payload);
            header.insert(
                name.clone(),
                HeaderEntry {
                    dtype: e.payload.dtype().to_string(),
                    shape: e.shape.clone(),
                    offset,
                    byte_len: payload.len() - offset,
                },
            );
        }
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing AQT1 magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = 8 + hlen;
        if bytes.len() < body {
            return Err(Error::Format("truncated header".into()));
        }
        let header: BTreeMap<String, HeaderEntry> = serde_json::from_slice(&bytes[8..body])?;
        let payload = &bytes[body..];
        let mut c = Container::new();
        for (name, h) in header {
            let end = h.offset + h.byte_len;
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "entry {name} runs past end of payload"
                )));
            }
            let raw = &payload[h.offset..end];
            let p = match h.dtype.as_str() {
                "f32" => Payload::F32(
                    raw.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                "u32" => Payload::U32(
                    raw.chunks_exact(4)
                        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                "u8" => Payload::U8(raw.to_vec()),
                other => return Err(Error::Format(format!("unknown dtype {other}"))),
            };
            c.insert(&name, h.shape, p)?;
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
