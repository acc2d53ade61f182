//! `HNMD` model files: magic, version byte, kind tag, length-prefixed JSON
//! header, then a counted little-endian float32 payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{ModelError, ModelKind};

pub const MODEL_MAGIC: &[u8; 4] = b"HNMD";
pub const MODEL_FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ModelKind,
    pub header: serde_json::Value,
    pub payload: Vec<f32>,
}

fn violation(msg: impl Into<String>) -> ModelError {
    ModelError::FormatViolation(msg.into())
}

impl Container {
    pub fn new(kind: ModelKind, header: &impl Serialize, payload: Vec<f32>) -> Result<Self, ModelError> {
        let mut header = serde_json::to_value(header).map_err(|e| violation(e.to_string()))?;
        let obj = header
            .as_object_mut()
            .ok_or_else(|| violation("model header must be a JSON object"))?;
        obj.insert("format_version".into(), MODEL_FORMAT_VERSION.into());
        obj.insert("kind".into(), kind.name().into());
        Ok(Self { kind, header, payload })
    }

    /// Header without the bookkeeping keys, decoded into `H`.
    pub fn header_as<H: DeserializeOwned>(&self) -> Result<H, ModelError> {
        let mut h = self.header.clone();
        if let Some(obj) = h.as_object_mut() {
            obj.remove("format_version");
            obj.remove("kind");
        }
        serde_json::from_value(h).map_err(|e| violation(format!("model header: {e}")))
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<(), ModelError> {
        if self.kind != kind {
            return Err(violation(format!(
                "expected a {} model, container holds {}",
                kind.name(),
                self.kind.name()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.header).expect("JSON values always serialize");
        let mut out = Vec::with_capacity(18 + json.len() + 4 * self.payload.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_FORMAT_VERSION);
        out.push(self.kind.tag());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 10 || &bytes[..4] != MODEL_MAGIC {
            return Err(violation("bad magic, not a model file"));
        }
        if bytes[4] != MODEL_FORMAT_VERSION {
            return Err(violation(format!("unsupported model format version {}", bytes[4])));
        }
        let kind = ModelKind::from_tag(bytes[5]).ok_or_else(|| violation(format!("unknown kind tag {}", bytes[5])))?;
        let json_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let json_end = 10usize
            .checked_add(json_len)
            .filter(|&e| e + 8 <= bytes.len())
            .ok_or_else(|| violation("truncated header"))?;
        let header: serde_json::Value =
            serde_json::from_slice(&bytes[10..json_end]).map_err(|e| violation(format!("header JSON: {e}")))?;
        match header.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(MODEL_FORMAT_VERSION) => {}
            other => return Err(violation(format!("header format_version {other:?}"))),
        }
        if header.get("kind").and_then(|v| v.as_str()) != Some(kind.name()) {
            return Err(violation("header kind disagrees with the kind tag"));
        }
        let count = u64::from_le_bytes(bytes[json_end..json_end + 8].try_into().unwrap());
        let rest = &bytes[json_end + 8..];
        if (rest.len() as u64) != count.saturating_mul(4) {
            return Err(violation(format!(
                "payload declares {count} values but carries {} bytes",
                rest.len()
            )));
        }
        let payload = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { kind, header, payload })
    }
}

pub fn write_container(c: &Container, path: &Path) -> Result<(), ModelError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, c.to_bytes())?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container, ModelError> {
    Container::from_bytes(&fs::read(path)?)
}

/// Sequential reader over a payload.
pub(crate) struct PayloadReader<'a> {
    data: &'a [f32],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(data: &'a [f32]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [f32], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            violation(format!(
                "payload too short: need {n} values at offset {}, have {}",
                self.pos,
                self.data.len()
            ))
        })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn finish(self) -> Result<(), ModelError> {
        if self.pos != self.data.len() {
            return Err(violation(format!(
                "{} trailing payload values",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}
