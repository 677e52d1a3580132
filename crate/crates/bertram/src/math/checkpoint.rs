//! Checkpoint container: one JSON header line (names, shapes, frozen flags,
//! byte offsets, free-form metadata) followed by the raw little-endian f32
//! arrays in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::math::tensor::{Parameter, Tensor};
use crate::util::write_atomic;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    /// Byte offset into the payload (the region after the header line).
    offset: u64,
    /// Payload length in bytes.
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, Value>,
    params: Vec<HeaderEntry>,
}

/// Serialize parameters (in the given order) plus metadata.
pub fn save_checkpoint(
    path: &Path,
    meta: &BTreeMap<String, Value>,
    params: &[&Parameter],
) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(meta, params)?)
}

/// The exact byte image `save_checkpoint` writes; exposed so freezing tests
/// can compare states without touching the filesystem.
pub fn checkpoint_bytes(meta: &BTreeMap<String, Value>, params: &[&Parameter]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for p in params {
        let len = (p.value().numel() * 4) as u64;
        entries.push(HeaderEntry {
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            frozen: p.frozen(),
            offset,
            len,
        });
        offset += len;
    }
    let header = Header {
        meta: meta.clone(),
        params: entries,
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for p in params {
        for v in p.value().data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

/// The raw payload region (concatenated little-endian f32 arrays) for a
/// parameter set. Freezing tests compare this: it covers exactly the values,
/// while the header also records freezing flags that legitimately change
/// between training stages.
pub fn payload_bytes(params: &[&Parameter]) -> Vec<u8> {
    let mut bytes = Vec::new();
    for p in params {
        for v in p.value().data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

/// A loaded checkpoint; parameters are looked up by name.
pub struct Checkpoint {
    pub meta: BTreeMap<String, Value>,
    entries: Vec<(HeaderEntry, Vec<f32>)>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::config(format!("{}: missing checkpoint header", path.display())))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])?;
    let payload = &bytes[newline + 1..];
    let mut entries = Vec::with_capacity(header.params.len());
    for e in header.params {
        let start = e.offset as usize;
        let end = start + e.len as usize;
        if end > payload.len() {
            return Err(Error::config(format!(
                "{}: parameter {} extends past end of file",
                path.display(),
                e.name
            )));
        }
        let mut data = Vec::with_capacity((e.len / 4) as usize);
        for chunk in payload[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        entries.push((e, data));
    }
    Ok(Checkpoint {
        meta: header.meta,
        entries,
    })
}

impl Checkpoint {
    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(e, _)| e.name.as_str()).collect()
    }

    pub fn param(&self, name: &str) -> Result<Parameter> {
        let (entry, data) = self
            .entries
            .iter()
            .find(|(e, _)| e.name == name)
            .ok_or_else(|| Error::config(format!("checkpoint has no parameter '{name}'")))?;
        let tensor = Tensor::new(entry.shape.clone(), data.clone())?;
        let mut p = Parameter::new(entry.name.clone(), tensor);
        p.set_frozen(entry.frozen);
        Ok(p)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.meta.get(key).and_then(Value::as_u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_preserves_bits_and_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Parameter::new("a", Tensor::uniform(vec![3, 4], -2.0, 2.0, &mut rng));
        let b = Parameter::frozen_param("b", Tensor::uniform(vec![7], -1.0, 1.0, &mut rng));
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), Value::String("test".to_string()));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &meta, &[&a, &b]).unwrap();

        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.meta_str("kind"), Some("test"));
        assert_eq!(ck.names(), vec!["a", "b"]);
        let a2 = ck.param("a").unwrap();
        let b2 = ck.param("b").unwrap();
        assert!(!a2.frozen());
        assert!(b2.frozen());
        let bits = |p: &Parameter| -> Vec<u32> { p.value().data().iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&a2));
        assert_eq!(bits(&b), bits(&b2));
        assert_eq!(a2.value().shape(), &[3, 4]);
    }

    #[test]
    fn missing_parameter_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = Parameter::new("x", Tensor::vector(vec![1.0]));
        save_checkpoint(&path, &BTreeMap::new(), &[&p]).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert!(ck.param("nope").is_err());
    }
}
