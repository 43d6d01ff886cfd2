//! Binary parameter container.
//!
//! Layout: 4-byte magic `GTCK`, `u32` format version, `u64` manifest length,
//! the JSON manifest, then every tensor's raw little-endian bytes in manifest
//! order. Sections keep the encoder's trainable subset, its frozen base, the
//! decoder and optimizer state apart.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{ParamGroup, ParamId, ParamStore, Real, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GTCK";
pub const FORMAT_VERSION: u32 = 1;

pub const SECTION_TRAINABLE: &str = "encoder_trainable";
pub const SECTION_BASE: &str = "encoder_base";
pub const SECTION_DECODER: &str = "decoder";
pub const SECTION_OPTIMIZER: &str = "optimizer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<ParamGroup>,
    pub requires_grad: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    sections: BTreeMap<String, Vec<TensorEntry>>,
    metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
struct Stored {
    entry: TensorEntry,
    bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    sections: BTreeMap<String, Vec<Stored>>,
    pub metadata: serde_json::Value,
}

fn dtype_width(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self { sections: BTreeMap::new(), metadata }
    }

    pub fn section_names(&self) -> Vec<&str> {
        self.sections.keys().map(String::as_str).collect()
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    pub fn entries(&self, section: &str) -> Vec<&TensorEntry> {
        self.sections.get(section).map_or_else(Vec::new, |s| s.iter().map(|t| &t.entry).collect())
    }

    fn push(&mut self, section: &str, entry: TensorEntry, bytes: Vec<u8>) {
        self.sections.entry(section.to_string()).or_default().push(Stored { entry, bytes });
    }

    /// Stores parameters with their group and frozen flag.
    pub fn add_params<T: Real>(&mut self, section: &str, store: &ParamStore<T>, ids: &[ParamId]) {
        for &id in ids {
            let p = store.get(id);
            let mut bytes = Vec::with_capacity(p.value.len() * T::BYTES);
            for &x in p.value.data() {
                x.write_le(&mut bytes);
            }
            let entry = TensorEntry {
                name: p.name.clone(),
                dtype: T::DTYPE.to_string(),
                shape: p.value.shape().to_vec(),
                group: Some(p.group),
                requires_grad: p.requires_grad,
            };
            self.push(section, entry, bytes);
        }
    }

    pub fn add_f64(&mut self, section: &str, name: &str, data: &[f64]) {
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for &x in data {
            x.write_le(&mut bytes);
        }
        let entry =
            TensorEntry { name: name.to_string(), dtype: "f64".into(), shape: vec![data.len()], group: None, requires_grad: false };
        self.push(section, entry, bytes);
    }

    fn find(&self, section: &str, name: &str) -> Result<&Stored> {
        self.sections
            .get(section)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {section}")))?
            .iter()
            .find(|t| t.entry.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name} in {section}")))
    }

    pub fn f64_data(&self, section: &str, name: &str) -> Result<Vec<f64>> {
        let t = self.find(section, name)?;
        if t.entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!("{name} is {}, expected f64", t.entry.dtype)));
        }
        Ok(t.bytes.chunks_exact(8).map(f64::read_le).collect())
    }

    /// Copies every tensor of `section` into the same-named parameter of
    /// `store`, including its frozen flag. Shapes and dtype must match.
    pub fn load_params<T: Real>(&self, section: &str, store: &mut ParamStore<T>) -> Result<usize> {
        let tensors = self.sections.get(section).ok_or_else(|| Error::Checkpoint(format!("missing section {section}")))?;
        for t in tensors {
            let e = &t.entry;
            if e.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!("{} stored as {}, model uses {}", e.name, e.dtype, T::DTYPE)));
            }
            let id = store.id(&e.name).ok_or_else(|| Error::Checkpoint(format!("model has no parameter {}", e.name)))?;
            let p = store.get_mut(id);
            if p.value.shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    e.name,
                    e.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(e.shape.clone(), t.bytes.chunks_exact(T::BYTES).map(T::read_le).collect())?;
            p.requires_grad = e.requires_grad;
            p.grad = None;
        }
        Ok(tensors.len())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            sections: self
                .sections
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|t| t.entry.clone()).collect()))
                .collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for tensors in self.sections.values() {
            for t in tensors {
                out.extend_from_slice(&t.bytes);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let mut cursor = 16 + len;
        let mut sections = BTreeMap::new();
        for (name, entries) in manifest.sections {
            let mut stored = Vec::with_capacity(entries.len());
            for entry in entries {
                let size = entry.shape.iter().product::<usize>() * dtype_width(&entry.dtype)?;
                let data = bytes.get(cursor..cursor + size).ok_or_else(|| bad("truncated tensor data"))?;
                cursor += size;
                stored.push(Stored { entry, bytes: data.to_vec() });
            }
            sections.insert(name, stored);
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { sections, metadata: manifest.metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore<f64>, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::from_f64(vec![2, 2], &[1.0, -2.5, 3.25, 1e-300]).unwrap(), ParamGroup::Adapter, true);
        let b = s.add("b", Tensor::from_f64(vec![3], &[0.1, 0.2, 0.3]).unwrap(), ParamGroup::Decoder, false);
        (s, vec![a, b])
    }

    #[test]
    fn round_trip_preserves_values_and_flags() {
        let (s, ids) = store();
        let mut ck = Checkpoint::new(serde_json::json!({"step": 3}));
        ck.add_params(SECTION_TRAINABLE, &s, &ids[..1]);
        ck.add_params(SECTION_DECODER, &s, &ids[1..]);
        ck.add_f64(SECTION_OPTIMIZER, "m/a", &[0.5, 0.25]);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let (mut fresh, _) = store();
        fresh.get_mut(ids[0]).value = Tensor::zeros(&[2, 2]);
        fresh.set_requires_grad(ids[1], true);
        back.load_params(SECTION_TRAINABLE, &mut fresh).unwrap();
        back.load_params(SECTION_DECODER, &mut fresh).unwrap();
        assert_eq!(fresh.snapshot(), s.snapshot());
        assert!(!fresh.get(ids[1]).requires_grad);
        assert_eq!(back.f64_data(SECTION_OPTIMIZER, "m/a").unwrap(), vec![0.5, 0.25]);
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let (s, ids) = store();
        let mut ck = Checkpoint::new(serde_json::Value::Null);
        ck.add_params(SECTION_BASE, &s, &ids);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut other = ParamStore::<f64>::new();
        other.add("a", Tensor::zeros(&[4]), ParamGroup::Adapter, true);
        assert!(ck.load_params(SECTION_BASE, &mut other).is_err());
        let mut f32s = ParamStore::<f32>::new();
        f32s.add("a", Tensor::zeros(&[2, 2]), ParamGroup::Adapter, true);
        assert!(ck.load_params(SECTION_BASE, &mut f32s).is_err());
    }
}
