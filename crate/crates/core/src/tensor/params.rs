use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

pub const MANIFEST_FORMAT: &str = "kernelpan-params";
pub const MANIFEST_VERSION: u32 = 1;

/// A trainable tensor and its accumulated gradient (`None` once cleared).
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named parameters keyed by dot-separated paths, iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: BTreeMap<String, Param<T>>,
}

/// One record of the on-disk manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the buffer file.
    pub offset: usize,
}

/// JSON manifest accompanying the raw little-endian parameter buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamManifest {
    pub format: String,
    pub version: u32,
    /// File name of the buffer, relative to the manifest.
    pub buffer: String,
    pub total_bytes: usize,
    pub entries: Vec<ParamEntry>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { value, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != grad.shape() {
            return Err(shape_err!(
                "gradient {:?} does not match parameter `{name}` {:?}",
                grad.shape(),
                p.value.shape()
            ));
        }
        match &mut p.grad {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Multiplies every present gradient by `factor`.
    pub fn scale_grads(&mut self, factor: T) {
        for g in self.params.values_mut().filter_map(|p| p.grad.as_mut()) {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(Tensor::cast),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Serializes values into a manifest plus a contiguous little-endian buffer.
    pub fn to_bytes(&self, buffer_name: &str) -> (ParamManifest, Vec<u8>) {
        let mut bytes = Vec::with_capacity(self.num_elements() * T::BYTES);
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, p) in &self.params {
            entries.push(ParamEntry {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
                offset: bytes.len(),
            });
            for &v in p.value.data() {
                v.write_le(&mut bytes);
            }
        }
        let manifest = ParamManifest {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            buffer: buffer_name.to_string(),
            total_bytes: bytes.len(),
            entries,
        };
        (manifest, bytes)
    }

    pub fn from_bytes(manifest: &ParamManifest, bytes: &[u8]) -> Result<Self> {
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "unsupported parameter manifest {} v{}",
                manifest.format, manifest.version
            )));
        }
        if bytes.len() != manifest.total_bytes {
            return Err(Error::Data(format!(
                "parameter buffer has {} bytes, manifest says {}",
                bytes.len(),
                manifest.total_bytes
            )));
        }
        let mut set = ParamSet::new();
        for e in &manifest.entries {
            if e.dtype != T::DTYPE {
                return Err(Error::Data(format!(
                    "parameter `{}` stored as {}, expected {}",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * T::BYTES;
            let chunk = bytes.get(e.offset..end).ok_or_else(|| {
                Error::Data(format!("parameter `{}` runs past the buffer", e.name))
            })?;
            let data = chunk.chunks_exact(T::BYTES).map(T::read_le).collect();
            set.insert(e.name.clone(), Tensor::new(&e.shape, data)?)?;
        }
        Ok(set)
    }

    /// Writes `<stem>.json` and `<stem>.bin` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let buffer_name = format!("{stem}.bin");
        let (manifest, bytes) = self.to_bytes(&buffer_name);
        let manifest_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        let buf_path = dir.join(&buffer_name);
        fs::write(&buf_path, bytes).map_err(|e| Error::io(&buf_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let manifest_path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: ParamManifest = serde_json::from_str(&text)?;
        let buf_path = dir.join(&manifest.buffer);
        let bytes = fs::read(&buf_path).map_err(|e| Error::io(&buf_path, e))?;
        Self::from_bytes(&manifest, &bytes)
    }
}
