//! Named-array container shared by packed datasets, checkpoints and cluster
//! models.
//!
//! The byte layout is the safetensors format: an 8-byte little-endian header
//! length, a JSON header describing every entry (dtype, shape, byte offsets)
//! plus a string metadata map, then the raw little-endian array data. The
//! metadata map carries exactly one key, `meta`, holding a JSON document.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        NamedArray {
            shape,
            data: ArrayData::F32(data),
        }
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        NamedArray {
            shape,
            data: ArrayData::F64(data),
        }
    }

    pub fn i64(shape: Vec<usize>, data: Vec<i64>) -> Self {
        NamedArray {
            shape,
            data: ArrayData::I64(data),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match &self.data {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self.data {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::I64(_) => Dtype::I64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayFile {
    pub meta: Option<serde_json::Value>,
    pub arrays: BTreeMap<String, NamedArray>,
}

impl ArrayFile {
    pub fn insert(&mut self, name: impl Into<String>, array: NamedArray) {
        self.arrays.insert(name.into(), array);
    }

    pub fn take(&mut self, name: &str) -> Result<NamedArray> {
        self.arrays
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing array entry `{name}`")))
    }

    pub fn take_f32(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        match self.take(name)? {
            NamedArray {
                shape,
                data: ArrayData::F32(v),
            } => Ok((shape, v)),
            _ => Err(Error::Format(format!("entry `{name}` is not f32"))),
        }
    }

    pub fn take_f64(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        match self.take(name)? {
            NamedArray {
                shape,
                data: ArrayData::F64(v),
            } => Ok((shape, v)),
            _ => Err(Error::Format(format!("entry `{name}` is not f64"))),
        }
    }

    pub fn take_i64(&mut self, name: &str) -> Result<(Vec<usize>, Vec<i64>)> {
        match self.take(name)? {
            NamedArray {
                shape,
                data: ArrayData::I64(v),
            } => Ok((shape, v)),
            _ => Err(Error::Format(format!("entry `{name}` is not i64"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let owned: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = self
            .arrays
            .iter()
            .map(|(k, a)| (k.clone(), a.dtype(), a.shape.clone(), a.bytes()))
            .collect();
        let views = owned
            .iter()
            .map(|(k, dtype, shape, bytes)| Ok((k.clone(), TensorView::new(*dtype, shape.clone(), bytes)?)))
            .collect::<Result<Vec<_>>>()?;
        let info = match &self.meta {
            Some(meta) => Some(HashMap::from([("meta".to_string(), serde_json::to_string(meta)?)])),
            None => None,
        };
        Ok(safetensors::serialize(views, info)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes)?;
        let meta = match header.metadata().as_ref().and_then(|m| m.get("meta")) {
            Some(s) => Some(serde_json::from_str(s)?),
            None => None,
        };
        let tensors = SafeTensors::deserialize(bytes)?;
        let mut arrays = BTreeMap::new();
        for (name, view) in tensors.iter() {
            let raw = view.data();
            let data = match view.dtype() {
                Dtype::F32 => ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::F64 => ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::I64 => ArrayData::I64(
                    raw.chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => {
                    return Err(Error::Format(format!(
                        "entry `{name}` has unsupported dtype {other:?}"
                    )))
                }
            };
            arrays.insert(
                name.to_string(),
                NamedArray {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(ArrayFile { meta, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
