//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SSCKPT\0\0"
//! version    u32      1
//! header_len u64
//! header     JSON     {"dtype", "meta", "tensors": [{"name", "kind", "shape", "offset", "len"}]}
//! data       dtype-sized little-endian values; offsets count elements
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SSCKPT\0\0";
pub const VERSION: u32 = 1;

/// Role of a stored tensor: a model parameter of some kind, or auxiliary
/// state such as optimizer moments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Param(ParamKind),
    Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: Slot,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: Value,
    pub params: ParamStore<T>,
    pub extra: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(meta: Value, params: ParamStore<T>) -> Self {
        Checkpoint {
            meta,
            params,
            extra: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, kind: Slot, t: &Tensor<T>| {
            tensors.push(Entry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        };
        for (name, kind, t) in self.params.iter() {
            push(name, Slot::Param(kind), t);
        }
        for (name, t) in &self.extra {
            push(name, Slot::Extra, t);
        }
        let header = Header {
            dtype: T::DTYPE.to_string(),
            meta: self.meta.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header)?;

        let tmp = path.with_extension("tmp");
        let io = |e| Error::io(&tmp, e);
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
            w.write_all(MAGIC).map_err(io)?;
            w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
            w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&header).map_err(io)?;
            let values = self
                .params
                .iter()
                .map(|(_, _, t)| t)
                .chain(self.extra.values())
                .flat_map(|t| t.data().iter());
            for &v in values {
                match T::DTYPE {
                    "f32" => w.write_all(&(v.as_f64() as f32).to_le_bytes()),
                    _ => w.write_all(&v.as_f64().to_le_bytes()),
                }
                .map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint, converting stored values to `T` if the stored
    /// dtype differs.
    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let bad = |msg: String| Error::format(path, msg);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated file".into()))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|_| bad("truncated file".into()))?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(|_| bad("truncated file".into()))?;
        let header_len = u64::from_le_bytes(u64b) as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header).map_err(|_| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| bad(format!("bad header: {e}")))?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(bad(format!("unknown dtype {other}"))),
        };
        let mut data = Vec::new();
        r.read_to_end(&mut data).map_err(io)?;
        let total: usize = header.tensors.iter().map(|e| e.len).sum();
        if data.len() != total * width {
            return Err(bad(format!(
                "data section has {} bytes, expected {}",
                data.len(),
                total * width
            )));
        }
        let value = |i: usize| -> T {
            let b = &data[i * width..(i + 1) * width];
            if width == 4 {
                T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            } else {
                T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes")))
            }
        };
        let mut params = ParamStore::new();
        let mut extra = BTreeMap::new();
        for e in &header.tensors {
            if e.offset + e.len > total || e.shape.iter().product::<usize>() != e.len {
                return Err(bad(format!("tensor {} has an invalid extent", e.name)));
            }
            let t = Tensor::from_vec(&e.shape, (e.offset..e.offset + e.len).map(value).collect())?;
            match e.kind {
                Slot::Param(kind) => params.insert(&e.name, kind, t)?,
                Slot::Extra => {
                    extra.insert(e.name.clone(), t);
                }
            }
        }
        Ok(Checkpoint {
            meta: header.meta,
            params,
            extra,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut params = ParamStore::new();
        params
            .insert("w", ParamKind::Weight, Tensor::from_vec(&[2, 2], vec![1.5, -2.0, 0.25, 3.0]).unwrap())
            .unwrap();
        params
            .insert("bn.running_mean", ParamKind::Buffer, Tensor::from_vec(&[1], vec![0.1]).unwrap())
            .unwrap();
        let mut c = Checkpoint::new(serde_json::json!({"model": "toy", "seed": 3}), params);
        c.extra.insert("m/w".into(), Tensor::full(&[2, 2], 0.5));
        c
    }

    #[test]
    fn round_trip_is_exact_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let c = sample();
        c.save(&a).unwrap();
        assert_eq!(Checkpoint::<f32>::load(&a).unwrap(), c);
        c.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let wide = Checkpoint::<f64>::load(&a).unwrap();
        assert_eq!(wide.params.get("w").unwrap().data()[2], 0.25);
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(Checkpoint::<f32>::load(&p).is_err());
        sample().save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(Checkpoint::<f32>::load(&p), Err(Error::Format { .. })));
    }
}
