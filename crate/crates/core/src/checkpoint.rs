//! Named parameter collections and the "ISGE" checkpoint format.
//!
//! A checkpoint is self-contained for inference: model tensors, hash seeds,
//! and the config values needed to rebuild the encoder all travel in one
//! file. Seeds and config scalars ride along as `meta.`-prefixed pseudo
//! parameters so the format stays a flat list of named tensors.
//!
//! Layout (little-endian): magic "ISGE", version u32, count u32, then per
//! tensor: name length u16 + UTF-8 name, rank u8, dims u32 each, f32 data.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"ISGE";
const VERSION: u32 = 1;

/// Ordered collection of uniquely named tensors. Order is insertion order
/// and is part of the contract: optimizers and the trainer walk parameters
/// in this order, and the checkpoint file preserves it.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Input(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Input(format!("missing parameter {name:?}")))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        match self.index.get(name) {
            Some(&i) => {
                self.entries[i].1 = tensor;
                Ok(())
            }
            None => Err(Error::Input(format!("missing parameter {name:?}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar count across all non-meta entries.
    pub fn scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| !n.starts_with("meta."))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Convert element type (f32 ↔ f64), preserving names and order.
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let mut out = Params::new();
        for (name, t) in &self.entries {
            let data: Vec<U> = t.data().iter().map(|&x| U::from_f64(x.as_f64())).collect();
            out.insert(name, Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
        }
        out
    }

    /// Store a u64 losslessly as eight byte-valued f32s.
    pub fn insert_meta_u64(&mut self, name: &str, value: u64) -> Result<()> {
        let bytes = value.to_le_bytes();
        let data: Vec<T> = bytes.iter().map(|&b| T::from_f64(b as f64)).collect();
        self.insert(name, Tensor::vector(data))
    }

    pub fn get_meta_u64(&self, name: &str) -> Result<u64> {
        let t = self.get(name)?;
        if t.len() != 8 {
            return Err(Error::Format(format!(
                "meta entry {name:?} has {} elements, expected 8",
                t.len()
            )));
        }
        let mut bytes = [0u8; 8];
        for (i, x) in t.data().iter().enumerate() {
            let v = x.as_f64();
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::Format(format!(
                    "meta entry {name:?} holds non-byte value {v}"
                )));
            }
            bytes[i] = v as u8;
        }
        Ok(u64::from_le_bytes(bytes))
    }

    /// Store a small non-negative integer (exact in f32 below 2^24).
    pub fn insert_meta_usize(&mut self, name: &str, value: usize) -> Result<()> {
        if value >= (1 << 24) {
            return Err(Error::Input(format!(
                "meta integer {name:?} = {value} too large for exact f32 storage"
            )));
        }
        self.insert(name, Tensor::vector(vec![T::from_f64(value as f64)]))
    }

    pub fn get_meta_usize(&self, name: &str) -> Result<usize> {
        let t = self.get(name)?;
        let v = t.data()[0].as_f64();
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Format(format!("meta entry {name:?} holds non-integer {v}")));
        }
        Ok(v as usize)
    }

    pub fn insert_meta_flag(&mut self, name: &str, value: bool) -> Result<()> {
        self.insert_meta_usize(name, usize::from(value))
    }

    pub fn get_meta_flag(&self, name: &str) -> Result<bool> {
        Ok(self.get_meta_usize(name)? != 0)
    }
}

pub fn write_checkpoint<T: Scalar>(path: &Path, params: &Params<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: {name:?}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let rank = t.rank();
        if rank > u8::MAX as usize {
            return Err(Error::Format(format!("rank {rank} too large")));
        }
        w.write_all(&[rank as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.as_f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Params<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = read_u32(&mut r, "tensor count")?;
    let mut params = Params::new();
    for i in 0..count {
        let name_len = read_u16(&mut r, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Format(format!("tensor {i} name not UTF-8: {e}")))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r, "dimension")? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0f32; len];
        for x in data.iter_mut() {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, "tensor data")?;
            *x = f32::from_le_bytes(b);
        }
        params.insert(&name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("checkpoint truncated reading {what}: {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}
