//! Self-describing pipeline container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   8 bytes  "SALPIPE\0"
//! version u32
//! count   u32
//! blob*   name_len u32 | name utf-8 | dtype u8 | ndim u8
//!         | dims u64 x ndim | payload_len u64 | payload bytes
//! ```
//!
//! Fitted models flatten into named, typed tensors so heterogeneous parts
//! (filter banks, tree ensembles, linear weights) stay decoupled. Round
//! trips are bit-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SalError};

const MAGIC: [u8; 8] = *b"SALPIPE\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    I64 = 2,
    U8 = 3,
}

impl Dtype {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::I64),
            3 => Ok(Dtype::U8),
            other => Err(SalError::CorruptFormat(format!("unknown dtype tag {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::I64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::F64(_) => Dtype::F64,
            Payload::I64(_) => Dtype::I64,
            Payload::U8(_) => Dtype::U8,
        }
    }
}

impl PartialEq for Payload {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Payload::F32(a), Payload::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Payload::F64(a), Payload::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Payload::I64(a), Payload::I64(b)) => a == b,
            (Payload::U8(a), Payload::U8(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl TensorBlob {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, payload: Payload) -> Self {
        let blob = Self { name: name.into(), shape, payload };
        debug_assert_eq!(blob.shape.iter().product::<usize>(), blob.payload.len());
        blob
    }
}

/// An ordered collection of named tensors plus a format version.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainedPipeline {
    blobs: Vec<TensorBlob>,
    index: BTreeMap<String, usize>,
}

impl TrainedPipeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blobs.iter().map(|b| b.name.as_str())
    }

    pub fn insert(&mut self, blob: TensorBlob) -> Result<()> {
        if self.index.contains_key(&blob.name) {
            return Err(SalError::InvalidInput(format!("duplicate blob name {:?}", blob.name)));
        }
        self.index.insert(blob.name.clone(), self.blobs.len());
        self.blobs.push(blob);
        Ok(())
    }

    pub fn put_f32(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        self.insert(TensorBlob::new(name, shape, Payload::F32(data)))
    }

    pub fn put_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        self.insert(TensorBlob::new(name, shape, Payload::F64(data)))
    }

    pub fn put_i64(&mut self, name: &str, shape: Vec<usize>, data: Vec<i64>) -> Result<()> {
        self.insert(TensorBlob::new(name, shape, Payload::I64(data)))
    }

    pub fn put_u8(&mut self, name: &str, shape: Vec<usize>, data: Vec<u8>) -> Result<()> {
        self.insert(TensorBlob::new(name, shape, Payload::U8(data)))
    }

    pub fn get(&self, name: &str) -> Result<&TensorBlob> {
        self.index
            .get(name)
            .map(|&i| &self.blobs[i])
            .ok_or_else(|| SalError::CorruptFormat(format!("missing blob {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get_f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        match self.get(name)? {
            TensorBlob { shape, payload: Payload::F32(v), .. } => Ok((shape, v)),
            _ => Err(SalError::CorruptFormat(format!("blob {name:?} is not f32"))),
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            TensorBlob { shape, payload: Payload::F64(v), .. } => Ok((shape, v)),
            _ => Err(SalError::CorruptFormat(format!("blob {name:?} is not f64"))),
        }
    }

    pub fn get_i64(&self, name: &str) -> Result<(&[usize], &[i64])> {
        match self.get(name)? {
            TensorBlob { shape, payload: Payload::I64(v), .. } => Ok((shape, v)),
            _ => Err(SalError::CorruptFormat(format!("blob {name:?} is not i64"))),
        }
    }

    pub fn get_u8(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.get(name)? {
            TensorBlob { shape, payload: Payload::U8(v), .. } => Ok((shape, v)),
            _ => Err(SalError::CorruptFormat(format!("blob {name:?} is not u8"))),
        }
    }

    /// A scalar i64 convenience accessor.
    pub fn get_scalar_i64(&self, name: &str) -> Result<i64> {
        let (_, v) = self.get_i64(name)?;
        v.first().copied().ok_or_else(|| SalError::CorruptFormat(format!("blob {name:?} is empty")))
    }
}

pub fn save_pipeline(pipeline: &TrainedPipeline, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(pipeline.blobs.len() as u32).to_le_bytes())?;
    for blob in &pipeline.blobs {
        w.write_all(&(blob.name.len() as u32).to_le_bytes())?;
        w.write_all(blob.name.as_bytes())?;
        w.write_all(&[blob.payload.dtype() as u8, blob.shape.len() as u8])?;
        for &d in &blob.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let payload_len = match &blob.payload {
            Payload::F32(v) => v.len() * 4,
            Payload::F64(v) => v.len() * 8,
            Payload::I64(v) => v.len() * 8,
            Payload::U8(v) => v.len(),
        };
        w.write_all(&(payload_len as u64).to_le_bytes())?;
        match &blob.payload {
            Payload::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Payload::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Payload::I64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Payload::U8(v) => w.write_all(v)?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_pipeline(path: &Path) -> Result<TrainedPipeline> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(SalError::CorruptFormat("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version > FORMAT_VERSION {
        return Err(SalError::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
    }
    let count = read_u32(&mut r)? as usize;

    let mut pipeline = TrainedPipeline::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| SalError::CorruptFormat("blob name is not utf-8".into()))?;

        let mut head = [0u8; 2];
        read_exact(&mut r, &mut head)?;
        let dtype = Dtype::from_tag(head[0])?;
        let ndim = head[1] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let payload_len = read_u64(&mut r)? as usize;
        let mut bytes = vec![0u8; payload_len];
        read_exact(&mut r, &mut bytes)?;

        let payload = decode_payload(dtype, &bytes)?;
        let expected: usize = shape.iter().product();
        if payload.len() != expected {
            return Err(SalError::CorruptFormat(format!(
                "blob {name:?}: payload has {} elements, shape implies {}",
                payload.len(),
                expected
            )));
        }
        pipeline.insert(TensorBlob { name, shape, payload })?;
    }
    Ok(pipeline)
}

fn decode_payload(dtype: Dtype, bytes: &[u8]) -> Result<Payload> {
    let elem = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 | Dtype::I64 => 8,
        Dtype::U8 => 1,
    };
    if bytes.len() % elem != 0 {
        return Err(SalError::CorruptFormat("payload length misaligned".into()));
    }
    Ok(match dtype {
        Dtype::F32 => Payload::F32(
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        Dtype::F64 => Payload::F64(
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        Dtype::I64 => Payload::I64(
            bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        Dtype::U8 => Payload::U8(bytes.to_vec()),
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| SalError::CorruptFormat("truncated file".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
