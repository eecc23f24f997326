//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "PNETCKPT"
//! version    u32
//! metadata   u32 length + UTF-8 (a JSON document)
//! tensors    u32 count, then per tensor:
//!              name (u32 length + UTF-8), dims 4 × u32, values f32 × product(dims)
//! adam       u8 present flag, then if present:
//!              step u64, lr/beta1/beta2/eps/weight_decay f64 × 5,
//!              u32 count, per entry: name, u64 length, first f32 × len, second f32 × len
//! seed       u64
//! epoch      u32
//! ```
//!
//! A checkpoint re-serializes to exactly the bytes it was read from.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::adam::{Adam, AdamConfig, Moments};
use crate::tensor::{Dims, Scalar, Tensor};
use crate::{EngineError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PNETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Dims,
    pub values: Vec<f32>,
}

impl NamedTensor {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        Self {
            name: name.to_owned(),
            dims: t.dims(),
            values: t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self, expected: Dims) -> Result<Tensor<T>> {
        if self.dims != expected {
            return Err(EngineError::Format(format!(
                "tensor `{}` has dims {:?}, expected {expected:?}",
                self.name, self.dims
            )));
        }
        Tensor::new(self.dims, self.values.iter().map(|&v| T::lit(v as f64)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSnapshot {
    pub config: AdamConfig,
    pub step_count: u64,
    pub moments: Vec<(String, Moments<f32>)>,
}

impl AdamSnapshot {
    pub fn capture(adam: &Adam<f32>) -> Self {
        Self {
            config: adam.config,
            step_count: adam.step_count(),
            moments: adam.moments().iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn restore(&self) -> Adam<f32> {
        let moments: BTreeMap<_, _> = self.moments.iter().cloned().collect();
        Adam::from_parts(self.config, self.step_count, moments)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<NamedTensor>,
    pub adam: Option<AdamSnapshot>,
    pub seed: u64,
    pub epoch: u32,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_str(w, &self.metadata)?;
        write_u32(w, self.tensors.len())?;
        for t in &self.tensors {
            write_str(w, &t.name)?;
            for d in t.dims {
                write_u32(w, d)?;
            }
            write_f32s(w, &t.values)?;
        }
        match &self.adam {
            None => w.write_all(&[0])?,
            Some(a) => {
                w.write_all(&[1])?;
                w.write_all(&a.step_count.to_le_bytes())?;
                let c = a.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                    w.write_all(&v.to_le_bytes())?;
                }
                write_u32(w, a.moments.len())?;
                for (name, m) in &a.moments {
                    write_str(w, name)?;
                    w.write_all(&(m.first.len() as u64).to_le_bytes())?;
                    write_f32s(w, &m.first)?;
                    write_f32s(w, &m.second)?;
                }
            }
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(EngineError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(EngineError::Format(format!("unsupported checkpoint version {version}")));
        }
        let metadata = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| EngineError::Format(format!("tensor `{name}` dims overflow")))?;
            let values = r.f32s(len)?;
            tensors.push(NamedTensor { name, dims, values });
        }
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step_count = r.u64()?;
                let mut h = [0f64; 5];
                for v in &mut h {
                    *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                }
                let n = r.u32()? as usize;
                let mut moments = Vec::with_capacity(n.min(1 << 16));
                for _ in 0..n {
                    let name = r.string()?;
                    let len = r.u64()? as usize;
                    let first = r.f32s(len)?;
                    let second = r.f32s(len)?;
                    moments.push((name, Moments { first, second }));
                }
                Some(AdamSnapshot {
                    config: AdamConfig {
                        lr: h[0],
                        beta1: h[1],
                        beta2: h[2],
                        eps: h[3],
                        weight_decay: h[4],
                    },
                    step_count,
                    moments,
                })
            }
            other => return Err(EngineError::Format(format!("bad optimizer flag {other}"))),
        };
        let seed = r.u64()?;
        let epoch = r.u32()?;
        if r.pos != bytes.len() {
            return Err(EngineError::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            metadata,
            tensors,
            adam,
            seed,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| EngineError::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| EngineError::Format("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| EngineError::Format(e.to_string()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| EngineError::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
