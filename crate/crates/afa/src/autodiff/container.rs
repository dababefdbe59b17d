//! Named-tensor container file.
//!
//! Layout: 8-byte magic `AFATNSR1`, u32 entry count, then per entry a
//! length-prefixed UTF-8 name, a dtype tag (0 = f64, 1 = f32), a u32 rank,
//! u64 dimension sizes and the raw little-endian values. All integers are
//! little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"AFATNSR1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            _ => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }
}

/// Ordered collection of named tensors. Entries keep insertion-independent
/// (sorted) order so serialization is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    entries: BTreeMap<String, (Dtype, Tensor)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), (Dtype::F64, tensor));
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), (Dtype::F32, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, (_, t))| (k.as_str(), t))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, (dtype, tensor)) in &self.entries {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[dtype.tag()])?;
            w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match dtype {
                Dtype::F64 => {
                    for &v in tensor.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Dtype::F32 => {
                    for &v in tensor.data() {
                        w.write_all(&(v as f32).to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic; not a tensor container".into()));
        }
        let count = read_u32(r)? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let dtype = Dtype::from_tag(tag[0])?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            match dtype {
                Dtype::F64 => {
                    let mut buf = [0u8; 8];
                    for _ in 0..n {
                        r.read_exact(&mut buf)?;
                        data.push(f64::from_le_bytes(buf));
                    }
                }
                Dtype::F32 => {
                    let mut buf = [0u8; 4];
                    for _ in 0..n {
                        r.read_exact(&mut buf)?;
                        data.push(f32::from_le_bytes(buf) as f64);
                    }
                }
            }
            entries.insert(name, (dtype, Tensor::new(shape, data)?));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::util::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_for_f64() {
        let mut c = TensorContainer::new();
        c.insert("w", Tensor::matrix(2, 3, vec![1.0, -2.5, 3e-17, f64::MIN_POSITIVE, 4.0, 5.0]).unwrap());
        c.insert("b", Tensor::vector(&[0.1, 0.2]));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = TensorContainer::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(c, back);
        for (name, t) in c.iter() {
            let u = back.get(name).unwrap();
            for (a, b) in t.data().iter().zip(u.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn f32_entries_round_trip_at_reduced_precision() {
        let mut c = TensorContainer::new();
        c.insert_f32("w", Tensor::vector(&[0.1, 0.2, 0.3]));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = TensorContainer::read_from(&mut buf.as_slice()).unwrap();
        for (a, b) in [0.1f64, 0.2, 0.3].iter().zip(back.get("w").unwrap().data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_garbage() {
        let garbage = b"NOTATENSORFILE..".to_vec();
        assert!(TensorContainer::read_from(&mut garbage.as_slice()).is_err());
    }
}
