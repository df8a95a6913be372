//! Checkpoint format: magic `VQCK`, version, a UTF-8 config block, then
//! named f32 tensors (length-prefixed name, shape, little-endian data).
//! Files round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VQCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// `(name, shape, data)` in file order (sorted by name when built
    /// through [`from_tensors`](Self::from_tensors)).
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    /// Snapshot named f64 tensors as f32, sorted by name.
    pub fn from_tensors(config_text: &str, tensors: &BTreeMap<String, Tensor>) -> Self {
        let tensors = tensors
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    t.shape().to_vec(),
                    t.data().iter().map(|&v| v as f32).collect(),
                )
            })
            .collect();
        Self {
            config_text: config_text.to_string(),
            tensors,
        }
    }

    /// Widen back to f64 tensors keyed by name.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .map(|(name, shape, data)| {
                (
                    name.clone(),
                    Tensor::new(shape.clone(), data.iter().map(|&v| v as f64).collect()),
                )
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = self.config_text.as_bytes();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &self.tensors {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(shape.len() as u8).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        if u16::from_le_bytes(b2) != VERSION {
            return Err(Error::Format("unsupported checkpoint version".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let cfg_len = u32::from_le_bytes(b4) as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)?;
        let config_text = String::from_utf8(cfg)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b2)?;
            let name_len = u16::from_le_bytes(b2) as usize;
            let mut nb = vec![0u8; name_len];
            r.read_exact(&mut nb)?;
            let name = String::from_utf8(nb)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let mut b1 = [0u8; 1];
            r.read_exact(&mut b1)?;
            let ndim = b1[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                r.read_exact(&mut b4)?;
                shape.push(u32::from_le_bytes(b4) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut b4)?;
                data.push(f32::from_le_bytes(b4));
            }
            tensors.push((name, shape, data));
        }
        Ok(Self {
            config_text,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "b.w".to_string(),
            Tensor::new(vec![2, 3], vec![0.1, -0.5, 3.25, 0.0, 1e-7, 9.0]),
        );
        tensors.insert("a.bias".to_string(), Tensor::new(vec![2], vec![-1.0, 2.5]));
        let ck = Checkpoint::from_tensors("seed = 1\ntrain.lr = 0.00003\n", &tensors);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[0..4], b"VQCK");
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        // save(load(x)) == x at the byte level.
        let mut bytes2 = Vec::new();
        back.write_to(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
        // Names arrive sorted.
        assert_eq!(back.tensors[0].0, "a.bias");
    }

    #[test]
    fn f32_narrowing_is_stable_across_cycles() {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "w".to_string(),
            Tensor::new(vec![3], vec![std::f64::consts::PI, 1.0 / 3.0, 1e-12]),
        );
        let ck1 = Checkpoint::from_tensors("", &tensors);
        let widened = ck1.to_tensors();
        let ck2 = Checkpoint::from_tensors("", &widened);
        assert_eq!(ck1, ck2);
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(Checkpoint::read_from(&mut &b"VQTG\x01\x00"[..]).is_err());
    }
}
