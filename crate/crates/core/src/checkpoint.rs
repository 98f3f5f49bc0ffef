//! Named-tensor checkpoint container.
//!
//! Layout: magic `EBRCK1`, u32 length + UTF-8 JSON config block, u32
//! section count, then per section a u32 name length, the name, u32 rank,
//! u32 dims, and the float32 payload. All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{EbrError, Result};

const MAGIC: &[u8; 6] = b"EBRCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| EbrError::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(EbrError::Format("truncated checkpoint".into()));
    }
    Ok(buf)
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Self { config, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: impl IntoIterator<Item = f32>) {
        self.tensors.push(Tensor { name: name.into(), shape, values: values.into_iter().collect() });
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[f64]) {
        self.push(name, shape, values.iter().map(|&v| v as f32));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| EbrError::Format(format!("checkpoint has no tensor {name:?}")))
    }

    /// Tensor values widened to f64 after checking the element count.
    pub fn get_f64(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let t = self.get(name)?;
        if t.values.len() != len {
            return Err(EbrError::Format(format!("tensor {name:?} has {} values, expected {len}", t.values.len())));
        }
        Ok(t.values.iter().map(|&v| v as f64).collect())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        let cfg = serde_json::to_vec(&self.config)?;
        put_u32(&mut w, cfg.len())?;
        w.write_all(&cfg)?;
        put_u32(&mut w, self.tensors.len())?;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.values.len() {
                return Err(EbrError::Format(format!("tensor {:?} shape does not match its payload", t.name)));
            }
            put_u32(&mut w, t.name.len())?;
            w.write_all(t.name.as_bytes())?;
            put_u32(&mut w, t.shape.len())?;
            for &d in &t.shape {
                put_u32(&mut w, d)?;
            }
            for v in &t.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(|_| EbrError::Format("missing checkpoint magic".into()))?;
        if &magic != MAGIC {
            return Err(EbrError::Format("bad checkpoint magic".into()));
        }
        let n = get_u32(&mut r)?;
        let config = serde_json::from_slice(&get_bytes(&mut r, n)?)?;
        let count = get_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let n = get_u32(&mut r)?;
            let name = String::from_utf8(get_bytes(&mut r, n)?).map_err(|_| EbrError::Format("tensor name is not UTF-8".into()))?;
            let rank = get_u32(&mut r)?;
            let shape = (0..rank).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = get_bytes(&mut r, len * 4)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor { name, shape, values });
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut c = Checkpoint::new(serde_json::json!({"kind": "test", "dim": 2}));
        c.push("a", vec![2, 3], (0..6).map(|v| v as f32 * 0.5));
        c.push_f64("b", vec![1], &[-1.25]);
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        assert_eq!(&buf[..6], b"EBRCK1");
        let back = Checkpoint::read(&buf[..]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get_f64("b", 1).unwrap(), vec![-1.25]);
        assert!(back.get("missing").is_err());
        assert!(back.get_f64("a", 5).is_err());
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Checkpoint::new(serde_json::json!({}));
        c.push("a", vec![4], [1.0, 2.0, 3.0, 4.0]);
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        assert!(Checkpoint::read(&buf[..buf.len() - 2]).is_err());
        buf[0] = b'X';
        assert!(Checkpoint::read(&buf[..]).is_err());
        let bad = Checkpoint { config: serde_json::json!({}), tensors: vec![Tensor { name: "x".into(), shape: vec![3], values: vec![1.0] }] };
        assert!(bad.write(Vec::new()).is_err());
    }
}
