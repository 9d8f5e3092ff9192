//! Named parameter storage with a deterministic flat ordering, plus the
//! binary checkpoint format.
//!
//! # Checkpoint layout (version 1)
//!
//! All integers little-endian:
//!
//! ```text
//! magic   4 bytes  b"NFPC"
//! version u16      1
//! count   u32      number of entries
//! entry*  group    u16 length + UTF-8 bytes
//!         name     u16 length + UTF-8 bytes
//!         flags    u8  bit 0 = trainable
//!         rows     u64
//!         cols     u64
//!         values   rows*cols f64, row-major, raw IEEE-754 bits
//! ```
//!
//! Round-trips are bit-exact: values are written and read as raw bit
//! patterns, never reformatted.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NFPC";
const VERSION: u16 = 1;

/// Index of a parameter entry; doubles as the gradient slot on the tape.
pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub group: String,
    pub name: String,
    pub tensor: Tensor,
    /// Running statistics and other state are stored but not optimized.
    pub trainable: bool,
}

/// All tensors of one model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, group: &str, name: &str, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            group: group.to_string(),
            name: name.to_string(),
            tensor,
            trainable: true,
        });
        self.entries.len() - 1
    }

    pub fn push_state(&mut self, group: &str, name: &str, tensor: Tensor) -> ParamId {
        let id = self.push(group, name, tensor);
        self.entries[id].trainable = false;
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].tensor
    }

    /// Bind a trainable entry into the tape as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Result<Var> {
        tape.param(self.entries[id].tensor.clone(), id)
    }

    /// Bind an entry as a constant: used when a trained model is frozen.
    pub fn bind_frozen(&self, tape: &mut Tape, id: ParamId) -> Result<Var> {
        tape.leaf(self.entries[id].tensor.clone())
    }

    /// Count of trainable scalars per group, in first-appearance order.
    pub fn census(&self) -> Vec<(String, usize)> {
        let mut order: Vec<String> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for e in &self.entries {
            if !e.trainable {
                continue;
            }
            match order.iter().position(|g| *g == e.group) {
                Some(i) => counts[i] += e.tensor.len(),
                None => {
                    order.push(e.group.clone());
                    counts.push(e.tensor.len());
                }
            }
        }
        order.into_iter().zip(counts).collect()
    }

    pub fn total_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    /// Order-sensitive checksum over all raw value bits; used to verify that
    /// a frozen model was not mutated.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in &self.entries {
            feed(e.group.as_bytes());
            feed(e.name.as_bytes());
            for v in e.tensor.data() {
                feed(&v.to_le_bytes());
            }
        }
        h
    }

    // ── Checkpoint serialization ─────────────────────────────────────

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            write_str(&mut w, &e.group)?;
            write_str(&mut w, &e.name)?;
            w.write_all(&[u8::from(e.trainable)])?;
            w.write_all(&(e.tensor.rows() as u64).to_le_bytes())?;
            w.write_all(&(e.tensor.cols() as u64).to_le_bytes())?;
            for v in e.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::parse("checkpoint", "bad magic"));
        }
        let version = read_u16(&mut r)?;
        if version != VERSION {
            return Err(Error::parse("checkpoint", format!("unsupported version {}", version)));
        }
        let count = read_u32(&mut r)? as usize;
        // Guard against absurd counts before allocating.
        if count > 1_000_000 {
            return Err(Error::parse("checkpoint", format!("entry count {} too large", count)));
        }
        let mut set = ParamSet::new();
        for _ in 0..count {
            let group = read_str(&mut r)?;
            let name = read_str(&mut r)?;
            let mut flags = [0u8; 1];
            read_exact(&mut r, &mut flags)?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|&n| n <= 64 * 1024 * 1024)
                .ok_or_else(|| Error::parse("checkpoint", format!("tensor {}x{} too large", rows, cols)))?;
            let mut data = vec![0.0f64; n];
            for v in &mut data {
                let mut buf = [0u8; 8];
                read_exact(&mut r, &mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            let tensor = Tensor::from_vec(rows, cols, data)?;
            let id = set.push(&group, &name, tensor);
            set.entries[id].trainable = flags[0] & 1 != 0;
        }
        Ok(set)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    let bytes = s.as_bytes();
    debug_assert!(bytes.len() <= u16::MAX as usize);
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::parse("checkpoint", "truncated"))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u16(r)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::parse("checkpoint", "non-UTF8 name"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut set = ParamSet::new();
        set.push("encoder", "w1", Tensor::from_vec(2, 3, vec![1.0, -0.0, 1e-300, f64::MIN_POSITIVE, 2.5, -7.25]).unwrap());
        set.push_state("tabular", "bn_mean", Tensor::row(&[0.1, 0.2]));
        let mut buf = Vec::new();
        set.write_checkpoint(&mut buf).unwrap();
        let back = ParamSet::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in set.entries().iter().zip(back.entries()) {
            assert_eq!(a.group, b.group);
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // And the serialized form itself round-trips byte-for-byte.
        let mut buf2 = Vec::new();
        back.write_checkpoint(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut set = ParamSet::new();
        set.push("g", "t", Tensor::row(&[1.0, 2.0]));
        let mut buf = Vec::new();
        set.write_checkpoint(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamSet::read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn census_groups_in_order() {
        let mut set = ParamSet::new();
        set.push("encoder", "w1", Tensor::zeros(2, 3));
        set.push("head", "w", Tensor::zeros(4, 1));
        set.push("encoder", "w2", Tensor::zeros(1, 5));
        set.push_state("tabular", "bn_mean", Tensor::zeros(1, 2));
        let census = set.census();
        assert_eq!(census, vec![("encoder".to_string(), 11), ("head".to_string(), 4)]);
        assert_eq!(set.total_trainable(), 15);
    }
}
