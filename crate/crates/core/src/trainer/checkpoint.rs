//! Binary container of named `f32` arrays.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "IVIC" | version | count | count × entry | crc32
//! entry = name_len | name (UTF-8) | dtype | rank | rank × dim | payload (f32 LE)
//! ```
//!
//! The checksum covers every byte before it.

use std::path::Path;

use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IVIC";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Every parameter of `store`, in registration order.
    pub fn from_store(store: &ParamStore<f32>) -> Self {
        Self::from_store_filtered(store, |_| true)
    }

    pub fn from_store_filtered(store: &ParamStore<f32>, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            entries: store
                .iter()
                .filter(|(_, p)| keep(&p.name))
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put(&mut out, VERSION);
        put(&mut out, self.entries.len() as u32);
        for (name, t) in &self.entries {
            put(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put(&mut out, DTYPE_F32);
            put(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put(&mut out, d as u32);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        put(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u32()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("`{name}`: unknown dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies entries into `store`. Every entry must name a parameter of the
    /// same shape, and every store parameter selected by `expect` must be
    /// present in the checkpoint.
    pub fn restore(&self, store: &mut ParamStore<f32>, expect: impl Fn(&str) -> bool) -> Result<()> {
        for (name, t) in &self.entries {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}`: shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
        }
        let missing: Vec<&str> = store
            .iter()
            .map(|(_, p)| p.name.as_str())
            .filter(|n| expect(n) && !self.contains(n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("missing parameters: {}", missing.join(", "))));
        }
        for (name, t) in &self.entries {
            let id = store.id(name).expect("checked above");
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

fn put(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Init;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let mut init = Init::new(4);
        s.add("a.w", init.normal(&[3, 5], 1.0));
        s.add("a.b", init.normal(&[5], 1.0));
        s.add("é", Tensor::new(&[1, 1], vec![f32::MIN_POSITIVE]).unwrap());
        s
    }

    #[test]
    fn byte_layout() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap());
        let b = Checkpoint::from_store(&s).to_bytes();
        let mut expect = b"IVIC".to_vec();
        for w in [1u32, 1, 1] {
            expect.extend_from_slice(&w.to_le_bytes());
        }
        expect.push(b'x');
        for w in [0u32, 1, 2] {
            expect.extend_from_slice(&w.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        let crc = crc32fast::hash(&expect);
        expect.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = Checkpoint::from_store(&store());
        let b1 = c.to_bytes();
        let c2 = Checkpoint::from_bytes(&b1).unwrap();
        assert_eq!(c, c2);
        assert_eq!(b1, c2.to_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let b = Checkpoint::from_store(&store()).to_bytes();
        for i in [0, 5, 20, b.len() - 1] {
            let mut bad = b.clone();
            bad[i] ^= 0x10;
            assert!(Checkpoint::from_bytes(&bad).is_err(), "flip at {i}");
        }
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let src = store();
        let c = Checkpoint::from_store(&src);
        let mut dst = ParamStore::new();
        dst.add("a.w", Tensor::zeros(&[3, 5]));
        dst.add("a.b", Tensor::zeros(&[5]));
        dst.add("é", Tensor::zeros(&[1, 1]));
        dst.add("extra", Tensor::zeros(&[2]));
        assert!(c.restore(&mut dst, |_| true).is_err());
        c.restore(&mut dst, |n| n != "extra").unwrap();
        assert!(dst.get(dst.id("a.w").unwrap()).bitwise_eq(src.get(src.id("a.w").unwrap())));

        let mut wrong = ParamStore::new();
        wrong.add("a.w", Tensor::zeros(&[5, 3]));
        wrong.add("a.b", Tensor::zeros(&[5]));
        wrong.add("é", Tensor::zeros(&[1, 1]));
        assert!(c.restore(&mut wrong, |_| true).is_err());

        let partial = Checkpoint::from_store_filtered(&src, |n| n.starts_with("a."));
        let mut s = store();
        assert!(partial.restore(&mut s, |_| true).is_err());
        partial.restore(&mut s, |n| n.starts_with("a.")).unwrap();
    }
}
