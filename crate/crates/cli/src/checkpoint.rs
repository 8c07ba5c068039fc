//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"NGFN" | version: u32
//! n_meta: u32 | n_meta x (key, value)          strings: u32 length + UTF-8
//! n_arrays: u32 | n_arrays x (name, ndim: u32, dims: u64 x ndim, f64 x prod(dims))
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{io_err, CliError, CliResult, Kind};

pub const MAGIC: &[u8; 4] = b"NGFN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Array>,
}

fn bad(m: impl Into<String>) -> CliError {
    CliError::new(Kind::Checkpoint, m)
}

impl Checkpoint {
    pub fn set_meta(&mut self, k: &str, v: impl Into<String>) {
        self.meta.insert(k.into(), v.into());
    }

    pub fn meta(&self, k: &str) -> CliResult<&str> {
        self.meta.get(k).map(String::as_str).ok_or_else(|| bad(format!("missing metadata `{k}`")))
    }

    pub fn put(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(name.into(), Array { shape, data });
    }

    pub fn put_scalar(&mut self, name: &str, v: f64) {
        self.put(name, vec![1], vec![v]);
    }

    pub fn get(&self, name: &str) -> CliResult<&Array> {
        self.arrays.get(name).ok_or_else(|| bad(format!("missing array `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> CliResult<f64> {
        let a = self.get(name)?;
        match a.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(bad(format!("array `{name}` is not a scalar"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for d in &a.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not an NGFN checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| bad("dimension overflow"))?);
            }
            let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| bad("size overflow"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("size overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            ck.arrays.insert(name, Array { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after the last array"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| io_err(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| bad(format!("{}: {}", path.display(), e.message)))
    }

    /// Arrays under `prefix.` with the prefix stripped.
    pub fn lookup<'a>(&'a self, prefix: &'a str) -> impl Fn(&str) -> Option<(Vec<usize>, Vec<f64>)> + 'a {
        move |name| self.arrays.get(&format!("{prefix}.{name}")).map(|a| (a.shape.clone(), a.data.clone()))
    }

    pub fn put_named(&mut self, prefix: &str, arrays: Vec<(String, Vec<usize>, Vec<f64>)>) {
        for (name, shape, data) in arrays {
            self.put(format!("{prefix}.{name}"), shape, data);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> CliResult<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8 in checkpoint string"))
    }
}
