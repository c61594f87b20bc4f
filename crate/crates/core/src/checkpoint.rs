//! Binary parameter snapshots.
//!
//! Layout: magic `SPT1`, u32 entry count, then per entry in name order a u32
//! name length, the UTF-8 name, u32 rank, `rank` u32 dims and the f32
//! values. All integers and floats are little-endian.

use std::path::Path;

use crate::{Error, ParamStore, Result, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"SPT1";

pub fn to_bytes(params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = t.shape().logical().to_vec();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    let mut previous: Option<String> = None;
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        if previous.as_ref().is_some_and(|p| *p >= name) {
            return Err(Error::Checkpoint(format!("entry `{name}` is out of order")));
        }
        let rank = r.u32("rank")?;
        if !(1..=4).contains(&rank) {
            return Err(Error::Checkpoint(format!("`{name}` has rank {rank}, expected 1 to 4")));
        }
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let shape = Shape::new(&dims);
        let raw = r.take(shape.numel() * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.insert(name.clone(), Tensor::new(shape, data)?)?;
        previous = Some(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save(params: &ParamStore<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

/// Checks that `found` has exactly the names and shapes of `expected`,
/// reporting the first offending tensor in name order.
pub fn check_compatible(expected: &ParamStore<f32>, found: &ParamStore<f32>) -> Result<()> {
    for (name, t) in expected.iter() {
        match found.entry(name) {
            None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
            Some((_, f)) if f.shape().logical() != t.shape().logical() => {
                return Err(Error::CheckpointShape {
                    name: name.to_string(),
                    expected: t.shape(),
                    found: f.shape(),
                })
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = found.names().find(|n| !expected.contains(n)) {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}
