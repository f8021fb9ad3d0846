//! Named parameter storage, tape binding and the checkpoint container.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Parameters keyed by dotted name (`coarse.block0.in.w`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Records every parameter on `tape`: as a leaf when `trainable(name)`,
    /// otherwise as a constant.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Binding { vars }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        for (k, v) in &self.map {
            match other.map.get(k) {
                None => return Err(Error::Config(format!("parameter {k} missing"))),
                Some(o) if o.shape() != v.shape() => {
                    return Err(Error::Config(format!(
                        "parameter {k} has shape {:?}, expected {:?}",
                        o.shape(),
                        v.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.map.keys().find(|k| !self.map.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Tape handles of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSMB";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `magic, version, header JSON, parameter blobs`, all little-endian.
pub fn write_checkpoint(w: &mut impl Write, header_json: &str, params: &ParamSet) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(header_json.as_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        message: msg.into(),
    }
}

struct Reader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner)
            .take(n as u64)
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(self.path, e))?;
        if buf.len() != n {
            return Err(corrupt(self.path, "unexpected end of file"));
        }
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a checkpoint written by [`write_checkpoint`]; returns the header
/// JSON and the parameters. Shapes are validated by the caller.
pub fn read_checkpoint(r: impl Read, path: &Path) -> Result<(String, ParamSet)> {
    const MAX_LEN: u64 = 1 << 31;
    let mut rd = Reader { inner: r, path };
    if rd.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = rd.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let hlen = rd.u64()?;
    if hlen > MAX_LEN {
        return Err(corrupt(path, "header too large"));
    }
    let header = String::from_utf8(rd.bytes(hlen as usize)?)
        .map_err(|_| corrupt(path, "header is not UTF-8"))?;
    let count = rd.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let nlen = rd.u32()? as usize;
        let name = String::from_utf8(rd.bytes(nlen)?).map_err(|_| corrupt(path, "bad name"))?;
        let ndim = rd.u32()? as usize;
        if ndim > 8 {
            return Err(corrupt(path, format!("{name}: rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(rd.u64()?);
        }
        let numel = shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d));
        let numel = match numel {
            Some(n) if n <= MAX_LEN / 8 => n as usize,
            _ => return Err(corrupt(path, format!("{name}: shape too large"))),
        };
        let raw = rd.bytes(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let shape: Vec<usize> = shape.into_iter().map(|d| d as usize).collect();
        params.insert(name, Tensor::new(&shape, data)?);
    }
    let mut rest = [0u8; 1];
    match rd.inner.read(&mut rest) {
        Ok(0) => Ok((header, params)),
        Ok(_) => Err(corrupt(path, "trailing bytes")),
        Err(e) => Err(Error::io(path, e)),
    }
}
