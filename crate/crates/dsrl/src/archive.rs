//! Named-array archive: the on-disk format for checkpoints and reports.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "DSRLARCH"
//! version u32      currently 1
//! count   u64      number of entries
//! entry*  u32 name length, name bytes (utf-8),
//!         u8 dtype (0 = f64, 1 = u8, 2 = u64),
//!         u8 ndim, ndim x u64 dims,
//!         payload (product(dims) elements, little-endian)
//! ```
//!
//! Entries keep insertion order, so archives written from the same state are
//! byte-identical.

use ndarray::{ArrayD, IxDyn};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"DSRLARCH";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dsrl archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0} (expected {VERSION})")]
    BadVersion(u32),
    #[error("corrupt archive: {0}")]
    Corrupt(String),
    #[error("missing entry: {0}")]
    Missing(String),
    #[error("entry {0} has the wrong dtype")]
    WrongType(String),
    #[error("shape mismatch for {name}: archive has {archive:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        archive: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
pub enum Payload {
    F64(ArrayD<f64>),
    U8(Vec<u8>, Vec<usize>),
    U64(Vec<u64>),
}

#[derive(Default)]
pub struct Archive {
    entries: Vec<(String, Payload)>,
    index: HashMap<String, usize>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    fn insert(&mut self, name: &str, payload: Payload) {
        assert!(
            !self.index.contains_key(name),
            "duplicate archive entry: {name}"
        );
        self.entries.push((name.to_string(), payload));
        self.index.insert(name.to_string(), self.entries.len() - 1);
    }

    pub fn insert_f64(&mut self, name: &str, value: ArrayD<f64>) {
        self.insert(name, Payload::F64(value));
    }

    pub fn insert_scalar(&mut self, name: &str, value: f64) {
        self.insert_f64(name, ArrayD::from_elem(IxDyn(&[1]), value));
    }

    pub fn insert_u8(&mut self, name: &str, data: Vec<u8>, shape: Vec<usize>) {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        self.insert(name, Payload::U8(data, shape));
    }

    pub fn insert_u64(&mut self, name: &str, data: Vec<u64>) {
        self.insert(name, Payload::U64(data));
    }

    pub fn insert_string(&mut self, name: &str, value: &str) {
        let bytes = value.as_bytes().to_vec();
        let len = bytes.len();
        self.insert_u8(name, bytes, vec![len]);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get_f64(&self, name: &str) -> Result<&ArrayD<f64>, ArchiveError> {
        match self.get(name)? {
            Payload::F64(a) => Ok(a),
            _ => Err(ArchiveError::WrongType(name.to_string())),
        }
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64, ArchiveError> {
        let a = self.get_f64(name)?;
        if a.len() != 1 {
            return Err(ArchiveError::WrongType(name.to_string()));
        }
        Ok(a[0])
    }

    pub fn get_u8(&self, name: &str) -> Result<(&[u8], &[usize]), ArchiveError> {
        match self.get(name)? {
            Payload::U8(d, s) => Ok((d, s)),
            _ => Err(ArchiveError::WrongType(name.to_string())),
        }
    }

    pub fn get_u64(&self, name: &str) -> Result<&[u64], ArchiveError> {
        match self.get(name)? {
            Payload::U64(d) => Ok(d),
            _ => Err(ArchiveError::WrongType(name.to_string())),
        }
    }

    pub fn get_string(&self, name: &str) -> Result<String, ArchiveError> {
        let (bytes, _) = self.get_u8(name)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| ArchiveError::Corrupt(format!("entry {name} is not utf-8: {e}")))
    }

    fn get(&self, name: &str) -> Result<&Payload, ArchiveError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| ArchiveError::Missing(name.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), ArchiveError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, payload) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            match payload {
                Payload::F64(a) => {
                    w.write_all(&[0u8, a.ndim() as u8])?;
                    for &d in a.shape() {
                        w.write_all(&(d as u64).to_le_bytes())?;
                    }
                    for &v in a.as_standard_layout().iter() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Payload::U8(d, shape) => {
                    w.write_all(&[1u8, shape.len() as u8])?;
                    for &s in shape {
                        w.write_all(&(s as u64).to_le_bytes())?;
                    }
                    w.write_all(d)?;
                }
                Payload::U64(d) => {
                    w.write_all(&[2u8, 1u8])?;
                    w.write_all(&(d.len() as u64).to_le_bytes())?;
                    for &v in d {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ArchiveError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ArchiveError::BadVersion(version));
        }
        let count = read_u64(&mut r)? as usize;
        let mut archive = Archive::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 1 << 20 {
                return Err(ArchiveError::Corrupt("oversized entry name".into()));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| ArchiveError::Corrupt(format!("bad name: {e}")))?;
            let mut head = [0u8; 2];
            r.read_exact(&mut head)?;
            let (dtype, ndim) = (head[0], head[1] as usize);
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(&mut r)? as usize);
            }
            let n: usize = dims.iter().product();
            match dtype {
                0 => {
                    let mut data = vec![0f64; n];
                    let mut buf = [0u8; 8];
                    for v in &mut data {
                        r.read_exact(&mut buf)?;
                        *v = f64::from_le_bytes(buf);
                    }
                    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                        .map_err(|e| ArchiveError::Corrupt(format!("bad shape: {e}")))?;
                    archive.insert_f64(&name, arr);
                }
                1 => {
                    let mut data = vec![0u8; n];
                    r.read_exact(&mut data)?;
                    archive.insert_u8(&name, data, dims);
                }
                2 => {
                    let mut data = vec![0u64; n];
                    let mut buf = [0u8; 8];
                    for v in &mut data {
                        r.read_exact(&mut buf)?;
                        *v = u64::from_le_bytes(buf);
                    }
                    archive.insert_u64(&name, data);
                }
                other => {
                    return Err(ArchiveError::Corrupt(format!("unknown dtype {other}")));
                }
            }
        }
        Ok(archive)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, ArchiveError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ArchiveError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dsrl");
        let mut a = Archive::new();
        a.insert_f64(
            "param/w",
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300, -7.25, 0.1]).unwrap(),
        );
        a.insert_u8("frame", vec![0, 7, 255], vec![3]);
        a.insert_u64("rng/state", vec![u64::MAX, 0, 42]);
        a.insert_string("meta/config", "hello = 1");
        a.insert_scalar("meta/step", 12345.0);
        a.write(&path).unwrap();

        let b = Archive::read(&path).unwrap();
        assert_eq!(
            b.names().collect::<Vec<_>>(),
            vec!["param/w", "frame", "rng/state", "meta/config", "meta/step"]
        );
        let w = b.get_f64("param/w").unwrap();
        assert_eq!(w.shape(), &[2, 3]);
        for (x, y) in w.iter().zip(a.get_f64("param/w").unwrap().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(b.get_u8("frame").unwrap().0, &[0, 7, 255]);
        assert_eq!(b.get_u64("rng/state").unwrap(), &[u64::MAX, 0, 42]);
        assert_eq!(b.get_string("meta/config").unwrap(), "hello = 1");
        assert_eq!(b.get_scalar("meta/step").unwrap(), 12345.0);
    }

    #[test]
    fn writes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let build = || {
            let mut a = Archive::new();
            a.insert_scalar("x", 1.0);
            a.insert_u64("y", vec![1, 2, 3]);
            a
        };
        let p1 = dir.path().join("a1");
        let p2 = dir.path().join("a2");
        build().write(&p1).unwrap();
        build().write(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"NOTADSRL........").unwrap();
        assert!(matches!(Archive::read(&path), Err(ArchiveError::BadMagic)));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            Archive::read(&path),
            Err(ArchiveError::BadVersion(99))
        ));
    }

    #[test]
    fn missing_entry_is_named() {
        let a = Archive::new();
        let err = a.get_f64("absent/param").unwrap_err();
        assert!(err.to_string().contains("absent/param"));
    }
}
