//! Versioned binary parameter container.
//!
//! Layout: magic `HSTC`, format version `u32` LE, group count `u32` LE,
//! then per group: name length `u32` LE, UTF-8 name bytes, shape rank
//! `u32` LE, each dimension as `u64` LE, then the row-major values as
//! little-endian `f64`. Reading back yields the groups in file order, so
//! writing a parameter set twice produces identical bytes.

use std::io::Read;
use std::path::Path;

use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, not a checkpoint file")]
    BadMagic { path: String },
    #[error("{path}: format version {found}, this build reads {expected}")]
    VersionMismatch { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated or corrupt ({message})")]
    Corrupt { path: String, message: String },
    #[error("missing parameter group '{0}'")]
    MissingGroup(String),
    #[error("group '{name}' has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
}

/// One named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamGroup {
    pub fn matrix(name: &str, value: &ndarray::Array2<f64>) -> Self {
        Self {
            name: name.to_string(),
            dims: vec![value.nrows(), value.ncols()],
            data: value.iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<ndarray::Array2<f64>, CheckpointError> {
        if self.dims.len() != 2 {
            return Err(CheckpointError::ShapeMismatch {
                name: self.name.clone(),
                found: self.dims.clone(),
                expected: vec![0, 0],
            });
        }
        ndarray::Array2::from_shape_vec((self.dims[0], self.dims[1]), self.data.clone()).map_err(
            |_| CheckpointError::Corrupt {
                path: String::new(),
                message: format!("group '{}' data length mismatch", self.name),
            },
        )
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

/// Write groups in the given order.
pub fn save_groups(path: &Path, groups: &[ParamGroup]) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for g in groups {
        let name = g.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(g.dims.len() as u32).to_le_bytes());
        let mut expected = 1usize;
        for &d in &g.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
            expected *= d;
        }
        assert_eq!(expected, g.data.len(), "group '{}' data/shape mismatch", g.name);
        for v in &g.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt {
                path: self.path.clone(),
                message: format!(
                    "{what} needs {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Read all groups in file order.
pub fn load_groups(path: &Path) -> Result<Vec<ParamGroup>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let display = path.display().to_string();
    let mut cur = Cursor { bytes: &bytes, pos: 0, path: display.clone() };

    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { path: display });
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            path: display,
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = cur.u32("group count")? as usize;
    let mut groups = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| CheckpointError::Corrupt {
                path: cur.path.clone(),
                message: "group name is not UTF-8".into(),
            })?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = cur.u64("dimension")? as usize;
            dims.push(d);
            len = len.checked_mul(d).ok_or_else(|| CheckpointError::Corrupt {
                path: cur.path.clone(),
                message: format!("group '{name}' dimension overflow"),
            })?;
        }
        let raw = cur.take(len * 8, "group data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        groups.push(ParamGroup { name, dims, data });
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Corrupt {
            path: cur.path,
            message: format!("{} trailing bytes after the last group", bytes.len() - cur.pos),
        });
    }
    Ok(groups)
}

/// Find a group by name.
pub fn find<'a>(
    groups: &'a [ParamGroup],
    name: &str,
) -> Result<&'a ParamGroup, CheckpointError> {
    groups.iter().find(|g| g.name == name).ok_or_else(|| CheckpointError::MissingGroup(name.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample_groups() -> Vec<ParamGroup> {
        vec![
            ParamGroup::matrix("gene.w1", &array![[1.0, 2.0], [3.0, 4.0]]),
            ParamGroup::matrix("geom.log_c", &array![[0.25]]),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let groups = sample_groups();
        save_groups(&path, &groups).unwrap();
        let loaded = load_groups(&path).unwrap();
        assert_eq!(groups, loaded);

        // two consecutive saves produce identical bytes
        let path2 = dir.path().join("ck2.bin");
        save_groups(&path2, &groups).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_groups(&path, &sample_groups()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_groups(&path), Err(CheckpointError::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_groups(&path, &sample_groups()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        match load_groups(&path) {
            Err(CheckpointError::VersionMismatch { found, expected, .. }) => {
                assert_eq!(found, 99);
                assert_eq!(expected, CHECKPOINT_VERSION);
            }
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_reported_with_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_groups(&path, &sample_groups()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match load_groups(&path) {
            Err(CheckpointError::Corrupt { message, .. }) => {
                assert!(message.contains("bytes"), "{message}");
            }
            other => panic!("expected corruption error, got {other:?}"),
        }
    }
}
