//! Binary weights file.
//!
//! ```text
//! "THRW"                      magic
//! u32 LE                      format version (1)
//! u32 LE                      tensor count
//! per tensor, sorted by name:
//!   u16 LE + UTF-8 bytes      name
//!   u8                        rank
//!   u32 LE × rank             dims
//!   f32 LE × product(dims)    values
//! ```

use std::path::Path;

use thiserror::Error;

use crate::densenet::{ModelError, Network, NetworkSpec, NetworkState};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"THRW";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("not a weights file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported weights format version {0} (expected {VERSION})")]
    Version(u32),
    #[error("weights file truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("tensor name at byte {0} is not valid UTF-8")]
    BadName(usize),
    #[error("tensor {name} has rank {rank} (maximum {MAX_RANK})")]
    Rank { name: String, rank: usize },
    #[error("duplicate tensor name {0}")]
    Duplicate(String),
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
    #[error("tensor name {0} is longer than 65535 bytes")]
    NameTooLong(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn encode(state: &NetworkState) -> Result<Vec<u8>, WeightsError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, tensor) in state.iter() {
        let len = u16::try_from(name.len()).map_err(|_| WeightsError::NameTooLong(name.clone()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(WeightsError::Truncated {
                offset: self.pos,
                needed: n - available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a whole file; nothing is returned unless every byte checks out.
pub fn decode(bytes: &[u8]) -> Result<NetworkState, WeightsError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(WeightsError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(WeightsError::Version(version));
    }
    let count = r.u32()?;
    let mut state = NetworkState::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| WeightsError::BadName(at))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        if rank > MAX_RANK {
            return Err(WeightsError::Rank { name, rank });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(WeightsError::Truncated {
            offset: r.pos,
            needed: usize::MAX,
        })?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if state.get(&name).is_some() {
            return Err(WeightsError::Duplicate(name));
        }
        let tensor = Tensor::new(&dims, values).map_err(ModelError::from)?;
        state.insert(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::Trailing(bytes.len() - r.pos));
    }
    Ok(state)
}

pub fn save(state: &NetworkState, path: &Path) -> Result<(), WeightsError> {
    let bytes = encode(state)?;
    std::fs::write(path, bytes).map_err(|source| WeightsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_state(path: &Path) -> Result<NetworkState, WeightsError> {
    let bytes = std::fs::read(path).map_err(|source| WeightsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// Loads a file and binds it to `spec`, rejecting any name-set mismatch.
pub fn load(path: &Path, spec: NetworkSpec) -> Result<Network, WeightsError> {
    Ok(Network::from_state(spec, load_state(path)?)?)
}

/// Class count implied by the head bias stored in a state.
pub fn head_classes(state: &NetworkState) -> Option<usize> {
    state
        .get(crate::densenet::HEAD_BIAS)
        .and_then(|t| t.shape().first().copied())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> Network {
        let spec = NetworkSpec {
            input_size: 8,
            initial_channels: 4,
            growth_rate: 2,
            block_layout: vec![1, 1],
            ..NetworkSpec::default()
        };
        let mut n = Network::build(spec).unwrap();
        n.init_gaussian(3).unwrap();
        n
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let n = net();
        let bytes = encode(n.state()).unwrap();
        let back = decode(&bytes).unwrap();
        for (name, t) in n.state().iter() {
            let u = back.get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = u.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(net().state()).unwrap();
        assert_eq!(&bytes[..4], b"THRW");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode(net().state()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(WeightsError::BadMagic(_))));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = encode(net().state()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(WeightsError::Truncated { .. })));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(WeightsError::Trailing(1))));
        let mut bumped = bytes;
        bumped[4] = 2;
        assert!(matches!(decode(&bumped), Err(WeightsError::Version(2))));
    }

    #[test]
    fn loading_into_another_layout_is_a_name_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.thrw");
        let n = net();
        save(n.state(), &path).unwrap();
        let other = NetworkSpec {
            block_layout: vec![2, 1],
            ..n.spec().clone()
        };
        assert!(matches!(
            load(&path, other),
            Err(WeightsError::Model(ModelError::NameSetMismatch { .. }))
        ));
        assert_eq!(load(&path, n.spec().clone()).unwrap().state(), n.state());
    }
}
