//! `.tetg` grid-state files.
//!
//! Little-endian layout: magic `TETG`, `u32` version, `u32` resolution,
//! `u32` vertex count, then per vertex four `f32` values `(dx, dy, dz, s)`,
//! then one byte holding the normalized flag.

use std::fs;
use std::path::Path;

use super::GridState;
use crate::error::{Error, Result};

pub const TETG_MAGIC: &[u8; 4] = b"TETG";
pub const TETG_VERSION: u32 = 1;

pub fn encode_tetg(resolution: usize, state: &GridState) -> Vec<u8> {
    let n = state.len();
    let mut buf = Vec::with_capacity(16 + 16 * n + 1);
    buf.extend_from_slice(TETG_MAGIC);
    buf.extend_from_slice(&TETG_VERSION.to_le_bytes());
    buf.extend_from_slice(&(resolution as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for (d, s) in state.deformation().iter().zip(state.sdf()) {
        for c in d {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.push(state.is_normalized() as u8);
    buf
}

/// Decodes a `.tetg` buffer into `(resolution, state)`.
pub fn decode_tetg(bytes: &[u8]) -> Result<(usize, GridState)> {
    let word = |at: usize| -> Result<[u8; 4]> {
        bytes
            .get(at..at + 4)
            .map(|b| [b[0], b[1], b[2], b[3]])
            .ok_or_else(|| Error::Format("truncated .tetg file".into()))
    };
    if word(0)? != *TETG_MAGIC {
        return Err(Error::Format("bad .tetg magic".into()));
    }
    let version = u32::from_le_bytes(word(4)?);
    if version != TETG_VERSION {
        return Err(Error::Format(format!(
            "unsupported .tetg version {version} (expected {TETG_VERSION})"
        )));
    }
    let resolution = u32::from_le_bytes(word(8)?) as usize;
    let n = u32::from_le_bytes(word(12)?) as usize;
    let expected = 16 + 16 * n + 1;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            ".tetg size {} does not match header ({expected})",
            bytes.len()
        )));
    }
    let mut deformation = Vec::with_capacity(n);
    let mut sdf = Vec::with_capacity(n);
    for v in 0..n {
        let base = 16 + 16 * v;
        let f = |k: usize| f32::from_le_bytes(word(base + 4 * k).unwrap());
        deformation.push([f(0), f(1), f(2)]);
        sdf.push(f(3));
    }
    let state = match bytes[expected - 1] {
        0 => GridState::new(deformation, sdf)?,
        1 => GridState::normalized(deformation, sdf)?,
        b => return Err(Error::Format(format!("bad normalized flag {b}"))),
    };
    Ok((resolution, state))
}

pub fn write_tetg(path: impl AsRef<Path>, resolution: usize, state: &GridState) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tetg(resolution, state)).map_err(|e| Error::file(path, e))
}

pub fn read_tetg(path: impl AsRef<Path>) -> Result<(usize, GridState)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_tetg(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_state() -> GridState {
        GridState::normalized(vec![[0.1, -0.2, 0.3], [0.0, 0.5, -0.5]], vec![1.0, -1.0]).unwrap()
    }

    #[test]
    fn layout_is_little_endian() {
        let b = encode_tetg(2, &sample_state());
        assert_eq!(&b[0..4], b"TETG");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..16], &[2, 0, 0, 0]);
        assert_eq!(&b[16..20], &0.1f32.to_le_bytes());
        assert_eq!(&b[28..32], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 16 + 32 + 1);
        assert_eq!(*b.last().unwrap(), 1);
    }

    #[test]
    fn round_trip() {
        let s = sample_state();
        let (r, back) = decode_tetg(&encode_tetg(7, &s)).unwrap();
        assert_eq!(r, 7);
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_bad_input() {
        let mut b = encode_tetg(2, &sample_state());
        assert!(decode_tetg(&b[..b.len() - 3]).is_err());
        b[0] = b'X';
        assert!(decode_tetg(&b).is_err());
        let mut b = encode_tetg(2, &sample_state());
        b[4] = 9;
        assert!(matches!(decode_tetg(&b), Err(Error::Format(_))));
    }
}
