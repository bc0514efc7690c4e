//! Binary token-stream files.
//!
//! Layout: magic `RVQT`, then u32 version, C, T_n and stage count, then
//! little-endian f32 `S` (`C × T_n`), f32 `A` (`7C × T_n`) and u32 indices
//! (`stages × T_n`). The residual is not stored and reads back as zeros.

use std::io::{Read, Write};

use super::{TokenStreams, N_STAGES};
use crate::error::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 4] = b"RVQT";
pub const TOKEN_VERSION: u32 = 1;

pub fn write_tokens<W: Write>(mut w: W, t: &TokenStreams) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 4 * (t.semantic.len() + t.acoustic.len() + N_STAGES * t.frames));
    buf.extend_from_slice(TOKEN_MAGIC);
    for v in [TOKEN_VERSION, t.dim as u32, t.frames as u32, t.indices.len() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in t.semantic.iter().chain(&t.acoustic) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in t.indices.iter().flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tokens<R: Read>(mut r: R) -> Result<TokenStreams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != TOKEN_MAGIC {
        return Err(Error::Format("not a token file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, dim, frames, stages) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
    if version != TOKEN_VERSION {
        return Err(Error::Unsupported(format!("token file version {version}")));
    }
    if stages != N_STAGES {
        return Err(Error::Format(format!("token file has {stages} stages, expected {N_STAGES}")));
    }
    let n = dim * frames;
    let want = 20 + 4 * (n * N_STAGES + stages * frames);
    if bytes.len() != want {
        return Err(Error::Format(format!("token file is {} bytes, expected {want}", bytes.len())));
    }
    let body = &bytes[20..];
    let f = |i: usize| f32::from_le_bytes(body[4 * i..4 * i + 4].try_into().unwrap());
    let u = |i: usize| u32::from_le_bytes(body[4 * i..4 * i + 4].try_into().unwrap());
    let semantic = (0..n).map(f).collect();
    let acoustic = (n..n * N_STAGES).map(f).collect();
    let base = n * N_STAGES;
    let indices = (0..stages)
        .map(|k| (0..frames).map(|t| u(base + k * frames + t)).collect())
        .collect();
    Ok(TokenStreams {
        dim,
        frames,
        semantic,
        acoustic,
        indices,
        residual: vec![0.0; n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_rejects_truncation() {
        let (dim, frames) = (2, 3);
        let t = TokenStreams {
            dim,
            frames,
            semantic: (0..6).map(|v| v as f32).collect(),
            acoustic: (0..42).map(|v| v as f32 * 0.5).collect(),
            indices: (0..8).map(|k| vec![k, k + 1, k + 2]).collect(),
            residual: vec![0.0; 6],
        };
        let mut bytes = Vec::new();
        write_tokens(&mut bytes, &t).unwrap();
        assert_eq!(read_tokens(&bytes[..]).unwrap(), t);
        assert!(matches!(read_tokens(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }
}
