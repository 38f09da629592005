//! `WHYP` prompt files.
//!
//! Layout (little-endian): `b"WHYP"`, `u16` version, `u8` mode
//! (0 = input, 1 = deep, 2 = deep-append), `u32` layers (1 for input mode),
//! `u32` length `k`, `u32` dim `d`, `layers·k·d` `f32` payload, then the
//! CRC32 of the payload bytes.

use std::fs;
use std::path::Path;

use super::{PromptMode, PromptParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WHYP";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4 + 4;

fn mode_byte(mode: PromptMode) -> u8 {
    match mode {
        PromptMode::Input => 0,
        PromptMode::Deep => 1,
        PromptMode::DeepAppend => 2,
    }
}

/// Serializes prompts. Values are stored as `f32`.
pub fn write_prompts(prompts: &PromptParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * prompts.values().len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(mode_byte(prompts.mode()));
    for field in [prompts.layers(), prompts.len(), prompts.dim()] {
        out.extend_from_slice(&(field as u32).to_le_bytes());
    }
    let payload_start = out.len();
    for &v in prompts.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn read_prompts(bytes: &[u8]) -> Result<PromptParams> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::format("prompt checkpoint is truncated"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("not a prompt checkpoint (bad magic)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(format!("unsupported prompt checkpoint version {version}")));
    }
    let mode = match bytes[6] {
        0 => PromptMode::Input,
        1 => PromptMode::Deep,
        2 => PromptMode::DeepAppend,
        other => return Err(Error::format(format!("unknown prompt mode byte {other}"))),
    };
    let field = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (layers, length, dim) = (field(7), field(11), field(15));
    let count = layers
        .checked_mul(length)
        .and_then(|n| n.checked_mul(dim))
        .ok_or_else(|| Error::format("prompt checkpoint dimensions overflow"))?;
    let payload_len = count
        .checked_mul(4)
        .ok_or_else(|| Error::format("prompt checkpoint dimensions overflow"))?;
    if bytes.len() != HEADER_LEN + payload_len + 4 {
        return Err(Error::format(format!(
            "prompt checkpoint has {} bytes, expected {}",
            bytes.len(),
            HEADER_LEN + payload_len + 4
        )));
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len];
    let stored = u32::from_le_bytes(bytes[HEADER_LEN + payload_len..].try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::format(format!(
            "prompt checkpoint CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    PromptParams::from_values(mode, layers, length, dim, values).map_err(|e| Error::format(e.to_string()))
}

pub fn save_prompt_checkpoint(prompts: &PromptParams, path: &Path) -> Result<()> {
    fs::write(path, write_prompts(prompts)).map_err(|e| Error::io(path, e))
}

pub fn load_prompt_checkpoint(path: &Path) -> Result<PromptParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_prompts(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{init_prompts, InitScheme};

    #[test]
    fn round_trip_is_bitwise() {
        let p = init_prompts(PromptMode::Deep, 3, 8, Some(2), InitScheme::Gaussian, 5).unwrap();
        let back = read_prompts(&write_prompts(&p)).unwrap();
        assert_eq!(back, p);
        for (a, b) in back.values().iter().zip(p.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn layout_matches_format() {
        let p = init_prompts(PromptMode::Input, 2, 3, None, InitScheme::Zeros, 0).unwrap();
        let bytes = write_prompts(&p);
        assert_eq!(&bytes[..4], b"WHYP");
        assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
        assert_eq!(bytes[6], 0);
        assert_eq!(&bytes[7..11], &1u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &2u32.to_le_bytes());
        assert_eq!(&bytes[15..19], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 19 + 24 + 4);
        assert_eq!(&bytes[43..], &crc32fast::hash(&[0u8; 24]).to_le_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let p = init_prompts(PromptMode::Input, 3, 4, None, InitScheme::Gaussian, 1).unwrap();
        let good = write_prompts(&p);

        let mut flipped = good.clone();
        flipped[HEADER_LEN + 5] ^= 0x01;
        assert!(matches!(read_prompts(&flipped), Err(Error::Format(m)) if m.contains("CRC")));

        let mut magic = good.clone();
        magic[0] = b'Q';
        assert!(read_prompts(&magic).is_err());

        assert!(read_prompts(&good[..good.len() - 3]).is_err());
        assert!(read_prompts(&good[..10]).is_err());

        let mut version = good;
        version[4] = 9;
        assert!(read_prompts(&version).is_err());
    }

    #[test]
    fn empty_prompts_round_trip() {
        let p = init_prompts(PromptMode::Input, 0, 32, None, InitScheme::Gaussian, 1).unwrap();
        let bytes = write_prompts(&p);
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        assert_eq!(read_prompts(&bytes).unwrap(), p);
    }
}
