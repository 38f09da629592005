//! `WENC` weight files: magic, `u16` version, the encoder config, then every
//! parameter tensor in declaration order as little-endian `f32`.

use std::fs;
use std::path::Path;

use super::{EncoderConfig, TinyClip};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WENC";
const VERSION: u16 = 1;

pub fn write_encoder(model: &TinyClip) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(4 + 2 + 6 * 4 + 8 + 4 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for field in [c.layers, c.dim, c.heads, c.patch_size, c.vocab_size, c.max_text_len] {
        out.extend_from_slice(&(field as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    for (_, tensor) in model.parameters() {
        for &v in tensor {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("encoder checkpoint is truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_encoder(bytes: &[u8]) -> Result<TinyClip> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::format("not an encoder checkpoint (bad magic)"));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported encoder checkpoint version {version}")));
    }
    let mut fields = [0usize; 6];
    for f in &mut fields {
        *f = cur.u32()? as usize;
    }
    let config = EncoderConfig {
        layers: fields[0],
        dim: fields[1],
        heads: fields[2],
        patch_size: fields[3],
        vocab_size: fields[4],
        max_text_len: fields[5],
        seed: cur.u64()?,
    };
    config
        .validate()
        .map_err(|e| Error::format(format!("encoder checkpoint config: {e}")))?;
    let mut model = TinyClip::new(config)?;
    for tensor in model.parameters_mut() {
        let raw = cur.take(4 * tensor.len())?;
        for (v, chunk) in tensor.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::format("trailing bytes after encoder parameters"));
    }
    Ok(model)
}

pub fn save_encoder_checkpoint(model: &TinyClip, path: &Path) -> Result<()> {
    fs::write(path, write_encoder(model)).map_err(|e| Error::io(path, e))
}

pub fn load_encoder_checkpoint(path: &Path) -> Result<TinyClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_encoder(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TinyClip {
        let mut config = EncoderConfig::tiny(11);
        config.vocab_size = 64;
        config.max_text_len = 8;
        TinyClip::new(config).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let model = small();
        let bytes = write_encoder(&model);
        assert_eq!(&bytes[..4], b"WENC");
        assert_eq!(read_encoder(&bytes).unwrap(), model);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = write_encoder(&small());
        assert!(read_encoder(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(read_encoder(&bytes).is_err());
        bytes[0] = b'X';
        assert!(read_encoder(&bytes).is_err());
    }
}
