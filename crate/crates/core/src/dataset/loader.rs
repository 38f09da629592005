use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::Sample;
use crate::encoder::Image;
use crate::error::{Error, Result};
use crate::synthetic;

const MOCK_SCHEME: &str = "mock://";

fn escape(s: &str) -> String {
    s.replace('%', "%25").replace('/', "%2F")
}

fn unescape(s: &str) -> String {
    s.replace("%2F", "/").replace("%25", "%")
}

/// Reference for a procedural image: `mock://{category}/{rationale}/{instance}`.
pub fn mock_image_ref(category: &str, rationale: &str, instance: u64) -> String {
    format!("{MOCK_SCHEME}{}/{}/{instance}", escape(category), escape(rationale))
}

pub fn parse_mock_image_ref(image_ref: &str) -> Option<(String, String, u64)> {
    let rest = image_ref.strip_prefix(MOCK_SCHEME)?;
    let mut parts = rest.split('/');
    let (c, r, i) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() {
        return None;
    }
    Some((unescape(c), unescape(r), i.parse().ok()?))
}

/// Turns a sample's `image_ref` into pixels.
pub trait ImageLoader: Send + Sync {
    fn load(&self, sample: &Sample) -> Result<Image>;
}

/// Regenerates `mock://` images.
#[derive(Debug, Clone, Copy)]
pub struct ProceduralImageLoader {
    pub size: usize,
}

impl ImageLoader for ProceduralImageLoader {
    fn load(&self, sample: &Sample) -> Result<Image> {
        let (c, r, i) = parse_mock_image_ref(&sample.image_ref)
            .ok_or_else(|| Error::invalid(format!("{} is not a procedural image reference", sample.image_ref)))?;
        Ok(synthetic::render(&c, &r, i, self.size))
    }
}

/// Decodes image files (PNG, JPEG, PPM, BMP), converts to RGB and resizes to
/// `size × size`. Relative paths resolve against `base_dir`. `mock://`
/// references are regenerated procedurally.
#[derive(Debug, Clone)]
pub struct FsImageLoader {
    base_dir: PathBuf,
    size: usize,
}

impl FsImageLoader {
    pub fn new(base_dir: impl Into<PathBuf>, size: usize) -> Self {
        FsImageLoader {
            base_dir: base_dir.into(),
            size,
        }
    }

    pub fn decode(bytes: &[u8], size: usize, origin: &Path) -> Result<Image> {
        let decoded = image::load_from_memory(bytes)
            .map_err(|e| Error::format(format!("{}: {e}", origin.display())))?
            .to_rgb8();
        let resized = if decoded.width() as usize == size && decoded.height() as usize == size {
            decoded
        } else {
            image::imageops::resize(&decoded, size as u32, size as u32, FilterType::Triangle)
        };
        let data = resized.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Image::new(size, size, 3, data)
    }
}

impl ImageLoader for FsImageLoader {
    fn load(&self, sample: &Sample) -> Result<Image> {
        if sample.image_ref.starts_with(MOCK_SCHEME) {
            return ProceduralImageLoader { size: self.size }.load(sample);
        }
        let path = Path::new(&sample.image_ref);
        let path = if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        };
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Self::decode(&bytes, self.size, &path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::test_support::sample;

    #[test]
    fn mock_refs_round_trip() {
        let r = mock_image_ref("a/b", "100% fur", 42);
        assert_eq!(parse_mock_image_ref(&r), Some(("a/b".into(), "100% fur".into(), 42)));
        assert_eq!(parse_mock_image_ref("file.png"), None);
    }

    #[test]
    fn fs_loader_decodes_ppm_and_regenerates_mock() {
        let dir = tempfile::tempdir().unwrap();
        let img = synthetic::render("dog", "tail", 1, 32);
        std::fs::write(dir.path().join("x.ppm"), synthetic::encode_ppm(&img)).unwrap();
        let loader = FsImageLoader::new(dir.path(), 32);
        let mut s = sample("dog", "tail", 1);
        s.image_ref = "x.ppm".into();
        let loaded = loader.load(&s).unwrap();
        assert_eq!((loaded.height(), loaded.width(), loaded.channels()), (32, 32, 3));
        for (a, b) in loaded.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let resized = FsImageLoader::new(dir.path(), 16).load(&s).unwrap();
        assert_eq!(resized.height(), 16);

        s.image_ref = mock_image_ref("dog", "tail", 1);
        assert_eq!(loader.load(&s).unwrap(), img);

        s.image_ref = "missing.png".into();
        assert!(matches!(loader.load(&s), Err(Error::Io { .. })));
    }
}
