//! Vision and text encoders producing unit-norm embeddings.
//!
//! [`TinyClip`] is a small self-contained dual encoder. Anything that
//! implements [`VisionLanguageBackend`] can stand in for it at evaluation
//! time; training additionally needs [`PromptGradient`].

mod checkpoint;
pub mod nn;
mod text;
mod tiny;
mod vision;

use ndarray::{concatenate, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::prompt::PromptParams;

pub use checkpoint::{load_encoder_checkpoint, read_encoder, save_encoder_checkpoint, write_encoder};
pub use text::{tokenize, TextTower, EOS_TOKEN, PAD_TOKEN};
pub use tiny::TinyClip;
pub use vision::{VisionTower, VisionTrace};

/// Tolerance on the L2 norm of an [`Embedding`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// An `H × W × C` image stored row-major (`HWC`), values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "image buffer has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// A class token followed by `n` content tokens, all of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub class_token: Array1<f64>,
    /// `n × d`
    pub tokens: Array2<f64>,
}

impl TokenSequence {
    pub fn new(class_token: Array1<f64>, tokens: Array2<f64>) -> Result<Self> {
        if tokens.ncols() != class_token.len() {
            return Err(Error::invalid(format!(
                "token width {} does not match class token width {}",
                tokens.ncols(),
                class_token.len()
            )));
        }
        Ok(TokenSequence { class_token, tokens })
    }

    pub fn dim(&self) -> usize {
        self.class_token.len()
    }

    /// Number of tokens excluding the class token.
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    /// Stacks `[class; tokens]` into one `(1 + n) × d` matrix.
    pub fn to_matrix(&self) -> Array2<f64> {
        let class_row = self.class_token.view().insert_axis(Axis(0));
        concatenate(Axis(0), &[class_row, self.tokens.view()]).expect("widths checked at construction")
    }
}

/// A unit-norm feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `values` to unit L2 norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("cannot normalize a zero vector"));
        }
        Ok(Embedding(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that are already unit-norm (checked to [`UNIT_NORM_TOLERANCE`]).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::invalid(format!("embedding norm {norm} is not 1")));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity, which is the dot product for unit vectors.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Architecture hyperparameters of [`TinyClip`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Two layers, width 32, four heads, 8-pixel patches.
    pub fn tiny(seed: u64) -> Self {
        EncoderConfig {
            layers: 2,
            dim: 32,
            heads: 4,
            patch_size: 8,
            vocab_size: 4096,
            max_text_len: 32,
            seed,
        }
    }

    /// Two layers, width 128, sixteen heads, 8-pixel patches.
    pub fn compact(seed: u64) -> Self {
        EncoderConfig {
            dim: 128,
            heads: 16,
            ..EncoderConfig::tiny(seed)
        }
    }

    /// Preset by name: `tiny` or `compact`.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "tiny" => Ok(EncoderConfig::tiny(seed)),
            "compact" => Ok(EncoderConfig::compact(seed)),
            other => Err(Error::Config(format!("unknown backend {other:?}, expected tiny or compact"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("dim", self.dim),
            ("heads", self.heads),
            ("patch_size", self.patch_size),
            ("max_text_len", self.max_text_len),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::invalid(format!("encoder {name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::invalid("vocab_size must leave room for PAD and EOS"));
        }
        if self.max_text_len < 2 {
            return Err(Error::invalid("max_text_len must hold at least one word and EOS"));
        }
        Ok(())
    }
}

/// A frozen image/text encoder pair.
pub trait VisionLanguageBackend: Send + Sync {
    /// Embedding width.
    fn dims(&self) -> usize;

    /// Number of vision transformer layers (the depth deep prompts must match).
    fn vision_layers(&self) -> usize;

    fn encode_image(&self, image: &Image, prompts: Option<&PromptParams>) -> Result<Embedding>;

    fn encode_text(&self, sentence: &str) -> Result<Embedding>;
}

/// A backend that can differentiate image embeddings with respect to prompt
/// parameters.
pub trait PromptGradient: VisionLanguageBackend {
    type Trace: Send + Sync;

    fn encode_image_traced(&self, image: &Image, prompts: &PromptParams) -> Result<(Embedding, Self::Trace)>;

    /// Vector-Jacobian product: maps `∂L/∂z` to `∂L/∂P`, laid out like
    /// [`PromptParams::values`].
    fn prompt_gradient(&self, trace: &Self::Trace, grad_embedding: &[f64]) -> Result<Vec<f64>>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_normalizes_and_rejects_zero() {
        let e = Embedding::normalized(vec![3.0, 4.0]).unwrap();
        assert_eq!(e.values(), &[0.6, 0.8]);
        assert!(Embedding::normalized(vec![0.0, 0.0]).is_err());
        assert!(Embedding::normalized(vec![f64::NAN, 1.0]).is_err());
        assert!(Embedding::from_unit(vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn config_requires_divisible_heads() {
        let mut config = EncoderConfig::tiny(0);
        assert!(config.validate().is_ok());
        config.heads = 5;
        assert!(config.validate().is_err());
    }

    #[test]
    fn image_rejects_wrong_buffer() {
        assert!(Image::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(Image::new(2, 2, 3, vec![0.0; 12]).is_ok());
    }
}
