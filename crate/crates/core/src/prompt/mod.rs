//! Learnable "why" prompts and how they enter the vision transformer.
//!
//! Input prompts are appended once after the patch tokens. Deep prompts
//! supply fresh rows before every layer; in the default [`PromptMode::Deep`]
//! they replace the previous layer's prompt outputs, so the sequence length
//! stays `1 + n + k` throughout. [`PromptMode::DeepAppend`] keeps the old
//! prompt outputs and grows the sequence by `k` per layer.

mod checkpoint;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{Embedding, TokenSequence, VisionTower};
use crate::error::{Error, Result};

pub use checkpoint::{load_prompt_checkpoint, read_prompts, save_prompt_checkpoint, write_prompts};

/// Standard deviation of the default Gaussian initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptMode {
    Input,
    Deep,
    /// Deep prompts that accumulate instead of replacing. Experimental.
    DeepAppend,
}

impl PromptMode {
    pub fn is_deep(self) -> bool {
        !matches!(self, PromptMode::Input)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Input => "input",
            PromptMode::Deep => "deep",
            PromptMode::DeepAppend => "deep-append",
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(PromptMode::Input),
            "deep" => Ok(PromptMode::Deep),
            "deep-append" | "append" => Ok(PromptMode::DeepAppend),
            other => Err(Error::invalid(format!("unknown prompt mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    #[default]
    Gaussian,
    Zeros,
}

/// Prompt tokens, stored `layers × k × d` row-major. Input mode has one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    mode: PromptMode,
    layers: usize,
    length: usize,
    dim: usize,
    values: Vec<f64>,
}

impl PromptParams {
    pub fn from_values(mode: PromptMode, layers: usize, length: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("prompt dim must be positive"));
        }
        if layers == 0 {
            return Err(Error::invalid("prompt layer count must be positive"));
        }
        if mode == PromptMode::Input && layers != 1 {
            return Err(Error::invalid("input prompts have exactly one layer"));
        }
        if values.len() != layers * length * dim {
            return Err(Error::invalid(format!(
                "prompt payload has {} values, expected {layers}x{length}x{dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prompt parameters"));
        }
        Ok(PromptParams {
            mode,
            layers,
            length,
            dim,
            values,
        })
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Prompt length `k`.
    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// The `k × d` block for `layer`.
    pub fn layer(&self, layer: usize) -> ArrayView2<'_, f64> {
        let block = self.length * self.dim;
        ArrayView2::from_shape((self.length, self.dim), &self.values[layer * block..(layer + 1) * block])
            .expect("payload length checked at construction")
    }

    /// Checks that these prompts fit a vision encoder of width `dim` and depth `layers`.
    pub fn check_compatible(&self, dim: usize, layers: usize) -> Result<()> {
        if self.dim != dim {
            return Err(Error::invalid(format!(
                "prompt dim {} does not match encoder dim {dim}",
                self.dim
            )));
        }
        if self.mode.is_deep() && self.layers != layers {
            return Err(Error::invalid(format!(
                "deep prompts cover {} layers but the encoder has {layers}",
                self.layers
            )));
        }
        Ok(())
    }
}

/// Creates prompt parameters. Deep modes require `layers`.
pub fn init_prompts(
    mode: PromptMode,
    length: usize,
    dim: usize,
    layers: Option<usize>,
    scheme: InitScheme,
    seed: u64,
) -> Result<PromptParams> {
    let layers = match (mode, layers) {
        (PromptMode::Input, _) => 1,
        (_, Some(l)) if l > 0 => l,
        (_, Some(_)) => return Err(Error::invalid("deep prompts need at least one layer")),
        (_, None) => return Err(Error::invalid("deep prompts need the encoder layer count")),
    };
    let count = layers * length * dim;
    let values = match scheme {
        InitScheme::Zeros => vec![0.0; count],
        InitScheme::Gaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, INIT_STD).expect("finite std");
            // f32-representable so checkpoints round-trip exactly
            (0..count).map(|_| normal.sample(&mut rng) as f32 as f64).collect()
        }
    };
    PromptParams::from_values(mode, layers, length, dim, values)
}

/// Appends prompt rows after the existing tokens. Existing rows are copied
/// untouched and prompts receive no positional encoding.
pub fn inject_input_prompt(seq: &TokenSequence, prompt: &ArrayView2<f64>) -> Result<TokenSequence> {
    if prompt.ncols() != seq.dim() {
        return Err(Error::invalid(format!(
            "prompt width {} does not match sequence width {}",
            prompt.ncols(),
            seq.dim()
        )));
    }
    let tokens = concatenate(Axis(0), &[seq.tokens.view(), prompt.view()]).expect("widths checked");
    TokenSequence::new(seq.class_token.clone(), tokens)
}

/// Runs the vision layers with deep prompts and returns the class-token
/// embedding.
pub fn deep_forward(encoder: &VisionTower, seq: &TokenSequence, deep: &PromptParams) -> Result<Embedding> {
    if !deep.mode().is_deep() {
        return Err(Error::invalid("deep_forward needs deep prompts"));
    }
    encoder.encode_sequence(seq, Some(deep))
}

/// Builds the input to vision layer `layer` from the previous layer's output.
/// `base_len` is `1 + n` (class token plus patches).
pub(crate) fn layer_input(prev: Array2<f64>, base_len: usize, prompts: &PromptParams, layer: usize) -> Array2<f64> {
    match prompts.mode() {
        PromptMode::Input if layer == 0 => stack(prev.view(), prompts.layer(0)),
        PromptMode::Input => prev,
        PromptMode::Deep => stack(prev.slice(s![..base_len, ..]), prompts.layer(layer)),
        PromptMode::DeepAppend => stack(prev.view(), prompts.layer(layer)),
    }
}

/// Inverse of [`layer_input`] for gradients: routes the prompt rows of
/// `grad_in` into `prompt_grad` and returns the gradient for the previous
/// layer's output (of `prev_len` rows).
pub(crate) fn split_layer_grad(
    grad_in: Array2<f64>,
    base_len: usize,
    prev_len: usize,
    prompts: &PromptParams,
    layer: usize,
    prompt_grad: &mut [f64],
) -> Array2<f64> {
    let k = prompts.len();
    let d = prompts.dim();
    let injects = prompts.mode().is_deep() || layer == 0;
    if !injects {
        return grad_in;
    }
    let rows = grad_in.nrows();
    let block = &mut prompt_grad[layer * k * d..(layer + 1) * k * d];
    for (dst, src) in block.chunks_mut(d).zip(grad_in.slice(s![rows - k.., ..]).rows()) {
        for (a, b) in dst.iter_mut().zip(src.iter()) {
            *a += b;
        }
    }
    match prompts.mode() {
        PromptMode::Deep => {
            // replaced prompt outputs receive no gradient
            let mut prev = Array2::zeros((prev_len, d));
            prev.slice_mut(s![..base_len, ..]).assign(&grad_in.slice(s![..base_len, ..]));
            prev
        }
        PromptMode::Input | PromptMode::DeepAppend => grad_in.slice(s![..rows - k, ..]).to_owned(),
    }
}

fn stack(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(0), &[a, b]).expect("prompt width checked")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn gaussian_init_is_deterministic() {
        let a = init_prompts(PromptMode::Input, 3, 32, None, InitScheme::Gaussian, 7).unwrap();
        let b = init_prompts(PromptMode::Input, 3, 32, None, InitScheme::Gaussian, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values().len(), 3 * 32);
        assert_eq!(a.layer(0).dim(), (3, 32));
        let c = init_prompts(PromptMode::Input, 3, 32, None, InitScheme::Gaussian, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_init_has_expected_spread() {
        let p = init_prompts(PromptMode::Deep, 30, 768, Some(12), InitScheme::Gaussian, 1).unwrap();
        assert_eq!((p.layers(), p.len(), p.dim()), (12, 30, 768));
        let n = p.values().len() as f64;
        let mean = p.values().iter().sum::<f64>() / n;
        let std = (p.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-3);
        assert!((std - INIT_STD).abs() < 1e-3);
    }

    #[test]
    fn zero_length_and_zero_scheme() {
        let empty = init_prompts(PromptMode::Input, 0, 32, None, InitScheme::Gaussian, 0).unwrap();
        assert!(empty.is_empty());
        assert!(empty.values().is_empty());
        let zeros = init_prompts(PromptMode::Deep, 2, 4, Some(3), InitScheme::Zeros, 0).unwrap();
        assert!(zeros.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deep_without_layers_is_rejected() {
        assert!(init_prompts(PromptMode::Deep, 3, 8, None, InitScheme::Gaussian, 0).is_err());
        assert!(init_prompts(PromptMode::DeepAppend, 3, 8, Some(0), InitScheme::Gaussian, 0).is_err());
    }

    #[test]
    fn input_injection_appends_without_touching_tokens() {
        let seq = TokenSequence::new(
            Array1::from_shape_fn(32, |i| i as f64 * 0.1),
            Array2::from_shape_fn((16, 32), |(i, j)| (i * 32 + j) as f64 * 1e-3 + 0.1),
        )
        .unwrap();
        let p = init_prompts(PromptMode::Input, 3, 32, None, InitScheme::Gaussian, 2).unwrap();
        let out = inject_input_prompt(&seq, &p.layer(0)).unwrap();
        assert_eq!(out.len(), 19);
        assert_eq!(out.class_token, seq.class_token);
        for (a, b) in out.tokens.slice(s![..16, ..]).iter().zip(seq.tokens.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(out.tokens.slice(s![16.., ..]), p.layer(0));

        let empty = init_prompts(PromptMode::Input, 0, 32, None, InitScheme::Gaussian, 2).unwrap();
        assert_eq!(inject_input_prompt(&seq, &empty.layer(0)).unwrap(), seq);

        let narrow = init_prompts(PromptMode::Input, 3, 16, None, InitScheme::Gaussian, 2).unwrap();
        assert!(inject_input_prompt(&seq, &narrow.layer(0)).is_err());
    }

    #[test]
    fn mode_parses() {
        assert_eq!("deep".parse::<PromptMode>().unwrap(), PromptMode::Deep);
        assert!("sideways".parse::<PromptMode>().is_err());
    }
}
