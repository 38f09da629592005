use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use super::nn::{gaussian_matrix, gaussian_vector, l2_normalize, l2_normalize_backward, Block, BlockCache, LayerNorm, LayerNormCache};
use super::{Embedding, Image, TokenSequence};
use crate::error::{Error, Result};
use crate::prompt::{layer_input, split_layer_grad, PromptParams};

/// Patch-embedding vision transformer with class-token pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionTower {
    pub(crate) patch_size: usize,
    pub(crate) channels: usize,
    /// `(p·p·C) × d`, no bias.
    pub(crate) patch_proj: Array2<f64>,
    pub(crate) class_token: Array1<f64>,
    pub(crate) blocks: Vec<Block>,
    pub(crate) ln_post: LayerNorm,
    /// `d × d`
    pub(crate) proj: Array2<f64>,
}

/// Everything the backward pass needs from one prompted forward pass.
#[derive(Debug, Clone)]
pub struct VisionTrace {
    prompts: PromptParams,
    base_len: usize,
    /// Sequence length entering each layer *before* prompts are inserted.
    prev_lens: Vec<usize>,
    blocks: Vec<BlockCache>,
    ln_post: LayerNormCache,
    final_len: usize,
    embedding: Array1<f64>,
    norm: f64,
}

impl VisionTrace {
    /// Sequence length seen by each layer's attention.
    pub fn attention_lens(&self) -> Vec<usize> {
        self.blocks.iter().map(BlockCache::seq_len).collect()
    }
}

/// Fixed sinusoidal position code for row `pos`.
fn positional(pos: usize, dim: usize) -> impl Iterator<Item = f64> {
    let scale = (dim as f64).powf(-0.5);
    (0..dim).map(move |i| {
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * freq;
        scale * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

impl VisionTower {
    pub(crate) fn init<R: Rng>(rng: &mut R, layers: usize, dim: usize, heads: usize, patch_size: usize) -> Self {
        let channels = 3;
        let patch_dim = patch_size * patch_size * channels;
        VisionTower {
            patch_size,
            channels,
            patch_proj: gaussian_matrix(rng, patch_dim, dim, (patch_dim as f64).powf(-0.5)),
            class_token: gaussian_vector(rng, dim, (dim as f64).powf(-0.5)),
            blocks: (0..layers).map(|_| Block::init(rng, dim, heads)).collect(),
            ln_post: LayerNorm::new(dim),
            proj: gaussian_matrix(rng, dim, dim, (dim as f64).powf(-0.5)),
        }
    }

    pub fn dim(&self) -> usize {
        self.class_token.len()
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Splits the image into `p × p` patches, projects each flattened patch,
    /// adds position codes and prepends the class token.
    pub fn patchify(&self, image: &Image) -> Result<TokenSequence> {
        let p = self.patch_size;
        if image.height() % p != 0 || image.width() % p != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                image.height(),
                image.width()
            )));
        }
        if image.channels() != self.channels {
            return Err(Error::invalid(format!(
                "expected {} channels, got {}",
                self.channels,
                image.channels()
            )));
        }
        let rows = image.height() / p;
        let cols = image.width() / p;
        let patch_dim = p * p * self.channels;
        let mut flat = Array2::zeros((rows * cols, patch_dim));
        for (idx, mut patch) in flat.rows_mut().into_iter().enumerate() {
            let (py, px) = (idx / cols, idx % cols);
            let mut j = 0;
            for y in 0..p {
                for x in 0..p {
                    for c in 0..self.channels {
                        // [0, 1] -> [-1, 1]
                        patch[j] = 2.0 * image.pixel(py * p + y, px * p + x, c) - 1.0;
                        j += 1;
                    }
                }
            }
        }
        let dim = self.dim();
        let mut tokens = flat.dot(&self.patch_proj);
        for (i, mut row) in tokens.rows_mut().into_iter().enumerate() {
            for (v, pe) in row.iter_mut().zip(positional(i + 1, dim)) {
                *v += pe;
            }
        }
        let class_token = &self.class_token + &Array1::from_iter(positional(0, dim));
        TokenSequence::new(class_token, tokens)
    }

    /// Runs the transformer over an already patchified sequence.
    pub fn encode_sequence(&self, seq: &TokenSequence, prompts: Option<&PromptParams>) -> Result<Embedding> {
        if seq.dim() != self.dim() {
            return Err(Error::invalid(format!(
                "sequence width {} does not match encoder width {}",
                seq.dim(),
                self.dim()
            )));
        }
        let base_len = 1 + seq.len();
        let mut x = seq.to_matrix();
        match prompts {
            Some(p) => {
                p.check_compatible(self.dim(), self.layers())?;
                for (layer, block) in self.blocks.iter().enumerate() {
                    x = layer_input(x, base_len, p, layer);
                    x = block.forward(&x.view(), false);
                }
            }
            None => {
                for block in &self.blocks {
                    x = block.forward(&x.view(), false);
                }
            }
        }
        self.pool(&x)
    }

    /// Applies vision block `layer` to a token matrix (class token first).
    pub fn forward_layer(&self, layer: usize, x: &Array2<f64>) -> Result<Array2<f64>> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
        if x.ncols() != self.dim() || x.nrows() == 0 {
            return Err(Error::invalid("token matrix does not fit the encoder"));
        }
        Ok(block.forward(&x.view(), false))
    }

    /// Final norm, projection and normalization of the class-token row.
    pub fn pool(&self, x: &Array2<f64>) -> Result<Embedding> {
        if x.ncols() != self.dim() || x.nrows() == 0 {
            return Err(Error::invalid("token matrix does not fit the encoder"));
        }
        let (pooled, _) = self.ln_post.forward(&x.slice(s![0..1, ..]));
        Embedding::normalized(pooled.row(0).dot(&self.proj).to_vec())
    }

    pub fn encode_image(&self, image: &Image, prompts: Option<&PromptParams>) -> Result<Embedding> {
        let seq = self.patchify(image)?;
        self.encode_sequence(&seq, prompts)
    }

    pub fn encode_sequence_traced(&self, seq: &TokenSequence, prompts: &PromptParams) -> Result<(Embedding, VisionTrace)> {
        prompts.check_compatible(self.dim(), self.layers())?;
        let base_len = 1 + seq.len();
        let mut x = seq.to_matrix();
        let mut prev_lens = Vec::with_capacity(self.layers());
        let mut caches = Vec::with_capacity(self.layers());
        for (layer, block) in self.blocks.iter().enumerate() {
            prev_lens.push(x.nrows());
            x = layer_input(x, base_len, prompts, layer);
            let (out, cache) = block.forward_cached(&x.view(), false);
            x = out;
            caches.push(cache);
        }
        let (pooled, ln_post) = self.ln_post.forward(&x.slice(s![0..1, ..]));
        let projected = pooled.row(0).dot(&self.proj);
        if projected.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image embedding"));
        }
        let (embedding, norm) = l2_normalize(&projected);
        let trace = VisionTrace {
            prompts: prompts.clone(),
            base_len,
            prev_lens,
            blocks: caches,
            ln_post,
            final_len: x.nrows(),
            embedding: embedding.clone(),
            norm,
        };
        Ok((Embedding::from_unit(embedding.to_vec())?, trace))
    }

    /// `∂L/∂P` given `∂L/∂z` for the traced forward pass.
    pub fn backward_prompts(&self, trace: &VisionTrace, grad_embedding: &[f64]) -> Result<Vec<f64>> {
        let dim = self.dim();
        if grad_embedding.len() != dim {
            return Err(Error::invalid("embedding gradient has the wrong width"));
        }
        let grad_z = Array1::from_vec(grad_embedding.to_vec());
        let grad_proj = l2_normalize_backward(&trace.embedding, trace.norm, &grad_z);
        let grad_pooled = self.proj.dot(&grad_proj).insert_axis(Axis(0));
        let grad_class = self.ln_post.backward_input(&trace.ln_post, &grad_pooled.view());

        let mut grad = Array2::zeros((trace.final_len, dim));
        grad.row_mut(0).assign(&grad_class.row(0));
        let mut prompt_grad = vec![0.0; trace.prompts.values().len()];
        for layer in (0..self.layers()).rev() {
            grad = self.blocks[layer].backward_input(&trace.blocks[layer], &grad.view());
            grad = split_layer_grad(
                grad,
                trace.base_len,
                trace.prev_lens[layer],
                &trace.prompts,
                layer,
                &mut prompt_grad,
            );
        }
        Ok(prompt_grad)
    }

    pub(crate) fn params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("vision.patch_proj".into(), self.patch_proj.as_slice().unwrap()),
            ("vision.class_token".into(), self.class_token.as_slice().unwrap()),
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, values) in block.params() {
                out.push((format!("vision.blocks.{i}.{name}"), values));
            }
        }
        out.push(("vision.ln_post.gamma".into(), self.ln_post.gamma.as_slice().unwrap()));
        out.push(("vision.ln_post.beta".into(), self.ln_post.beta.as_slice().unwrap()));
        out.push(("vision.proj".into(), self.proj.as_slice().unwrap()));
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.patch_proj.as_slice_mut().unwrap(),
            self.class_token.as_slice_mut().unwrap(),
        ];
        for block in &mut self.blocks {
            out.extend(block.params_mut());
        }
        out.push(self.ln_post.gamma.as_slice_mut().unwrap());
        out.push(self.ln_post.beta.as_slice_mut().unwrap());
        out.push(self.proj.as_slice_mut().unwrap());
        out
    }
}
