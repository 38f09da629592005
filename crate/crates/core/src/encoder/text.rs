use ndarray::{s, Array2};
use rand::Rng;

use super::nn::{gaussian_matrix, Block, LayerNorm};
use super::Embedding;
use crate::error::{Error, Result};
use crate::hash::fnv1a64;

pub const PAD_TOKEN: u32 = 0;
pub const EOS_TOKEN: u32 = 1;
const FIRST_WORD_TOKEN: u32 = 2;

/// Hashing tokenizer: lowercases, splits on anything that is not
/// alphanumeric, hashes each word into `[2, vocab_size)`, truncates to leave
/// room for EOS, appends EOS and pads with PAD to `max_len`.
///
/// Returns the padded ids and the position of the EOS token.
pub fn tokenize(sentence: &str, vocab_size: usize, max_len: usize) -> Result<(Vec<u32>, usize)> {
    if sentence.trim().is_empty() {
        return Err(Error::invalid("cannot encode an empty sentence"));
    }
    let buckets = (vocab_size as u64).saturating_sub(FIRST_WORD_TOKEN as u64);
    if buckets == 0 || max_len < 2 {
        return Err(Error::invalid("tokenizer needs vocab_size >= 3 and max_len >= 2"));
    }
    let lowered = sentence.to_lowercase();
    let mut ids: Vec<u32> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .take(max_len - 1)
        .map(|w| FIRST_WORD_TOKEN + (fnv1a64(w.as_bytes()) % buckets) as u32)
        .collect();
    if ids.is_empty() {
        return Err(Error::invalid(format!("sentence {sentence:?} has no word tokens")));
    }
    let eos = ids.len();
    ids.push(EOS_TOKEN);
    ids.resize(max_len, PAD_TOKEN);
    Ok((ids, eos))
}

/// Causal text transformer pooled at the EOS token.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTower {
    pub(crate) vocab_size: usize,
    pub(crate) max_len: usize,
    /// `vocab × d`
    pub(crate) token_embedding: Array2<f64>,
    /// `max_len × d`
    pub(crate) positional: Array2<f64>,
    pub(crate) blocks: Vec<Block>,
    pub(crate) ln_final: LayerNorm,
    /// `d × d`
    pub(crate) proj: Array2<f64>,
}

impl TextTower {
    pub(crate) fn init<R: Rng>(rng: &mut R, layers: usize, dim: usize, heads: usize, vocab_size: usize, max_len: usize) -> Self {
        TextTower {
            vocab_size,
            max_len,
            token_embedding: gaussian_matrix(rng, vocab_size, dim, 0.02),
            positional: gaussian_matrix(rng, max_len, dim, 0.01),
            blocks: (0..layers).map(|_| Block::init(rng, dim, heads)).collect(),
            ln_final: LayerNorm::new(dim),
            proj: gaussian_matrix(rng, dim, dim, (dim as f64).powf(-0.5)),
        }
    }

    pub fn encode(&self, sentence: &str) -> Result<Embedding> {
        let (ids, eos) = tokenize(sentence, self.vocab_size, self.max_len)?;
        // Under the causal mask nothing after EOS can reach it, so the padded
        // tail is skipped.
        let len = eos + 1;
        let dim = self.token_embedding.ncols();
        let mut x = Array2::zeros((len, dim));
        for (pos, (mut row, &id)) in x.rows_mut().into_iter().zip(&ids[..len]).enumerate() {
            row.assign(&(&self.token_embedding.row(id as usize) + &self.positional.row(pos)));
        }
        for block in &self.blocks {
            x = block.forward(&x.view(), true);
        }
        let (pooled, _) = self.ln_final.forward(&x.slice(s![eos..eos + 1, ..]));
        Embedding::normalized(pooled.row(0).dot(&self.proj).to_vec())
    }

    pub(crate) fn params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("text.token_embedding".into(), self.token_embedding.as_slice().unwrap()),
            ("text.positional".into(), self.positional.as_slice().unwrap()),
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, values) in block.params() {
                out.push((format!("text.blocks.{i}.{name}"), values));
            }
        }
        out.push(("text.ln_final.gamma".into(), self.ln_final.gamma.as_slice().unwrap()));
        out.push(("text.ln_final.beta".into(), self.ln_final.beta.as_slice().unwrap()));
        out.push(("text.proj".into(), self.proj.as_slice().unwrap()));
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.token_embedding.as_slice_mut().unwrap(),
            self.positional.as_slice_mut().unwrap(),
        ];
        for block in &mut self.blocks {
            out.extend(block.params_mut());
        }
        out.push(self.ln_final.gamma.as_slice_mut().unwrap());
        out.push(self.ln_final.beta.as_slice_mut().unwrap());
        out.push(self.proj.as_slice_mut().unwrap());
        out
    }
}
