//! Why-prompt learning: contrastive image-to-text training that updates only
//! the prompt parameters of a frozen backend.

mod loss;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{render_hierarchical_sentence, ImageLoader, Manifest, Sample, Split};
use crate::encoder::{Embedding, Image, PromptGradient};
use crate::error::{Error, Result};
use crate::par;
use crate::prompt::{init_prompts, InitScheme, PromptMode, PromptParams};

pub use loss::{contrastive_loss, contrastive_loss_with_grad, PairLabels};

/// `"This is a photo of {category} because there is {rationale}"`.
pub fn render_training_sentence(category: &str, rationale: &str) -> Result<String> {
    let (category, rationale) = (category.trim(), rationale.trim());
    if category.is_empty() || rationale.is_empty() {
        return Err(Error::invalid("training sentence needs a category and a rationale"));
    }
    Ok(format!("This is a photo of {category} because there is {rationale}"))
}

/// Sentence a sample is trained and evaluated against.
pub fn sample_sentence(sample: &Sample, hierarchical: bool) -> Result<String> {
    match (&sample.sub_rationale, hierarchical) {
        (Some(sub), true) => render_hierarchical_sentence(&sample.category, &sample.rationale, sub),
        (None, true) => Err(Error::invalid(format!(
            "sample {} has no sub-rationale for hierarchical training",
            sample.id
        ))),
        (_, false) => render_training_sentence(&sample.category, &sample.rationale),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sgd_momentum" | "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
            other => Err(Error::invalid(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Which in-batch image/text pairs count as positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pairing {
    /// Every text whose sentence equals the image's own sentence.
    #[default]
    SharedSentence,
    /// Only the image's own text.
    DiagonalOnly,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub prompt_mode: PromptMode,
    pub prompt_length: usize,
    pub init: InitScheme,
    pub pairing: Pairing,
    /// Train on `(category, rationale, sub-rationale)` sentences.
    pub hierarchical: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::small()
    }
}

impl TrainConfig {
    /// Deep prompts of length 30, learning rate 10, 10 epochs.
    pub fn imagenet_plus() -> Self {
        TrainConfig {
            learning_rate: 10.0,
            epochs: 10,
            prompt_mode: PromptMode::Deep,
            prompt_length: 30,
            ..TrainConfig::small()
        }
    }

    /// Input prompts of length 3, learning rate 40, 100 epochs.
    pub fn small() -> Self {
        TrainConfig {
            learning_rate: 40.0,
            epochs: 100,
            temperature: DEFAULT_TEMPERATURE,
            batch_size: DEFAULT_BATCH_SIZE,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            prompt_mode: PromptMode::Input,
            prompt_length: 3,
            init: InitScheme::Gaussian,
            pairing: Pairing::SharedSentence,
            hierarchical: false,
        }
    }

    /// The small preset with prompt length 100.
    pub fn sun_plus() -> Self {
        TrainConfig {
            prompt_length: 100,
            ..TrainConfig::small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Plain or momentum SGD over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    velocity: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, len: usize) -> Self {
        Optimizer {
            kind,
            learning_rate,
            velocity: vec![0.0; len],
        }
    }

    /// Applies one update and rounds the result to `f32` precision, which is
    /// what checkpoints store.
    pub fn step(&mut self, prompts: &mut PromptParams, grad: &[f64]) -> Result<()> {
        if grad.len() != prompts.values().len() || grad.len() != self.velocity.len() {
            return Err(Error::invalid("gradient length does not match the prompts"));
        }
        for ((p, &g), v) in prompts.values_mut().iter_mut().zip(grad).zip(self.velocity.iter_mut()) {
            let direction = match self.kind {
                OptimizerKind::Sgd => g,
                OptimizerKind::SgdMomentum => {
                    *v = MOMENTUM * *v + g;
                    *v
                }
            };
            let delta = self.learning_rate * direction;
            if delta != 0.0 {
                *p = (*p - delta) as f32 as f64;
            }
        }
        Ok(())
    }
}

/// One image paired with the sentence it should retrieve.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub image: Image,
    pub sentence: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub prompts: PromptParams,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
}

fn stack_rows(rows: &[&Embedding]) -> Array2<f64> {
    let dim = rows.first().map_or(0, |e| e.dim());
    let mut out = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(src.values()));
    }
    out
}

/// Contrastive loss of a batch under `prompts`, via the plain (untraced)
/// forward pass.
pub fn batch_loss<B: PromptGradient + ?Sized>(
    backend: &B,
    images: &[Image],
    text: &[Embedding],
    labels: &PairLabels,
    temperature: f64,
    prompts: &PromptParams,
) -> Result<f64> {
    let image_embeddings = par::try_map(images, |img| backend.encode_image(img, Some(prompts)))?;
    let image_rows: Vec<&Embedding> = image_embeddings.iter().collect();
    let text_rows: Vec<&Embedding> = text.iter().collect();
    contrastive_loss(&stack_rows(&image_rows), &stack_rows(&text_rows), labels, temperature)
}

/// Contrastive loss of a batch and its gradient with respect to the prompt
/// values. Per-image work runs in parallel; gradients are summed in batch
/// order.
pub fn batch_loss_and_prompt_grad<B: PromptGradient + ?Sized>(
    backend: &B,
    images: &[&Image],
    text: &[&Embedding],
    labels: &PairLabels,
    temperature: f64,
    prompts: &PromptParams,
) -> Result<(f64, Vec<f64>)> {
    let traced = par::try_map(images, |img| backend.encode_image_traced(img, prompts))?;
    let image_rows: Vec<&Embedding> = traced.iter().map(|(e, _)| e).collect();
    let (loss, grad_image) = contrastive_loss_with_grad(&stack_rows(&image_rows), &stack_rows(text), labels, temperature)?;
    let per_image = par::try_map_indexed(traced.len(), |i| {
        let row = grad_image.row(i);
        backend.prompt_gradient(&traced[i].1, row.as_slice().expect("contiguous row"))
    })?;
    let mut grad = vec![0.0; prompts.values().len()];
    for g in per_image {
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok((loss, grad))
}

/// Trains prompts on in-memory examples. The backend is only borrowed
/// immutably, so its weights cannot change.
pub fn train_on_examples<B: PromptGradient + ?Sized>(
    examples: &[TrainingExample],
    backend: &B,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut prompts = init_prompts(
        config.prompt_mode,
        config.prompt_length,
        backend.dims(),
        Some(backend.vision_layers()),
        config.init,
        config.seed,
    )?;

    // the text encoder is frozen, so each distinct sentence is encoded once
    let mut unique: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in examples {
        let next = unique.len();
        unique.entry(ex.sentence.as_str()).or_insert(next);
    }
    let mut sentences: Vec<&str> = vec![""; unique.len()];
    for (&s, &i) in &unique {
        sentences[i] = s;
    }
    let text_cache = par::try_map(&sentences, |s| backend.encode_text(s))?;
    let text_index: Vec<usize> = examples.iter().map(|ex| unique[ex.sentence.as_str()]).collect();

    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, prompts.values().len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut batches = 0usize;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<&Image> = batch.iter().map(|&i| &examples[i].image).collect();
            let text: Vec<&Embedding> = batch.iter().map(|&i| &text_cache[text_index[i]]).collect();
            let labels = match config.pairing {
                Pairing::SharedSentence => PairLabels::from_fn(batch.len(), |a, b| text_index[batch[a]] == text_index[batch[b]]),
                Pairing::DiagonalOnly => PairLabels::identity(batch.len()),
            };
            let (loss, grad) = batch_loss_and_prompt_grad(backend, &images, &text, &labels, config.temperature, &prompts)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::Diverged {
                        epoch,
                        step,
                        detail: format!("non-finite {what}"),
                    },
                    other => other,
                })?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("loss {loss}, try a smaller learning rate"),
                });
            }
            optimizer.step(&mut prompts, &grad)?;
            epoch_total += loss;
            batches += 1;
        }
        let mean = epoch_total / batches as f64;
        log::debug!("epoch={epoch} mean_loss={mean:.6}");
        loss_curve.push(mean);
    }
    Ok(TrainOutput { prompts, loss_curve })
}

/// Loads the manifest's train split and trains prompts on it.
pub fn train_why_prompt<B: PromptGradient + ?Sized>(
    manifest: &Manifest,
    loader: &dyn ImageLoader,
    backend: &B,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    let samples: Vec<&Sample> = manifest.split_samples(Split::Train).collect();
    if samples.is_empty() {
        return Err(Error::invalid("manifest has no training samples"));
    }
    let examples = par::try_map(&samples, |s| {
        Ok(TrainingExample {
            image: loader.load(s)?,
            sentence: sample_sentence(s, config.hierarchical)?,
        })
    })?;
    train_on_examples(&examples, backend, config)
}

/// Loss curve as `epoch,mean_loss` CSV.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (epoch, loss) in curve.iter().enumerate() {
        out.push_str(&format!("{},{loss:.9}\n", epoch + 1));
    }
    out
}
