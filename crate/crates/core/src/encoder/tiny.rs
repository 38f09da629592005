use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EncoderConfig, Embedding, Image, PromptGradient, TextTower, VisionLanguageBackend, VisionTower, VisionTrace};
use crate::error::Result;
use crate::prompt::PromptParams;

/// Small dual encoder whose weights are fully determined by
/// [`EncoderConfig::seed`].
#[derive(Debug, Clone, PartialEq)]
pub struct TinyClip {
    config: EncoderConfig,
    vision: VisionTower,
    text: TextTower,
}

impl TinyClip {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let vision = VisionTower::init(&mut rng, config.layers, config.dim, config.heads, config.patch_size);
        let text = TextTower::init(
            &mut rng,
            config.layers,
            config.dim,
            config.heads,
            config.vocab_size,
            config.max_text_len,
        );
        Ok(TinyClip { config, vision, text })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vision(&self) -> &VisionTower {
        &self.vision
    }

    pub fn text(&self) -> &TextTower {
        &self.text
    }

    /// All parameter tensors in checkpoint declaration order.
    pub fn parameters(&self) -> Vec<(String, &[f64])> {
        let mut params = self.vision.params();
        params.extend(self.text.params());
        params
    }

    pub(crate) fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut params = self.vision.params_mut();
        params.extend(self.text.params_mut());
        params
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.len()).sum()
    }
}

impl VisionLanguageBackend for TinyClip {
    fn dims(&self) -> usize {
        self.config.dim
    }

    fn vision_layers(&self) -> usize {
        self.config.layers
    }

    fn encode_image(&self, image: &Image, prompts: Option<&PromptParams>) -> Result<Embedding> {
        self.vision.encode_image(image, prompts)
    }

    fn encode_text(&self, sentence: &str) -> Result<Embedding> {
        self.text.encode(sentence)
    }
}

impl PromptGradient for TinyClip {
    type Trace = VisionTrace;

    fn encode_image_traced(&self, image: &Image, prompts: &PromptParams) -> Result<(Embedding, VisionTrace)> {
        let seq = self.vision.patchify(image)?;
        self.vision.encode_sequence_traced(&seq, prompts)
    }

    fn prompt_gradient(&self, trace: &VisionTrace, grad_embedding: &[f64]) -> Result<Vec<f64>> {
        self.vision.backward_prompts(trace, grad_embedding)
    }
}
