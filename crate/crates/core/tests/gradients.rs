use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use whyprompt_core::encoder::{Embedding, EncoderConfig, Image, TinyClip, VisionLanguageBackend};
use whyprompt_core::prompt::{init_prompts, InitScheme, PromptMode, PromptParams};
use whyprompt_core::trainer::{batch_loss, batch_loss_and_prompt_grad, PairLabels, DEFAULT_TEMPERATURE};

const WORDS: &[&str] = &["red", "wing", "stripe", "beak", "fur", "claw", "shell", "tail", "leaf", "spot"];

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let data = (0..size * size * 3).map(|_| rng.random::<f64>()).collect();
    Image::new(size, size, 3, data).unwrap()
}

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let w = |rng: &mut ChaCha8Rng| WORDS[rng.random_range(0..WORDS.len())];
    format!("This is a photo of {} because there is {} {}", w(rng), w(rng), w(rng))
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-300)
}

/// Central differences of the untraced batch loss, one coordinate at a time.
fn numeric_gradient(
    backend: &TinyClip,
    images: &[Image],
    text: &[Embedding],
    labels: &PairLabels,
    temperature: f64,
    prompts: &PromptParams,
    eps: f64,
) -> Vec<f64> {
    let loss_at = |values: Vec<f64>| {
        let p = PromptParams::from_values(prompts.mode(), prompts.layers(), prompts.len(), prompts.dim(), values).unwrap();
        batch_loss(backend, images, text, labels, temperature, &p).unwrap()
    };
    (0..prompts.values().len())
        .map(|i| {
            let mut plus = prompts.values().to_vec();
            let mut minus = plus.clone();
            plus[i] += eps;
            minus[i] -= eps;
            (loss_at(plus) - loss_at(minus)) / (2.0 * eps)
        })
        .collect()
}

fn check_instance(seed: u64, mode: PromptMode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backend = TinyClip::new(EncoderConfig::tiny(seed)).unwrap();
    let images: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 16)).collect();
    let sentences: Vec<String> = (0..4).map(|_| random_sentence(&mut rng)).collect();
    let text: Vec<Embedding> = sentences.iter().map(|s| backend.encode_text(s).unwrap()).collect();
    let labels = PairLabels::identity(4);
    // larger-than-default init so every prompt coordinate carries signal
    let init = init_prompts(mode, 2, 32, Some(2), InitScheme::Gaussian, seed).unwrap();
    let values = init.values().iter().map(|v| v * 25.0).collect();
    let prompts = PromptParams::from_values(mode, init.layers(), 2, 32, values).unwrap();

    let image_refs: Vec<&Image> = images.iter().collect();
    let text_refs: Vec<&Embedding> = text.iter().collect();
    let (loss, analytic) =
        batch_loss_and_prompt_grad(&backend, &image_refs, &text_refs, &labels, DEFAULT_TEMPERATURE, &prompts).unwrap();
    let plain = batch_loss(&backend, &images, &text, &labels, DEFAULT_TEMPERATURE, &prompts).unwrap();
    assert!((loss - plain).abs() < 1e-12, "traced and plain losses differ");
    let numeric = numeric_gradient(&backend, &images, &text, &labels, DEFAULT_TEMPERATURE, &prompts, 1e-4);
    relative_error(&analytic, &numeric)
}

#[test]
fn input_prompt_gradient_matches_central_differences() {
    for seed in 0..5 {
        let err = check_instance(seed, PromptMode::Input);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn deep_prompt_gradient_matches_central_differences() {
    for seed in 5..10 {
        let err = check_instance(seed, PromptMode::Deep);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn deep_append_gradient_matches_central_differences() {
    let err = check_instance(42, PromptMode::DeepAppend);
    assert!(err <= 1e-4, "relative error {err:e}");
}

#[test]
fn shared_sentence_labels_gradient_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let backend = TinyClip::new(EncoderConfig::tiny(99)).unwrap();
    let images: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 16)).collect();
    let sentences = ["a photo of fur", "a photo of claw", "a photo of fur", "a photo of beak"];
    let text: Vec<Embedding> = sentences.iter().map(|s| backend.encode_text(s).unwrap()).collect();
    let labels = PairLabels::from_shared_sentences(&sentences);
    let init = init_prompts(PromptMode::Input, 3, 32, None, InitScheme::Gaussian, 3).unwrap();
    let prompts =
        PromptParams::from_values(PromptMode::Input, 1, 3, 32, init.values().iter().map(|v| v * 25.0).collect()).unwrap();
    let (_, analytic) = batch_loss_and_prompt_grad(
        &backend,
        &images.iter().collect::<Vec<_>>(),
        &text.iter().collect::<Vec<_>>(),
        &labels,
        0.5,
        &prompts,
    )
    .unwrap();
    let numeric = numeric_gradient(&backend, &images, &text, &labels, 0.5, &prompts, 1e-4);
    assert!(relative_error(&analytic, &numeric) <= 1e-4);
}
