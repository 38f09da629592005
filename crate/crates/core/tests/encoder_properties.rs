use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use whyprompt_core::encoder::{
    load_encoder_checkpoint, save_encoder_checkpoint, EncoderConfig, Image, PromptGradient, TinyClip, VisionLanguageBackend,
};
use whyprompt_core::prompt::{init_prompts, InitScheme, PromptMode};

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn tiny() -> TinyClip {
    TinyClip::new(EncoderConfig::tiny(0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn image_embeddings_are_unit_norm(seed in any::<u64>(), k in 0usize..4, deep in any::<bool>()) {
        let model = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = random_image(&mut rng, 32, 32);
        let mode = if deep { PromptMode::Deep } else { PromptMode::Input };
        let prompts = init_prompts(mode, k, 32, Some(2), InitScheme::Gaussian, seed).unwrap();
        let z = model.encode_image(&image, Some(&prompts)).unwrap();
        prop_assert!((z.norm() - 1.0).abs() <= 1e-6);
        prop_assert!(z.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn text_embeddings_are_unit_norm(words in prop::collection::vec("[a-z]{1,8}", 1..12)) {
        let z = tiny().encode_text(&words.join(" ")).unwrap();
        prop_assert!((z.norm() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn weights_are_determined_by_the_seed() {
    let a = tiny();
    let b = tiny();
    assert_eq!(a.parameters(), b.parameters());
    let c = TinyClip::new(EncoderConfig::tiny(1)).unwrap();
    assert_ne!(a.parameters(), c.parameters());
}

#[test]
fn repeated_calls_are_bitwise_identical() {
    let model = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = random_image(&mut rng, 32, 32);
    let prompts = init_prompts(PromptMode::Deep, 3, 32, Some(2), InitScheme::Gaussian, 1).unwrap();
    assert_eq!(model.encode_image(&image, None).unwrap(), model.encode_image(&image, None).unwrap());
    assert_eq!(
        model.encode_image(&image, Some(&prompts)).unwrap(),
        model.encode_image(&image, Some(&prompts)).unwrap()
    );
    assert_eq!(model.encode_text("a photo of dog").unwrap(), model.encode_text("a photo of dog").unwrap());
}

#[test]
fn zero_length_prompts_are_exact_no_ops() {
    let model = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let input = init_prompts(PromptMode::Input, 0, 32, None, InitScheme::Gaussian, 0).unwrap();
    let deep = init_prompts(PromptMode::Deep, 0, 32, Some(2), InitScheme::Gaussian, 0).unwrap();
    for _ in 0..20 {
        let image = random_image(&mut rng, 32, 32);
        let plain = model.encode_image(&image, None).unwrap();
        assert_eq!(model.encode_image(&image, Some(&input)).unwrap(), plain);
        assert_eq!(model.encode_image(&image, Some(&deep)).unwrap(), plain);
    }
}

#[test]
fn one_word_changes_the_text_embedding() {
    let model = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let word = |rng: &mut ChaCha8Rng| -> String {
        let len = rng.random_range(3..9);
        (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
    };
    let mut seen = HashSet::new();
    let mut pairs = 0;
    while pairs < 100 {
        let (a, b) = (word(&mut rng), word(&mut rng));
        if a == b || !seen.insert((a.clone(), b.clone())) {
            continue;
        }
        let za = model.encode_text(&format!("a photo of {a}")).unwrap();
        let zb = model.encode_text(&format!("a photo of {b}")).unwrap();
        assert_ne!(za, zb, "{a} and {b} collide");
        pairs += 1;
    }
}

#[test]
fn patch_grid_geometry() {
    let model = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(model.vision().patchify(&random_image(&mut rng, 32, 32)).unwrap().len(), 16);
    assert!(model.vision().patchify(&random_image(&mut rng, 30, 32)).is_err());
    let h14 = TinyClip::new(EncoderConfig {
        patch_size: 14,
        ..EncoderConfig::tiny(0)
    })
    .unwrap();
    let seq = h14.vision().patchify(&random_image(&mut rng, 224, 224)).unwrap();
    assert_eq!(seq.len(), 256);
    assert_eq!(seq.to_matrix().nrows(), 257);
}

#[test]
fn empty_sentence_is_rejected() {
    assert!(tiny().encode_text("").is_err());
    assert!(tiny().encode_text("  ?! ").is_err());
}

#[test]
fn prompt_width_must_match() {
    let model = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = random_image(&mut rng, 32, 32);
    let narrow = init_prompts(PromptMode::Input, 2, 16, None, InitScheme::Gaussian, 0).unwrap();
    assert!(model.encode_image(&image, Some(&narrow)).is_err());
    let shallow = init_prompts(PromptMode::Deep, 2, 32, Some(3), InitScheme::Gaussian, 0).unwrap();
    assert!(model.encode_image(&image, Some(&shallow)).is_err());
    assert!(model.encode_image_traced(&image, &shallow).is_err());
}

#[test]
fn encoder_checkpoint_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.wenc");
    let model = TinyClip::new(EncoderConfig::tiny(9)).unwrap();
    save_encoder_checkpoint(&model, &path).unwrap();
    let back = load_encoder_checkpoint(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.parameters(), model.parameters());
    assert!(load_encoder_checkpoint(&dir.path().join("missing.wenc")).is_err());
}
