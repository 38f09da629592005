//! Procedural images with a recognisable pattern per (category, rationale).
//!
//! The category contributes a tinted sinusoidal grating; the rationale
//! contributes a blocky texture on a 4×4 grid that is the same under every
//! category. Instances differ by grating phase and pixel noise. The mock
//! image source and the synthetic test datasets draw from here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{mock_image_ref, render_image_queries, CategoryName, Manifest, Rationale, Sample, SubRationale};
use crate::encoder::Image;
use crate::error::Result;
use crate::hash::{fnv1a64, fnv1a64_hex};

const CHANNELS: usize = 3;
const GRID: usize = 4;
const CATEGORY_AMPLITUDE: f64 = 0.22;
const RATIONALE_AMPLITUDE: f64 = 0.22;
const NOISE_AMPLITUDE: f64 = 0.04;

fn seeded(tag: &str, text: &str) -> ChaCha8Rng {
    let mut key = Vec::with_capacity(tag.len() + 1 + text.len());
    key.extend_from_slice(tag.as_bytes());
    key.push(0);
    key.extend_from_slice(text.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&key))
}

/// Renders instance `instance` of the (category, rationale) pattern at
/// `size × size × 3`.
pub fn render(category: &str, rationale: &str, instance: u64, size: usize) -> Image {
    let mut cat_rng = seeded("category", category);
    let tint: [f64; CHANNELS] = std::array::from_fn(|_| cat_rng.random_range(-1.0..1.0));
    let angle = cat_rng.random_range(0.0..std::f64::consts::PI);
    let cycles = cat_rng.random_range(1.0..4.0);

    let mut rat_rng = seeded("rationale", rationale);
    let cells: Vec<f64> = (0..GRID * GRID * CHANNELS)
        .map(|_| rat_rng.random_range(-1.0..1.0))
        .collect();

    let mut inst_rng = seeded("instance", &format!("{category}\u{1f}{rationale}\u{1f}{instance}"));
    let phase = inst_rng.random_range(0.0..std::f64::consts::TAU);

    let (sin_a, cos_a) = angle.sin_cos();
    let freq = std::f64::consts::TAU * cycles / size as f64;
    let cell = size.div_ceil(GRID);
    let mut data = Vec::with_capacity(size * size * CHANNELS);
    for y in 0..size {
        for x in 0..size {
            let wave = ((x as f64 * cos_a + y as f64 * sin_a) * freq + phase).sin();
            let (gy, gx) = ((y / cell).min(GRID - 1), (x / cell).min(GRID - 1));
            for c in 0..CHANNELS {
                let block = cells[(gy * GRID + gx) * CHANNELS + c];
                let noise = inst_rng.random_range(-1.0..1.0) * NOISE_AMPLITUDE;
                let v = 0.5 + CATEGORY_AMPLITUDE * tint[c] * wave + RATIONALE_AMPLITUDE * block + noise;
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(size, size, CHANNELS, data).expect("buffer sized above")
}

/// Binary PPM (`P6`) encoding, 8 bits per channel.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Unsplit manifest of `images_per_group` procedural images for every
/// category/rationale pair in `groups`, and for every sub-rationale in `subs`
/// when that is nonempty. Images reference `mock://` URIs, so they load with
/// [`crate::dataset::ProceduralImageLoader`].
pub fn manifest(groups: &[(&str, &[&str])], subs: &[&str], images_per_group: usize, size: usize) -> Result<Manifest> {
    let sub_options: Vec<Option<&str>> = if subs.is_empty() {
        vec![None]
    } else {
        subs.iter().copied().map(Some).collect()
    };
    let mut samples = Vec::new();
    for &(category, rationales) in groups {
        let category = CategoryName::new(category)?;
        for &rationale in rationales {
            let rationale = Rationale::new(rationale)?;
            let source_query = render_image_queries(&category, &rationale)?[0].clone();
            for sub in &sub_options {
                let sub = sub.map(SubRationale::new).transpose()?;
                let pattern = match &sub {
                    Some(s) => format!("{s} {rationale}"),
                    None => rationale.to_string(),
                };
                for i in 0..images_per_group as u64 {
                    let content_hash = fnv1a64_hex(&encode_ppm(&render(&category, &pattern, i, size)));
                    samples.push(Sample {
                        id: Sample::make_id(&category, &content_hash),
                        image_ref: mock_image_ref(&category, &pattern, i),
                        category: category.clone(),
                        rationale: rationale.clone(),
                        sub_rationale: sub.clone(),
                        split: None,
                        source_query: source_query.clone(),
                        content_hash,
                    });
                }
            }
        }
    }
    Manifest::from_samples(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic_and_distinct() {
        let a = render("dog", "four legs", 0, 32);
        assert_eq!(a, render("dog", "four legs", 0, 32));
        assert_ne!(a, render("dog", "four legs", 1, 32));
        assert_ne!(a, render("dog", "a tail", 0, 32));
        assert_ne!(a, render("cat", "four legs", 0, 32));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn manifest_covers_every_group() {
        let m = manifest(&[("ant", &["legs", "wings"]), ("bee", &["stripes"])], &[], 3, 16).unwrap();
        assert_eq!(m.len(), 9);
        assert_eq!(m.categories().len(), 2);
        let h = manifest(&[("ant", &["legs"])], &["long", "short"], 2, 16).unwrap();
        assert_eq!(h.len(), 4);
        assert_eq!(h.sub_rationales().values().next().unwrap().len(), 2);
    }

    #[test]
    fn ppm_header_and_size() {
        let img = render("cat", "whiskers", 3, 8);
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n8 8\n255\n"));
        assert_eq!(bytes.len(), "P6\n8 8\n255\n".len() + 8 * 8 * 3);
    }
}
