use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Manifest, Split};
use crate::error::{Error, Result};
use crate::hash::fnv1a64;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// Number of training samples for a group of `size`.
fn train_count(size: usize, fraction: f64) -> usize {
    if size < 2 {
        return size;
    }
    ((size as f64 * fraction).round() as usize).clamp(1, size - 1)
}

/// Assigns train/test splits, stratified by (category, rationale).
///
/// Each group is shuffled with an RNG derived from `seed` and the group key,
/// so a group's assignment does not depend on the rest of the manifest.
pub fn split_manifest(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<Manifest> {
    if manifest.is_empty() {
        return Err(Error::invalid("cannot split an empty manifest"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples().iter().enumerate() {
        groups.entry((s.category.as_str(), s.rationale.as_str())).or_default().push(i);
    }
    let mut assignment = vec![Split::Test; manifest.len()];
    for ((category, rationale), mut members) in groups {
        let key = format!("{category}\u{1f}{rationale}");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(key.as_bytes()));
        members.shuffle(&mut rng);
        for &i in &members[..train_count(members.len(), train_fraction)] {
            assignment[i] = Split::Train;
        }
    }
    let mut out = manifest.clone();
    for (sample, split) in out.samples_mut().iter_mut().zip(assignment) {
        sample.split = Some(split);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::dataset::test_support::sample;

    fn manifest(groups: usize, per_group: usize) -> Manifest {
        let mut samples = Vec::new();
        for g in 0..groups {
            for i in 0..per_group {
                samples.push(sample(&format!("c{}", g % 3), &format!("r{g}"), (g * 1000 + i) as u64));
            }
        }
        Manifest::from_samples(samples).unwrap()
    }

    fn counts(m: &Manifest) -> (usize, usize) {
        (m.split_samples(Split::Train).count(), m.split_samples(Split::Test).count())
    }

    #[test]
    fn single_group_of_ten() {
        let m = split_manifest(&manifest(1, 10), 0.8, 0).unwrap();
        assert_eq!(counts(&m), (8, 2));
    }

    #[test]
    fn five_groups_of_five() {
        // round(5 * 0.8) = 4 per group
        let m = split_manifest(&manifest(5, 5), 0.8, 0).unwrap();
        assert_eq!(counts(&m), (20, 5));
    }

    #[test]
    fn small_groups() {
        assert_eq!(train_count(1, 0.8), 1);
        assert_eq!(train_count(2, 0.8), 1);
        assert_eq!(train_count(2, 0.1), 1);
        assert_eq!(train_count(3, 0.99), 2);
        let m = split_manifest(&manifest(1, 1), 0.8, 3).unwrap();
        assert_eq!(counts(&m), (1, 0));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(split_manifest(&manifest(1, 4), 0.0, 0).is_err());
        assert!(split_manifest(&manifest(1, 4), 1.0, 0).is_err());
        assert!(split_manifest(&Manifest::from_samples(Vec::new()).unwrap(), 0.8, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_deterministic_partition(groups in 1usize..6, per_group in 1usize..9, fraction in 0.05f64..0.95, seed in any::<u64>()) {
            let m = manifest(groups, per_group);
            let a = split_manifest(&m, fraction, seed).unwrap();
            let b = split_manifest(&m, fraction, seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.samples().iter().all(|s| s.split.is_some()));
            let (train, test) = counts(&a);
            prop_assert_eq!(train + test, m.len());
            for (x, y) in a.samples().iter().zip(m.samples()) {
                prop_assert_eq!(&x.content_hash, &y.content_hash);
            }
            if per_group >= 2 {
                prop_assert_eq!(test, groups * (per_group - train_count(per_group, fraction)));
                prop_assert!(test >= groups);
            }
        }
    }
}
