//! Dataset construction: query templates, rationale and image sources,
//! manifests and splits.

mod build;
mod loader;
mod manifest_io;
mod parse;
pub mod sources;
mod split;
mod templates;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use build::{build_manifest, collect_images, BuildConfig, BuildOutput, CollectOutput, CollectedImage, ImageFilter, ImageStore, SkipRecord};
pub use loader::{mock_image_ref, parse_mock_image_ref, FsImageLoader, ImageLoader, ProceduralImageLoader};
pub use manifest_io::{read_manifest, read_manifest_file, write_manifest, write_manifest_file, MANIFEST_FORMAT, MANIFEST_VERSION};
pub use parse::parse_rationale_response;
pub use split::{split_manifest, DEFAULT_TRAIN_FRACTION};
pub use templates::{
    parse_image_query, parse_query_subject, render_hierarchical_sentence, render_image_queries, render_rationale_query,
    render_subrationale_queries,
};

/// Lowercases, trims and collapses runs of whitespace.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

macro_rules! text_newtype {
    ($(#[$doc:meta])* $name:ident, $what:literal) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl std::ops::Deref for $name {
            type Target = str;

            fn deref(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = Error;

            fn try_from(s: String) -> Result<Self> {
                $name::new(&s)
            }
        }

        impl TryFrom<&str> for $name {
            type Error = Error;

            fn try_from(s: &str) -> Result<Self> {
                $name::new(s)
            }
        }

        impl std::str::FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $name::new(s)
            }
        }

        impl PartialEq<str> for $name {
            fn eq(&self, other: &str) -> bool {
                self.0 == other
            }
        }

        impl PartialEq<&str> for $name {
            fn eq(&self, other: &&str) -> bool {
                self.0 == *other
            }
        }
    };
}

text_newtype!(
    /// A category label: lowercase, trimmed, single-line.
    CategoryName,
    "category"
);
text_newtype!(
    /// A visual feature explaining a category.
    Rationale,
    "rationale"
);
text_newtype!(
    /// A finer feature explaining a rationale.
    SubRationale,
    "sub-rationale"
);

impl CategoryName {
    pub fn new(text: &str) -> Result<Self> {
        if text.contains(['\n', '\r']) {
            return Err(Error::invalid(format!("category {text:?} spans multiple lines")));
        }
        let norm = normalize_text(text);
        if norm.is_empty() {
            return Err(Error::invalid("category must not be empty"));
        }
        Ok(CategoryName(norm))
    }
}

impl Rationale {
    pub fn new(text: &str) -> Result<Self> {
        let norm = normalize_text(text);
        if norm.is_empty() {
            return Err(Error::invalid("rationale must not be empty"));
        }
        Ok(Rationale(norm))
    }
}

impl SubRationale {
    pub fn new(text: &str) -> Result<Self> {
        let norm = normalize_text(text);
        if norm.is_empty() {
            return Err(Error::invalid("sub-rationale must not be empty"));
        }
        Ok(SubRationale(norm))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One collected image with its labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_ref: String,
    pub category: CategoryName,
    pub rationale: Rationale,
    pub sub_rationale: Option<SubRationale>,
    /// `None` until [`split_manifest`] assigns it.
    pub split: Option<Split>,
    pub source_query: String,
    /// 16 lowercase hex digits of the FNV-1a hash of the image bytes.
    pub content_hash: String,
}

impl Sample {
    pub fn make_id(category: &CategoryName, content_hash: &str) -> String {
        format!("{}-{}", category.replace(' ', "_"), content_hash)
    }

    fn sort_key(&self) -> (&CategoryName, &Rationale, &str) {
        (&self.category, &self.rationale, &self.content_hash)
    }
}

/// An ordered, deduplicated set of samples.
///
/// Samples are kept sorted by (category, rationale, content hash); categories
/// and per-category rationales are the sorted distinct values found in the
/// samples, so a manifest is fully determined by its sample set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    samples: Vec<Sample>,
    categories: Vec<CategoryName>,
    rationales: BTreeMap<CategoryName, Vec<Rationale>>,
}

impl Manifest {
    pub fn from_samples(mut samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.content_hash.as_str()) {
                return Err(Error::invalid(format!("duplicate content hash {}", s.content_hash)));
            }
        }
        samples.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let mut rationales: BTreeMap<CategoryName, BTreeSet<Rationale>> = BTreeMap::new();
        for s in &samples {
            rationales.entry(s.category.clone()).or_default().insert(s.rationale.clone());
        }
        Ok(Manifest {
            categories: rationales.keys().cloned().collect(),
            rationales: rationales
                .into_iter()
                .map(|(c, rs)| (c, rs.into_iter().collect()))
                .collect(),
            samples,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn categories(&self) -> &[CategoryName] {
        &self.categories
    }

    pub fn rationale_map(&self) -> &BTreeMap<CategoryName, Vec<Rationale>> {
        &self.rationales
    }

    pub fn rationales(&self, category: &CategoryName) -> &[Rationale] {
        self.rationales.get(category).map_or(&[], Vec::as_slice)
    }

    /// Sorted distinct sub-rationales seen for each (category, rationale).
    pub fn sub_rationales(&self) -> BTreeMap<(CategoryName, Rationale), Vec<SubRationale>> {
        let mut out: BTreeMap<(CategoryName, Rationale), BTreeSet<SubRationale>> = BTreeMap::new();
        for s in &self.samples {
            if let Some(sub) = &s.sub_rationale {
                out.entry((s.category.clone(), s.rationale.clone()))
                    .or_default()
                    .insert(sub.clone());
            }
        }
        out.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect()
    }

    pub fn split_samples(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == Some(split))
    }

    /// Samples of `split`, or every sample when `split` is `None`.
    pub fn select(&self, split: Option<Split>) -> Vec<&Sample> {
        match split {
            Some(sp) => self.split_samples(sp).collect(),
            None => self.samples.iter().collect(),
        }
    }

    /// Image counts per category.
    pub fn category_histogram(&self) -> BTreeMap<CategoryName, usize> {
        let mut hist = BTreeMap::new();
        for s in &self.samples {
            *hist.entry(s.category.clone()).or_insert(0) += 1;
        }
        hist
    }

    pub(crate) fn samples_mut(&mut self) -> &mut [Sample] {
        &mut self.samples
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn sample(category: &str, rationale: &str, hash: u64) -> Sample {
        let category = CategoryName::new(category).unwrap();
        let content_hash = format!("{hash:016x}");
        Sample {
            id: Sample::make_id(&category, &content_hash),
            image_ref: format!("mock://{category}/{rationale}/{hash}"),
            category,
            rationale: Rationale::new(rationale).unwrap(),
            sub_rationale: None,
            split: None,
            source_query: format!("{rationale} of x"),
            content_hash,
        }
    }
}
