use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use super::parse::parse_rationale_response;
use super::sources::{ImageSource, RationaleSource, RetrievedImage};
use super::templates::{render_image_queries, render_rationale_query, render_subrationale_queries};
use super::{CategoryName, Manifest, Rationale, Sample, SubRationale};
use crate::error::{Error, Result};
use crate::hash::fnv1a64_hex;
use crate::par;

/// Accepts or rejects a retrieved image ("incorrect image" removal).
pub type ImageFilter = Arc<dyn Fn(&RetrievedImage) -> bool + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectedImage {
    pub image_ref: String,
    pub content_hash: String,
    pub source_query: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct CollectOutput {
    pub images: Vec<CollectedImage>,
    pub warnings: Vec<String>,
}

/// Runs every query (concurrently), keeps at most `limit_per_query` results
/// per query, applies `filter`, and drops repeated content hashes. Output is
/// in query order, then source order. A failing query is skipped with a
/// warning.
pub fn collect_images(
    source: &dyn ImageSource,
    queries: &[String],
    limit_per_query: usize,
    filter: Option<&ImageFilter>,
) -> Result<CollectOutput> {
    if limit_per_query == 0 {
        return Err(Error::invalid("limit_per_query must be at least 1"));
    }
    let results = par::map(queries, |q| source.search(q, limit_per_query));
    let mut out = CollectOutput::default();
    let mut seen = HashSet::new();
    for (query, result) in queries.iter().zip(results) {
        let retrieved = match result {
            Ok(r) => r,
            Err(e) => {
                let msg = format!("query {query:?} failed: {e}");
                log::warn!("{msg}");
                out.warnings.push(msg);
                continue;
            }
        };
        for image in retrieved.into_iter().take(limit_per_query) {
            if filter.is_some_and(|f| !f(&image)) {
                continue;
            }
            let content_hash = fnv1a64_hex(&image.bytes);
            if !seen.insert(content_hash.clone()) {
                continue;
            }
            out.images.push(CollectedImage {
                image_ref: image.image_ref,
                content_hash,
                source_query: query.clone(),
                bytes: image.bytes,
            });
        }
    }
    Ok(out)
}

/// Where downloaded image bytes are written. Files are named
/// `{content_hash}.{ext}` inside `dir`; the manifest references them as
/// `{ref_prefix}{content_hash}.{ext}`.
#[derive(Debug, Clone)]
pub struct ImageStore {
    pub dir: PathBuf,
    pub ref_prefix: String,
}

impl ImageStore {
    fn extension(bytes: &[u8]) -> &'static str {
        if bytes.starts_with(b"\x89PNG") {
            "png"
        } else if bytes.starts_with(&[0xff, 0xd8]) {
            "jpg"
        } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
            "ppm"
        } else if bytes.starts_with(b"BM") {
            "bmp"
        } else {
            "bin"
        }
    }

    fn put(&self, image: &CollectedImage) -> Result<String> {
        let name = format!("{}.{}", image.content_hash, Self::extension(&image.bytes));
        let path = self.dir.join(&name);
        fs::write(&path, &image.bytes).map_err(|e| Error::io(&path, e))?;
        Ok(format!("{}{name}", self.ref_prefix))
    }
}

#[derive(Clone)]
pub struct BuildConfig {
    pub limit_per_query: usize,
    pub filter: Option<ImageFilter>,
    pub store: Option<ImageStore>,
    /// Also ask for sub-rationales and collect images per triple.
    pub hierarchical: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            limit_per_query: 50,
            filter: None,
            store: None,
            hierarchical: false,
        }
    }
}

impl std::fmt::Debug for BuildConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BuildConfig")
            .field("limit_per_query", &self.limit_per_query)
            .field("filter", &self.filter.as_ref().map(|_| "<fn>"))
            .field("store", &self.store)
            .field("hierarchical", &self.hierarchical)
            .finish()
    }
}

/// A category or rationale that produced nothing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipRecord {
    pub category: CategoryName,
    pub rationale: Option<Rationale>,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub manifest: Manifest,
    pub skipped: Vec<SkipRecord>,
    /// Images per category.
    pub histogram: BTreeMap<CategoryName, usize>,
    pub warnings: Vec<String>,
}

struct Job {
    category: CategoryName,
    rationale: Rationale,
    sub: Option<SubRationale>,
    queries: Vec<String>,
}

fn ask(source: &dyn RationaleSource, prompt: &str, category: &CategoryName) -> std::result::Result<Vec<Rationale>, String> {
    source
        .complete(prompt)
        .map(|text| parse_rationale_response(&text, category))
        .map_err(|e| e.to_string())
}

/// Queries rationales for every category, collects images for every
/// rationale (or sub-rationale), and assembles an unsplit manifest.
pub fn build_manifest(
    categories: &[CategoryName],
    rationale_source: &dyn RationaleSource,
    image_source: &dyn ImageSource,
    config: &BuildConfig,
) -> Result<BuildOutput> {
    if categories.is_empty() {
        return Err(Error::invalid("category list is empty"));
    }
    let mut unique = HashSet::new();
    let categories: Vec<&CategoryName> = categories.iter().filter(|c| unique.insert(*c)).collect();

    let mut skipped = Vec::new();
    let mut warnings = Vec::new();

    let answers = par::map(&categories, |c| {
        render_rationale_query(c).map(|prompt| ask(rationale_source, &prompt, c))
    });
    let mut pairs = Vec::new();
    for (category, answer) in categories.iter().zip(answers) {
        match answer? {
            Ok(rs) if !rs.is_empty() => pairs.extend(rs.into_iter().map(|r| ((*category).clone(), r))),
            Ok(_) => skipped.push(SkipRecord {
                category: (*category).clone(),
                rationale: None,
                reason: "no rationales parsed".into(),
            }),
            Err(e) => skipped.push(SkipRecord {
                category: (*category).clone(),
                rationale: None,
                reason: format!("rationale source failed: {e}"),
            }),
        }
    }

    let mut jobs = Vec::new();
    if config.hierarchical {
        let sub_answers = par::map(&pairs, |(c, r)| {
            render_subrationale_queries(c, r, None).map(|prompt| ask(rationale_source, &prompt, c))
        });
        for ((category, rationale), answer) in pairs.into_iter().zip(sub_answers) {
            let subs = match answer? {
                Ok(subs) if !subs.is_empty() => subs,
                Ok(_) | Err(_) => {
                    skipped.push(SkipRecord {
                        category,
                        rationale: Some(rationale),
                        reason: "no sub-rationales parsed".into(),
                    });
                    continue;
                }
            };
            for sub in subs {
                let sub = SubRationale::new(&sub)?;
                let query = render_subrationale_queries(&category, &rationale, Some(&sub))?;
                jobs.push(Job {
                    category: category.clone(),
                    rationale: rationale.clone(),
                    sub: Some(sub),
                    queries: vec![query],
                });
            }
        }
    } else {
        for (category, rationale) in pairs {
            let queries = render_image_queries(&category, &rationale)?.to_vec();
            jobs.push(Job {
                category,
                rationale,
                sub: None,
                queries,
            });
        }
    }

    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for job in &jobs {
        let collected = collect_images(image_source, &job.queries, config.limit_per_query, config.filter.as_ref())?;
        warnings.extend(collected.warnings);
        let before = samples.len();
        for image in collected.images {
            // an image already used by an earlier pair stays with that pair
            if !seen.insert(image.content_hash.clone()) {
                continue;
            }
            let image_ref = match &config.store {
                Some(store) => store.put(&image)?,
                None => image.image_ref.clone(),
            };
            samples.push(Sample {
                id: Sample::make_id(&job.category, &image.content_hash),
                image_ref,
                category: job.category.clone(),
                rationale: job.rationale.clone(),
                sub_rationale: job.sub.clone(),
                split: None,
                source_query: image.source_query,
                content_hash: image.content_hash,
            });
        }
        if samples.len() == before {
            skipped.push(SkipRecord {
                category: job.category.clone(),
                rationale: Some(job.rationale.clone()),
                reason: "no images collected".into(),
            });
        }
    }

    let manifest = Manifest::from_samples(samples)?;
    let histogram = manifest.category_histogram();
    Ok(BuildOutput {
        manifest,
        skipped,
        histogram,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::dataset::sources::{MockImageSource, MockRationaleSource};

    struct FixedImages(Vec<(&'static str, &'static [u8])>);

    impl ImageSource for FixedImages {
        fn search(&self, _query: &str, limit: usize) -> Result<Vec<RetrievedImage>> {
            Ok(self
                .0
                .iter()
                .take(limit)
                .map(|(r, b)| RetrievedImage {
                    image_ref: r.to_string(),
                    bytes: b.to_vec(),
                })
                .collect())
        }
    }

    struct Oversupply;

    impl ImageSource for Oversupply {
        fn search(&self, query: &str, _limit: usize) -> Result<Vec<RetrievedImage>> {
            Ok((0..80)
                .map(|i| RetrievedImage {
                    image_ref: format!("{query}/{i}"),
                    bytes: format!("{query}/{i}").into_bytes(),
                })
                .collect())
        }
    }

    struct Failing(AtomicUsize);

    impl ImageSource for Failing {
        fn search(&self, _query: &str, _limit: usize) -> Result<Vec<RetrievedImage>> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Err(Error::Source("offline".into()))
        }
    }

    fn cats(names: &[&str]) -> Vec<CategoryName> {
        names.iter().map(|n| CategoryName::new(n).unwrap()).collect()
    }

    #[test]
    fn duplicates_are_removed() {
        let source = FixedImages(vec![("a", b"x"), ("b", b"y"), ("c", b"x")]);
        let out = collect_images(&source, &["q".to_string()], 50, None).unwrap();
        assert_eq!(out.images.len(), 2);
        assert_eq!(out.images[0].image_ref, "a");
        assert_eq!(out.images[1].image_ref, "b");
    }

    #[test]
    fn duplicates_across_queries_keep_first_query() {
        let source = FixedImages(vec![("a", b"x")]);
        let out = collect_images(&source, &["q1".to_string(), "q2".to_string()], 50, None).unwrap();
        assert_eq!(out.images.len(), 1);
        assert_eq!(out.images[0].source_query, "q1");
    }

    #[test]
    fn per_query_limit_is_enforced() {
        let queries = vec!["one".to_string(), "two".to_string()];
        let out = collect_images(&Oversupply, &queries, 50, None).unwrap();
        assert_eq!(out.images.len(), 100);
        assert!(out.images[..50].iter().all(|i| i.source_query == "one"));
        assert!(collect_images(&Oversupply, &queries, 0, None).is_err());
    }

    #[test]
    fn failures_become_warnings() {
        let source = Failing(AtomicUsize::new(0));
        let queries: Vec<String> = (0..3).map(|i| format!("q{i}")).collect();
        let out = collect_images(&source, &queries, 5, None).unwrap();
        assert!(out.images.is_empty());
        assert_eq!(out.warnings.len(), 3);
        assert_eq!(source.0.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn filter_drops_images() {
        let source = FixedImages(vec![("keep", b"1"), ("drop", b"2")]);
        let filter: ImageFilter = Arc::new(|img: &RetrievedImage| img.image_ref != "drop");
        let out = collect_images(&source, &["q".to_string()], 5, Some(&filter)).unwrap();
        assert_eq!(out.images.len(), 1);
    }

    #[test]
    fn two_categories_three_rationales_four_images() {
        let rationales = MockRationaleSource::procedural(3);
        // only the first query of each pair answers, so each rationale gets 4 images
        struct PerPair(MockImageSource);
        impl ImageSource for PerPair {
            fn search(&self, query: &str, limit: usize) -> Result<Vec<RetrievedImage>> {
                if query.contains(" which has ") {
                    self.0.search(query, limit)
                } else {
                    Ok(Vec::new())
                }
            }
        }
        let images = PerPair(MockImageSource { per_query: 4, size: 8 });
        let out = build_manifest(&cats(&["dog", "cat"]), &rationales, &images, &BuildConfig::default()).unwrap();
        assert_eq!(out.manifest.len(), 24);
        assert!(out.skipped.is_empty());
        assert_eq!(out.histogram.values().copied().collect::<Vec<_>>(), vec![12, 12]);
        for s in out.manifest.samples() {
            assert!(out.manifest.rationales(&s.category).contains(&s.rationale));
            assert_eq!(s.split, None);
        }
    }

    #[test]
    fn category_without_rationales_is_skipped() {
        let mut fixture = BTreeMap::new();
        fixture.insert("dog".to_string(), "- four legs\n- a tail".to_string());
        fixture.insert("rock".to_string(), "\n\n".to_string());
        let rationales = MockRationaleSource::new(fixture, 0);
        let out = build_manifest(&cats(&["dog", "rock"]), &rationales, &MockImageSource::default(), &BuildConfig::default()).unwrap();
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].category, "rock");
        assert!(out.manifest.samples().iter().all(|s| s.category == "dog"));
        assert_eq!(out.manifest.len(), 2 * 3 * 4);
    }

    #[test]
    fn hierarchical_collection_tags_sub_rationales() {
        let mut fixture = BTreeMap::new();
        fixture.insert("dog".to_string(), "- four legs".to_string());
        fixture.insert("four legs of a dog".to_string(), "- furry\n- muscular".to_string());
        let rationales = MockRationaleSource::new(fixture, 0);
        let config = BuildConfig {
            hierarchical: true,
            ..BuildConfig::default()
        };
        let out = build_manifest(&cats(&["dog"]), &rationales, &MockImageSource::default(), &config).unwrap();
        assert_eq!(out.manifest.len(), 8);
        let subs = out.manifest.sub_rationales();
        let key = (CategoryName::new("dog").unwrap(), Rationale::new("four legs").unwrap());
        assert_eq!(subs[&key].len(), 2);
        assert!(out.manifest.samples()[0]
            .source_query
            .starts_with("A photo of dog, because there is "));
    }

    #[test]
    fn store_writes_files_and_rewrites_refs() {
        let dir = tempfile::tempdir().unwrap();
        let config = BuildConfig {
            store: Some(ImageStore {
                dir: dir.path().to_path_buf(),
                ref_prefix: "images/".into(),
            }),
            ..BuildConfig::default()
        };
        let out = build_manifest(&cats(&["dog"]), &MockRationaleSource::procedural(1), &MockImageSource::default(), &config).unwrap();
        for s in out.manifest.samples() {
            assert_eq!(s.image_ref, format!("images/{}.ppm", s.content_hash));
            assert!(dir.path().join(format!("{}.ppm", s.content_hash)).exists());
        }
    }

    #[test]
    fn empty_category_list_is_rejected() {
        assert!(build_manifest(&[], &MockRationaleSource::procedural(1), &MockImageSource::default(), &BuildConfig::default()).is_err());
    }
}
