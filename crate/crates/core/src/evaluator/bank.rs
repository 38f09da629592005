use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::Array2;

use crate::dataset::{render_hierarchical_sentence, CategoryName, Manifest, Rationale, SubRationale};
use crate::encoder::{Embedding, VisionLanguageBackend};
use crate::error::{Error, Result};
use crate::par;
use crate::trainer::render_training_sentence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BankMode {
    /// Every category paired with every distinct rationale.
    #[default]
    CrossProduct,
    /// Each category paired only with its own rationales.
    PerCategory,
}

impl std::str::FromStr for BankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_product" | "cross-product" => Ok(BankMode::CrossProduct),
            "per_category" | "per-category" => Ok(BankMode::PerCategory),
            other => Err(Error::invalid(format!("unknown bank mode {other:?}"))),
        }
    }
}

/// The (category, rationale[, sub-rationale]) a sentence describes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntryKey {
    pub category: CategoryName,
    pub rationale: Rationale,
    pub sub_rationale: Option<SubRationale>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankEntry {
    pub key: EntryKey,
    pub sentence: String,
}

/// Rendered candidate sentences and their text embeddings (`M × d`, unit rows).
#[derive(Debug, Clone)]
pub struct SentenceBank {
    entries: Vec<BankEntry>,
    embeddings: Array2<f64>,
    mode: BankMode,
    hierarchical: bool,
    index: HashMap<EntryKey, usize>,
}

fn render(key: &EntryKey) -> Result<String> {
    match &key.sub_rationale {
        Some(sub) => render_hierarchical_sentence(&key.category, &key.rationale, sub),
        None => render_training_sentence(&key.category, &key.rationale),
    }
}

impl SentenceBank {
    /// Entry keys in bank order: category order, then rationale order (and
    /// sub-rationale order in hierarchical mode).
    pub fn entry_keys(
        categories: &[CategoryName],
        rationales: &BTreeMap<CategoryName, Vec<Rationale>>,
        sub_rationales: Option<&BTreeMap<(CategoryName, Rationale), Vec<SubRationale>>>,
        mode: BankMode,
    ) -> Result<Vec<EntryKey>> {
        if categories.is_empty() {
            return Err(Error::invalid("sentence bank needs at least one category"));
        }
        // per category: its (rationale, sub) pairs in order
        let own = |c: &CategoryName| -> Vec<(Rationale, Option<SubRationale>)> {
            let rs = rationales.get(c).map_or(&[][..], Vec::as_slice);
            match sub_rationales {
                None => rs.iter().map(|r| (r.clone(), None)).collect(),
                Some(subs) => rs
                    .iter()
                    .flat_map(|r| {
                        subs.get(&(c.clone(), r.clone()))
                            .into_iter()
                            .flatten()
                            .map(move |s| (r.clone(), Some(s.clone())))
                    })
                    .collect(),
            }
        };
        let keys: Vec<EntryKey> = match mode {
            BankMode::PerCategory => categories
                .iter()
                .flat_map(|c| {
                    own(c).into_iter().map(move |(r, s)| EntryKey {
                        category: c.clone(),
                        rationale: r,
                        sub_rationale: s,
                    })
                })
                .collect(),
            BankMode::CrossProduct => {
                let distinct: BTreeSet<(Rationale, Option<SubRationale>)> = categories.iter().flat_map(own).collect();
                categories
                    .iter()
                    .flat_map(|c| {
                        distinct.iter().map(move |(r, s)| EntryKey {
                            category: c.clone(),
                            rationale: r.clone(),
                            sub_rationale: s.clone(),
                        })
                    })
                    .collect()
            }
        };
        if keys.is_empty() {
            return Err(Error::invalid("sentence bank would be empty"));
        }
        Ok(keys)
    }

    /// Renders and embeds every entry.
    pub fn build<B: VisionLanguageBackend + ?Sized>(
        categories: &[CategoryName],
        rationales: &BTreeMap<CategoryName, Vec<Rationale>>,
        sub_rationales: Option<&BTreeMap<(CategoryName, Rationale), Vec<SubRationale>>>,
        mode: BankMode,
        backend: &B,
    ) -> Result<Self> {
        let keys = Self::entry_keys(categories, rationales, sub_rationales, mode)?;
        let entries = keys
            .into_iter()
            .map(|key| Ok(BankEntry { sentence: render(&key)?, key }))
            .collect::<Result<Vec<_>>>()?;
        let embeddings = par::try_map(&entries, |e| backend.encode_text(&e.sentence))?;
        let mut bank = Self::from_parts(entries, &embeddings)?;
        bank.mode = mode;
        bank.hierarchical = sub_rationales.is_some();
        Ok(bank)
    }

    /// Bank over a manifest's categories and rationales (all splits).
    pub fn from_manifest<B: VisionLanguageBackend + ?Sized>(
        manifest: &Manifest,
        mode: BankMode,
        hierarchical: bool,
        backend: &B,
    ) -> Result<Self> {
        let subs = hierarchical.then(|| manifest.sub_rationales());
        if hierarchical && subs.as_ref().is_some_and(BTreeMap::is_empty) {
            return Err(Error::invalid("hierarchical bank needs samples with sub-rationales"));
        }
        Self::build(manifest.categories(), manifest.rationale_map(), subs.as_ref(), mode, backend)
    }

    /// Bank from explicit entries and embeddings.
    pub fn from_parts(entries: Vec<BankEntry>, embeddings: &[Embedding]) -> Result<Self> {
        if entries.is_empty() || entries.len() != embeddings.len() {
            return Err(Error::invalid("bank needs one embedding per entry"));
        }
        let dim = embeddings[0].dim();
        let mut matrix = Array2::zeros((entries.len(), dim));
        for (mut row, e) in matrix.rows_mut().into_iter().zip(embeddings) {
            if e.dim() != dim {
                return Err(Error::invalid("bank embeddings differ in width"));
            }
            row.assign(&ndarray::ArrayView1::from(e.values()));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.key.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate bank entry {:?}", e.sentence)));
            }
        }
        let hierarchical = entries.iter().any(|e| e.key.sub_rationale.is_some());
        Ok(SentenceBank {
            entries,
            embeddings: matrix,
            mode: BankMode::PerCategory,
            hierarchical,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn mode(&self) -> BankMode {
        self.mode
    }

    pub fn is_hierarchical(&self) -> bool {
        self.hierarchical
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &BankEntry {
        &self.entries[index]
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn position(&self, key: &EntryKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Cosine score of `embedding` against every entry.
    pub fn scores(&self, embedding: &Embedding) -> Result<Vec<f64>> {
        if embedding.dim() != self.dim() {
            return Err(Error::invalid(format!(
                "embedding width {} does not match bank width {}",
                embedding.dim(),
                self.dim()
            )));
        }
        Ok(self
            .embeddings
            .rows()
            .into_iter()
            .map(|row| crate::encoder::dot(row.as_slice().expect("contiguous"), embedding.values()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names<T: TryFrom<&'static str>>(xs: &[&'static str]) -> Vec<T>
    where
        T::Error: std::fmt::Debug,
    {
        xs.iter().map(|x| T::try_from(x).unwrap()).collect()
    }

    #[test]
    fn cross_product_and_per_category_sizes() {
        let cats: Vec<CategoryName> = names(&["a", "b", "c"]);
        let mut map = BTreeMap::new();
        map.insert(cats[0].clone(), names::<Rationale>(&["r1", "r2"]));
        map.insert(cats[1].clone(), names::<Rationale>(&["r2", "r3"]));
        map.insert(cats[2].clone(), names::<Rationale>(&["r4"]));
        let cross = SentenceBank::entry_keys(&cats, &map, None, BankMode::CrossProduct).unwrap();
        assert_eq!(cross.len(), 12);
        assert_eq!(cross[0].category, "a");
        assert_eq!(cross[4].category, "b");
        let per = SentenceBank::entry_keys(&cats[..2], &map, None, BankMode::PerCategory).unwrap();
        assert_eq!(per.len(), 4);
        let mut uneven = map.clone();
        uneven.insert(cats[1].clone(), names::<Rationale>(&["x", "y", "z"]));
        assert_eq!(SentenceBank::entry_keys(&cats[..2], &uneven, None, BankMode::PerCategory).unwrap().len(), 5);
    }

    #[test]
    fn sentences_use_the_templates() {
        let key = EntryKey {
            category: "dog".try_into().unwrap(),
            rationale: "four legs".try_into().unwrap(),
            sub_rationale: None,
        };
        assert_eq!(render(&key).unwrap(), "This is a photo of dog because there is four legs");
        let key = EntryKey {
            sub_rationale: Some("furry".try_into().unwrap()),
            ..key
        };
        assert_eq!(render(&key).unwrap(), "A photo of dog, because there is furry four legs");
    }

    #[test]
    fn mode_parses() {
        assert_eq!("per_category".parse::<BankMode>().unwrap(), BankMode::PerCategory);
        assert!("all".parse::<BankMode>().is_err());
    }
}
