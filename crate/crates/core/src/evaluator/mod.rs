//! Doubly-right evaluation: rank a sentence bank against image embeddings,
//! vote on the category, and bucket each sample into RR/RW/WR/WW.

mod bank;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bank::{BankEntry, BankMode, EntryKey, SentenceBank};

use crate::dataset::{CategoryName, ImageLoader, Manifest, Sample, Split};
use crate::encoder::{Embedding, VisionLanguageBackend};
use crate::error::{Error, Result};
use crate::par;
use crate::prompt::PromptParams;

pub const DEFAULT_TOP_K: usize = 5;

/// Top-K bank indices by descending score, with their scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPrediction {
    pub top_k: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    RR,
    RW,
    WR,
    WW,
}

impl Outcome {
    pub fn from_flags(category_right: bool, rationale_right: bool) -> Self {
        match (category_right, rationale_right) {
            (true, true) => Outcome::RR,
            (true, false) => Outcome::RW,
            (false, true) => Outcome::WR,
            (false, false) => Outcome::WW,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub k: usize,
    pub bank_mode: BankMode,
    pub hierarchical: bool,
    /// Samples to score; `None` scores the whole manifest.
    pub split: Option<Split>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: DEFAULT_TOP_K,
            bank_mode: BankMode::CrossProduct,
            hierarchical: false,
            split: Some(Split::Test),
        }
    }
}

/// Integer outcome counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OutcomeTally {
    pub rr: usize,
    pub rw: usize,
    pub wr: usize,
    pub ww: usize,
}

impl OutcomeTally {
    pub fn add(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::RR => self.rr += 1,
            Outcome::RW => self.rw += 1,
            Outcome::WR => self.wr += 1,
            Outcome::WW => self.ww += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.rr + self.rw + self.wr + self.ww
    }

    pub fn counts(&self) -> Result<DoublyRightCounts> {
        let n = self.total();
        if n == 0 {
            return Err(Error::invalid("no samples to tally"));
        }
        let pct = |c: usize| 100.0 * c as f64 / n as f64;
        let (rr, rw, wr) = (pct(self.rr), pct(self.rw), pct(self.wr));
        // the remainder absorbs rounding so the buckets sum to exactly 100
        let ww = if self.ww == 0 { 0.0 } else { (100.0 - rr - rw - wr).max(0.0) };
        Ok(DoublyRightCounts {
            rr,
            rw,
            wr,
            ww,
            n,
            tally: *self,
        })
    }
}

impl FromIterator<Outcome> for OutcomeTally {
    fn from_iter<I: IntoIterator<Item = Outcome>>(iter: I) -> Self {
        let mut t = OutcomeTally::default();
        iter.into_iter().for_each(|o| t.add(o));
        t
    }
}

/// Outcome percentages over `n` samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoublyRightCounts {
    pub rr: f64,
    pub rw: f64,
    pub wr: f64,
    pub ww: f64,
    pub n: usize,
    pub tally: OutcomeTally,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub overall: DoublyRightCounts,
    pub per_category: BTreeMap<CategoryName, DoublyRightCounts>,
    /// Sample id and outcome, in manifest order.
    pub outcomes: Vec<(String, Outcome)>,
}

/// Top-K of a raw score vector; ties go to the lower index.
pub fn rank_scores(scores: &[f64], k: usize) -> Result<RankedPrediction> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if k > scores.len() {
        return Err(Error::invalid(format!("K = {k} exceeds bank size {}", scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("similarity scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    let top_scores = order.iter().map(|&i| scores[i]).collect();
    Ok(RankedPrediction {
        top_k: order,
        scores: top_scores,
    })
}

pub fn rank_sentences(image_embedding: &Embedding, bank: &SentenceBank, k: usize) -> Result<RankedPrediction> {
    rank_scores(&bank.scores(image_embedding)?, k)
}

/// Majority category of the top-K; ties go to the category ranked first.
pub fn predict_category<'b>(pred: &RankedPrediction, bank: &'b SentenceBank) -> &'b CategoryName {
    // (votes, best rank) per category, in first-seen order
    let mut tally: Vec<(&CategoryName, usize, usize)> = Vec::new();
    for (rank, &idx) in pred.top_k.iter().enumerate() {
        let cat = &bank.entry(idx).key.category;
        match tally.iter_mut().find(|(c, _, _)| *c == cat) {
            Some(t) => t.1 += 1,
            None => tally.push((cat, 1, rank)),
        }
    }
    tally
        .iter()
        .min_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)))
        .map(|t| t.0)
        .expect("prediction has at least one entry")
}

/// The bank key a sample is judged against.
pub fn ground_truth_key(sample: &Sample, hierarchical: bool) -> Result<EntryKey> {
    let sub_rationale = if hierarchical {
        Some(sample.sub_rationale.clone().ok_or_else(|| {
            Error::Config(format!("sample {} has no sub-rationale for hierarchical evaluation", sample.id))
        })?)
    } else {
        None
    };
    Ok(EntryKey {
        category: sample.category.clone(),
        rationale: sample.rationale.clone(),
        sub_rationale,
    })
}

pub fn classify_outcome(truth: &EntryKey, pred: &RankedPrediction, bank: &SentenceBank) -> Result<Outcome> {
    let gt = bank.position(truth).ok_or_else(|| {
        Error::Config(format!(
            "ground truth ({}, {}) is not in the sentence bank",
            truth.category, truth.rationale
        ))
    })?;
    let category_right = *predict_category(pred, bank) == truth.category;
    Ok(Outcome::from_flags(category_right, pred.top_k.contains(&gt)))
}

/// Scores precomputed similarity rows (one per truth) against `bank`.
pub fn evaluate_scores(truths: &[EntryKey], scores: &[Vec<f64>], bank: &SentenceBank, k: usize) -> Result<Vec<Outcome>> {
    if truths.len() != scores.len() {
        return Err(Error::invalid("one score row per sample required"));
    }
    if k > bank.len() {
        return Err(Error::invalid(format!("K = {k} exceeds bank size {}", bank.len())));
    }
    let idx: Vec<usize> = (0..truths.len()).collect();
    par::try_map(&idx, |&i| {
        if scores[i].len() != bank.len() {
            return Err(Error::invalid("score row length must equal bank size"));
        }
        classify_outcome(&truths[i], &rank_scores(&scores[i], k)?, bank)
    })
}

/// Outcomes for precomputed image embeddings.
pub fn evaluate_embeddings(truths: &[EntryKey], images: &[Embedding], bank: &SentenceBank, k: usize) -> Result<Vec<Outcome>> {
    let scores = par::try_map(images, |e| bank.scores(e))?;
    evaluate_scores(truths, &scores, bank, k)
}

fn aggregate(samples: &[&Sample], outcomes: Vec<Outcome>) -> Result<EvalReport> {
    let overall = outcomes.iter().copied().collect::<OutcomeTally>().counts()?;
    let mut by_cat: BTreeMap<CategoryName, OutcomeTally> = BTreeMap::new();
    for (s, &o) in samples.iter().zip(&outcomes) {
        by_cat.entry(s.category.clone()).or_default().add(o);
    }
    let per_category = by_cat
        .into_iter()
        .map(|(c, t)| Ok((c, t.counts()?)))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        overall,
        per_category,
        outcomes: samples.iter().map(|s| s.id.clone()).zip(outcomes).collect(),
    })
}

/// Embeds the selected samples with optional prompts.
pub fn embed_samples<B: VisionLanguageBackend + ?Sized>(
    samples: &[&Sample],
    loader: &dyn ImageLoader,
    backend: &B,
    prompts: Option<&PromptParams>,
) -> Result<Vec<Embedding>> {
    if let Some(p) = prompts {
        p.check_compatible(backend.dims(), backend.vision_layers())?;
    }
    par::try_map(samples, |s| backend.encode_image(&loader.load(s)?, prompts))
}

/// Evaluates `prompts` (or the bare backbone) on the configured split, with a
/// bank spanning the whole manifest.
pub fn evaluate_doubly_right<B: VisionLanguageBackend + ?Sized>(
    manifest: &Manifest,
    loader: &dyn ImageLoader,
    backend: &B,
    prompts: Option<&PromptParams>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let bank = SentenceBank::from_manifest(manifest, config.bank_mode, config.hierarchical, backend)?;
    evaluate_with_bank(manifest, loader, backend, prompts, config, &bank)
}

pub fn evaluate_with_bank<B: VisionLanguageBackend + ?Sized>(
    manifest: &Manifest,
    loader: &dyn ImageLoader,
    backend: &B,
    prompts: Option<&PromptParams>,
    config: &EvalConfig,
    bank: &SentenceBank,
) -> Result<EvalReport> {
    let samples = manifest.select(config.split);
    if samples.is_empty() {
        return Err(Error::invalid(match config.split {
            Some(s) => format!("manifest has no {} samples", s.as_str()),
            None => "manifest has no samples".into(),
        }));
    }
    if config.k > bank.len() {
        return Err(Error::invalid(format!("K = {} exceeds bank size {}", config.k, bank.len())));
    }
    let truths = samples
        .iter()
        .map(|s| ground_truth_key(s, config.hierarchical))
        .collect::<Result<Vec<_>>>()?;
    let embeddings = embed_samples(&samples, loader, backend, prompts)?;
    let outcomes = evaluate_embeddings(&truths, &embeddings, bank, config.k)?;
    log::info!(
        "event=eval samples={} bank={} k={} prompted={}",
        samples.len(),
        bank.len(),
        config.k,
        prompts.is_some()
    );
    aggregate(&samples, outcomes)
}

/// An evaluation dataset and the loader for its images.
pub struct EvalSet<'a> {
    pub manifest: &'a Manifest,
    pub loader: &'a dyn ImageLoader,
}

#[derive(Debug, Clone, Default)]
pub struct TransferTable {
    /// Eval dataset → counts without prompts.
    pub baseline: BTreeMap<String, DoublyRightCounts>,
    /// (train dataset, eval dataset) → counts with that dataset's prompts.
    pub cells: BTreeMap<(String, String), DoublyRightCounts>,
    pub warnings: Vec<String>,
}

/// Evaluates every trained prompt set on every evaluation dataset, plus an
/// unprompted baseline per dataset. Cells that cannot be evaluated are skipped
/// with a warning.
pub fn transfer_matrix<B: VisionLanguageBackend + ?Sized>(
    trained_prompts: &BTreeMap<String, PromptParams>,
    eval_sets: &BTreeMap<String, EvalSet<'_>>,
    backend: &B,
    config: &EvalConfig,
) -> Result<TransferTable> {
    let mut table = TransferTable::default();
    for (eval_name, set) in eval_sets {
        let bank = match SentenceBank::from_manifest(set.manifest, config.bank_mode, config.hierarchical, backend) {
            Ok(b) => b,
            Err(e) => {
                let msg = format!("skipping eval dataset {eval_name}: {e}");
                log::warn!("event=transfer_skip eval={eval_name} reason={e:?}");
                table.warnings.push(msg);
                continue;
            }
        };
        let mut run = |train: Option<&str>, prompts: Option<&PromptParams>| {
            match evaluate_with_bank(set.manifest, set.loader, backend, prompts, config, &bank) {
                Ok(r) => Some(r.overall),
                Err(e) => {
                    let label = train.unwrap_or("baseline");
                    log::warn!("event=transfer_skip train={label} eval={eval_name} reason={e:?}");
                    table.warnings.push(format!("skipping {label} -> {eval_name}: {e}"));
                    None
                }
            }
        };
        if let Some(c) = run(None, None) {
            table.baseline.insert(eval_name.clone(), c);
        }
        for (train_name, prompts) in trained_prompts {
            if let Some(c) = run(Some(train_name), Some(prompts)) {
                table.cells.insert((train_name.clone(), eval_name.clone()), c);
            }
        }
    }
    Ok(table)
}
