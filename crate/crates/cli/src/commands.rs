//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use whyprompt_core::dataset::sources::{
    DirImageSource, HttpImageSource, ImageSource, MockImageSource, MockRationaleSource, OpenAiCompatibleSource,
    RationaleSource,
};
use whyprompt_core::dataset::{
    build_manifest, read_manifest_file, split_manifest, write_manifest_file, BuildConfig, CategoryName, FsImageLoader,
    ImageStore, Manifest, Split,
};
use whyprompt_core::evaluator::{
    evaluate_doubly_right, transfer_matrix, BankMode, DoublyRightCounts, EvalConfig, EvalSet, OutcomeTally,
};
use whyprompt_core::prompt::{load_prompt_checkpoint, save_prompt_checkpoint, PromptParams};
use whyprompt_core::report::{render_report, render_transfer, ReportFormat, ReportRow};
use whyprompt_core::trainer::{loss_curve_csv, train_why_prompt};

use crate::config::RunConfig;
use crate::{
    BackendArgs, BuildDatasetArgs, EvalArgs, EvalOptions, FormatChoice, ImageSourceKind, RationaleSourceKind,
    ReportArgs, SplitChoice, TrainArgs, TransferArgs,
};

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let dir = parent_dir(path);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Reads a category list: one name per line, `#` comments, blank lines ignored.
pub fn read_categories(path: &Path) -> Result<Vec<CategoryName>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading categories {}", path.display()))?;
    let categories = text
        .lines()
        .enumerate()
        .filter_map(|(n, line)| {
            let line = line.split('#').next().unwrap_or("").trim();
            (!line.is_empty()).then(|| CategoryName::new(line).with_context(|| format!("{}:{}", path.display(), n + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    if categories.is_empty() {
        bail!("{} lists no categories", path.display());
    }
    Ok(categories)
}

pub fn build_dataset(args: &BuildDatasetArgs) -> Result<()> {
    let categories = read_categories(&args.categories)?;

    let rationale_source: Box<dyn RationaleSource> = match args.rationale_source {
        RationaleSourceKind::Mock => match &args.rationale_fixture {
            Some(path) => Box::new(MockRationaleSource::from_fixture_file(path, args.mock_rationales)?),
            None => Box::new(MockRationaleSource::procedural(args.mock_rationales)),
        },
        RationaleSourceKind::OpenaiCompatible => Box::new(OpenAiCompatibleSource::from_env(&args.llm_url, &args.llm_model)?),
    };
    let image_source: Box<dyn ImageSource> = match args.image_source {
        ImageSourceKind::Mock => Box::new(MockImageSource {
            per_query: args.mock_images,
            size: args.mock_size,
        }),
        ImageSourceKind::Dir => {
            let dir = args.image_dir.as_ref().ok_or_else(|| anyhow!("--image-source dir needs --image-dir"))?;
            Box::new(DirImageSource::new(dir))
        }
        ImageSourceKind::Http => {
            let url = args.image_url.as_ref().ok_or_else(|| anyhow!("--image-source http needs --image-url"))?;
            Box::new(HttpImageSource::new(url.as_str())?)
        }
    };

    let images_dir = parent_dir(&args.out).join("images");
    fs::create_dir_all(&images_dir).with_context(|| format!("creating {}", images_dir.display()))?;
    let config = BuildConfig {
        limit_per_query: args.limit,
        filter: None,
        store: Some(ImageStore {
            dir: images_dir,
            ref_prefix: "images/".into(),
        }),
        hierarchical: args.hierarchical,
    };
    let output = build_manifest(&categories, rationale_source.as_ref(), image_source.as_ref(), &config)?;
    for skip in &output.skipped {
        log::warn!(
            "event=skip category={:?} rationale={:?} reason={:?}",
            skip.category.as_str(),
            skip.rationale.as_ref().map_or("", |r| r.as_str()),
            skip.reason
        );
    }
    for w in &output.warnings {
        log::warn!("event=build_warning detail={w:?}");
    }
    let manifest = split_manifest(&output.manifest, args.train_fraction, args.seed)?;
    write_manifest_file(&manifest, &args.out)?;
    for (category, count) in &output.histogram {
        log::info!("event=category name={:?} images={count}", category.as_str());
    }
    log::info!(
        "event=build_dataset samples={} train={} test={} skipped={} out={}",
        manifest.len(),
        manifest.split_samples(Split::Train).count(),
        manifest.split_samples(Split::Test).count(),
        output.skipped.len(),
        args.out.display()
    );
    Ok(())
}

fn load_manifest(path: &Path, image_size: usize) -> Result<(Manifest, FsImageLoader)> {
    let manifest = read_manifest_file(path).with_context(|| format!("loading manifest {}", path.display()))?;
    Ok((manifest, FsImageLoader::new(parent_dir(path), image_size)))
}

fn run_config(preset: Option<&str>, backend: &BackendArgs) -> Result<RunConfig> {
    RunConfig::resolve(preset, backend.config.as_deref(), &backend.overrides)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let config = run_config(args.preset.as_deref(), &args.backend)?;
    let encoder = config.backend.load()?;
    let (manifest, loader) = load_manifest(&args.manifest, args.backend.image_size)?;
    let t = &config.train;
    log::info!(
        "event=train_start mode={} k={} lr={} epochs={} batch={} samples={}",
        t.prompt_mode.as_str(),
        t.prompt_length,
        t.learning_rate,
        t.epochs,
        t.batch_size,
        manifest.split_samples(Split::Train).count()
    );
    let output = train_why_prompt(&manifest, &loader, &encoder, t)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_prompt_checkpoint(&output.prompts, &args.out)?;
    let loss_path = args.loss_csv.clone().unwrap_or_else(|| args.out.with_extension("loss.csv"));
    write_text(&loss_path, &loss_curve_csv(&output.loss_curve))?;
    log::info!(
        "event=train_done first_loss={:.6} last_loss={:.6} prompt={} loss_csv={}",
        output.loss_curve.first().copied().unwrap_or(f64::NAN),
        output.loss_curve.last().copied().unwrap_or(f64::NAN),
        args.out.display(),
        loss_path.display()
    );
    Ok(())
}

fn eval_config(options: &EvalOptions) -> Result<EvalConfig> {
    let bank_mode: BankMode = options.bank.parse()?;
    Ok(EvalConfig {
        k: options.k,
        bank_mode,
        hierarchical: options.hierarchical,
        split: match options.split {
            SplitChoice::Train => Some(Split::Train),
            SplitChoice::Test => Some(Split::Test),
            SplitChoice::All => None,
        },
    })
}

fn report_format(choice: Option<FormatChoice>, path: &Path) -> ReportFormat {
    match choice {
        Some(FormatChoice::Csv) => ReportFormat::Csv,
        Some(FormatChoice::Md) => ReportFormat::Markdown,
        None => ReportFormat::for_path(path),
    }
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let config = run_config(None, &args.backend)?;
    let encoder = config.backend.load()?;
    let (manifest, loader) = load_manifest(&args.manifest, args.backend.image_size)?;
    let prompts = args.prompt.as_deref().map(load_prompt_checkpoint).transpose()?;
    let eval = eval_config(&args.options)?;
    let report = evaluate_doubly_right(&manifest, &loader, &encoder, prompts.as_ref(), &eval)?;

    let mut rows = Vec::new();
    if args.per_category {
        rows.push(ReportRow {
            name: Some("overall".into()),
            counts: report.overall,
        });
        rows.extend(report.per_category.iter().map(|(c, counts)| ReportRow {
            name: Some(c.as_str().to_string()),
            counts: *counts,
        }));
    } else {
        rows.push(ReportRow {
            name: None,
            counts: report.overall,
        });
    }
    let format = report_format(args.options.format, &args.report);
    write_text(&args.report, &render_report(&rows, format)?)?;
    let o = report.overall;
    log::info!(
        "event=eval_done rr={:.2} rw={:.2} wr={:.2} ww={:.2} n={} report={}",
        o.rr,
        o.rw,
        o.wr,
        o.ww,
        o.n,
        args.report.display()
    );
    Ok(())
}

fn named_path(pair: &str, flag: &str) -> Result<(String, PathBuf)> {
    match pair.split_once('=') {
        Some((name, path)) if !name.trim().is_empty() && !path.trim().is_empty() => {
            Ok((name.trim().to_string(), PathBuf::from(path.trim())))
        }
        _ => bail!("{flag} expects NAME=PATH, got {pair:?}"),
    }
}

pub fn transfer(args: &TransferArgs) -> Result<()> {
    let config = run_config(None, &args.backend)?;
    let encoder = config.backend.load()?;
    let eval = eval_config(&args.options)?;

    let mut prompts: BTreeMap<String, PromptParams> = BTreeMap::new();
    for pair in &args.train {
        let (name, path) = named_path(pair, "--train")?;
        let p = load_prompt_checkpoint(&path).with_context(|| format!("loading prompts for {name}"))?;
        if prompts.insert(name.clone(), p).is_some() {
            bail!("--train name {name:?} given twice");
        }
    }
    let mut loaded: BTreeMap<String, (Manifest, FsImageLoader)> = BTreeMap::new();
    for pair in &args.eval {
        let (name, path) = named_path(pair, "--eval")?;
        if loaded.insert(name.clone(), load_manifest(&path, args.backend.image_size)?).is_some() {
            bail!("--eval name {name:?} given twice");
        }
    }
    let sets: BTreeMap<String, EvalSet<'_>> = loaded
        .iter()
        .map(|(name, (manifest, loader))| {
            (
                name.clone(),
                EvalSet {
                    manifest,
                    loader: loader as &dyn whyprompt_core::dataset::ImageLoader,
                },
            )
        })
        .collect();
    let table = transfer_matrix(&prompts, &sets, &encoder, &eval)?;
    for w in &table.warnings {
        log::warn!("event=transfer_skip detail={w:?}");
    }
    let format = report_format(args.options.format, &args.report);
    write_text(&args.report, &render_transfer(&table, format)?)?;
    log::info!(
        "event=transfer_done cells={} baselines={} report={}",
        table.cells.len(),
        table.baseline.len(),
        args.report.display()
    );
    Ok(())
}

/// Rebuilds counts from a percentage row written by `eval`.
fn counts_from_percentages(rr: f64, rw: f64, wr: f64, ww: f64, n: usize) -> Result<DoublyRightCounts> {
    let count = |p: f64| (p * n as f64 / 100.0).round() as usize;
    let tally = OutcomeTally {
        rr: count(rr),
        rw: count(rw),
        wr: count(wr),
        ww: count(ww),
    };
    if tally.total() != n {
        bail!("percentages {rr}, {rw}, {wr}, {ww} do not describe {n} samples");
    }
    Ok(tally.counts()?)
}

/// Reads the rows of an `eval` CSV. Rows are named after the file stem, or
/// `stem/name` when the file has a name column.
pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(rr), Some(rw), Some(wr), Some(ww), Some(n)) =
        (column("rr"), column("rw"), column("wr"), column("ww"), column("n"))
    else {
        bail!("{} is not an eval report (expected rr,rw,wr,ww,n columns)", path.display());
    };
    let name_col = column("name");
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let where_ = || format!("{}:{}", path.display(), line + 2);
        let num = |i: usize| field(i).parse::<f64>().with_context(where_);
        let counts = counts_from_percentages(num(rr)?, num(rw)?, num(wr)?, num(ww)?, field(n).parse().with_context(where_)?)
            .with_context(where_)?;
        let name = match name_col {
            Some(i) => format!("{stem}/{}", field(i)),
            None => stem.clone(),
        };
        rows.push(ReportRow { name: Some(name), counts });
    }
    Ok(rows)
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &args.inputs {
        rows.extend(read_report_csv(path)?);
    }
    let format = match args.format {
        FormatChoice::Csv => ReportFormat::Csv,
        FormatChoice::Md => ReportFormat::Markdown,
    };
    let text = render_report(&rows, format)?;
    match &args.out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_skip_comments_and_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cats.txt");
        fs::write(&path, "# animals\nDog\n\n  cat  # pet\n").unwrap();
        let cats = read_categories(&path).unwrap();
        assert_eq!(cats.iter().map(|c| c.as_str()).collect::<Vec<_>>(), ["dog", "cat"]);
        fs::write(&path, "# nothing\n").unwrap();
        assert!(read_categories(&path).is_err());
    }

    #[test]
    fn named_path_requires_both_halves() {
        assert_eq!(named_path("a=x.whyp", "--train").unwrap(), ("a".into(), PathBuf::from("x.whyp")));
        assert!(named_path("x.whyp", "--train").is_err());
        assert!(named_path("=x", "--train").is_err());
    }

    #[test]
    fn report_csv_round_trips_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        fs::write(&path, "name,rr,rw,wr,ww,n\noverall,33.33,0.00,66.67,0.00,3\n").unwrap();
        let rows = read_report_csv(&path).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].name.as_deref(), Some("run/overall"));
        assert_eq!(rows[0].counts.tally, OutcomeTally { rr: 1, rw: 0, wr: 2, ww: 0 });

        fs::write(&path, "rr,rw,wr,ww,n\n50.00,50.00,0.00,0.00,3\n").unwrap();
        assert!(read_report_csv(&path).is_err());
        fs::write(&path, "train_dataset,eval_dataset,rr,rw,wr,ww\n").unwrap();
        assert!(read_report_csv(&path).is_err());
    }
}
