use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use seqmasks::dataset::casia::parse_casia_b;
use seqmasks::dataset::io::{write_json, write_jsonl};
use seqmasks::dataset::mars::{parse_mask_mars, parse_mask_mars_parts, write_mask_mars, MANIFEST};
use seqmasks::dataset::mask::validate_threshold;
use seqmasks::dataset::{filter_corpus, DatasetIndex, IndexStats, SkipRecord, Split};
use seqmasks::evaluator::{casia_eval, cmc_map, EvalReport};
use seqmasks::trainer::extract::{write_embeddings, EMBEDDINGS_FILE};
use seqmasks::trainer::{
    extract_features, load_model, read_embeddings, retrieval_problem, run as train_run, TrainConfig,
};
use seqmasks::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "seqmasks", version, about = "Video person re-identification with appearance and gait branches")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Mars,
    Casia,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Query,
    Gallery,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Query => Some(Split::Query),
            SplitArg::Gallery => Some(Split::Gallery),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Screen a raw frame/mask corpus and write the normalized layout.
    BuildDataset {
        /// Frame tree: <frames>/<id>/<tracklet>/<frame>.jpg
        #[arg(long)]
        frames: PathBuf,
        /// Mask tree mirroring the frame tree.
        #[arg(long)]
        masks: PathBuf,
        /// Sequence manifest (JSON lines). Defaults to manifest.jsonl next to the frame tree.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Destination root for frames/, masks/, manifest.jsonl, stats.json and skipped.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Minimum number of effective masks per kept sequence.
        #[arg(long, default_value_t = 8)]
        min_frames: usize,
        /// Minimum foreground fraction of an effective mask.
        #[arg(long, default_value_t = 0.15)]
        min_fg_ratio: f64,
    },
    /// Train a model from a TOML configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory; overrides `output` in the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write whole-sequence descriptors for one split.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Normalized Mask-MARS root or CASIA-B silhouette tree.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// RGB tree mirroring a CASIA-B silhouette tree.
        #[arg(long)]
        frames_root: Option<PathBuf>,
    },
    /// Extract query and gallery descriptors and score them.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Protocol::Mars)]
        protocol: Protocol,
        #[arg(long)]
        out: PathBuf,
        /// RGB tree mirroring a CASIA-B silhouette tree.
        #[arg(long)]
        frames_root: Option<PathBuf>,
        /// Use the train split as both query and gallery.
        #[arg(long, default_value_t = false)]
        train_split: bool,
    },
    /// Print a saved report.json, stats.json, embeddings.jsonl or training log.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildDataset {
            frames,
            masks,
            manifest,
            out,
            min_frames,
            min_fg_ratio,
        } => build_dataset(&frames, &masks, manifest.as_deref(), &out, min_frames, min_fg_ratio),
        Command::Train { config, resume, out } => train(&config, resume.as_deref(), out),
        Command::Extract {
            checkpoint,
            data,
            split,
            out,
            frames_root,
        } => extract(&checkpoint, &data, split, &out, frames_root.as_deref()),
        Command::Evaluate {
            checkpoint,
            data,
            protocol,
            out,
            frames_root,
            train_split,
        } => evaluate(&checkpoint, &data, protocol, &out, frames_root.as_deref(), train_split),
        Command::Report { input } => report(&input),
    }
}

#[derive(Serialize)]
struct BuildStats {
    #[serde(flatten)]
    stats: IndexStats,
    input_sequences: usize,
    dropped: usize,
    skipped: usize,
    min_frames: usize,
    min_fg_ratio: f64,
}

fn has_entries(dir: &Path) -> bool {
    std::fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some())
}

fn build_dataset(
    frames: &Path,
    masks: &Path,
    manifest: Option<&Path>,
    out: &Path,
    min_frames: usize,
    min_fg_ratio: f64,
) -> Result<()> {
    validate_threshold(min_fg_ratio).map_err(|e| Error::Config(e.to_string()))?;
    if min_frames == 0 {
        return Err(Error::Config("--min-frames must be at least 1".into()));
    }
    let manifest = manifest.map(Path::to_path_buf).unwrap_or_else(|| {
        frames
            .parent()
            .unwrap_or(Path::new("."))
            .join(MANIFEST)
    });
    let raw = if manifest.exists() {
        parse_mask_mars_parts(frames, masks, &manifest)?
    } else if !has_entries(frames) {
        log::warn!("no input sequences under {}; writing an empty corpus", frames.display());
        DatasetIndex::new(seqmasks::dataset::CorpusKind::MaskMars, Vec::new())
    } else {
        return Err(Error::Config(format!(
            "manifest {} not found (pass --manifest)",
            manifest.display()
        )));
    };
    if raw.entries.is_empty() {
        log::warn!("input corpus is empty");
    }
    let outcome = filter_corpus(&raw, min_frames, min_fg_ratio)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_mask_mars(&outcome.index, out)?;
    let mut report: Vec<SkipRecord> = outcome.skipped.clone();
    report.extend(outcome.dropped.iter().cloned());
    write_jsonl(&out.join("skipped.jsonl"), &report)?;
    let stats = BuildStats {
        stats: outcome.index.stats(),
        input_sequences: raw.sequence_count(),
        dropped: outcome.dropped.len(),
        skipped: outcome.skipped.len(),
        min_frames,
        min_fg_ratio,
    };
    write_json(&out.join("stats.json"), &stats)?;
    println!(
        "kept {} of {} sequences ({} identities); {} dropped, {} unreadable",
        stats.stats.sequences,
        stats.input_sequences,
        stats.stats.ids,
        stats.dropped,
        stats.skipped
    );
    Ok(())
}

fn train(config: &Path, resume: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    cfg.apply_env()?;
    if let Some(out) = out {
        cfg.output = out;
    }
    let (index, skipped) = seqmasks::trainer::load_index(&cfg.data)?;
    if !skipped.is_empty() {
        log::warn!("{} sequences left out of training", skipped.len());
    }
    let outcome = train_run(&cfg, &index, resume)?;
    println!("trained {} steps; log {}", outcome.steps, outcome.log.display());
    if let Some(last) = outcome.last_checkpoint() {
        println!("checkpoint {}", last.display());
    }
    Ok(())
}

/// Reads `data` as Mask-MARS when it carries a manifest and as a CASIA-B tree otherwise.
fn read_corpus(data: &Path, frames_root: Option<&Path>) -> Result<(DatasetIndex, Vec<SkipRecord>)> {
    if data.join(MANIFEST).exists() {
        Ok((parse_mask_mars(data)?, Vec::new()))
    } else {
        let out = parse_casia_b(data, frames_root)?;
        Ok((out.index, out.skipped))
    }
}

fn extract(checkpoint: &Path, data: &Path, split: SplitArg, out: &Path, frames_root: Option<&Path>) -> Result<()> {
    let (model, manifest) = load_model(checkpoint)?;
    let (index, mut skipped) = read_corpus(data, frames_root)?;
    let (records, more) = extract_features(&model, &index, split.split(), &manifest.input, &manifest.extract)?;
    skipped.extend(more);
    write_embeddings(out, &records, &skipped)?;
    println!("{} embeddings, {} skipped", records.len(), skipped.len());
    Ok(())
}

fn evaluate(
    checkpoint: &Path,
    data: &Path,
    protocol: Protocol,
    out: &Path,
    frames_root: Option<&Path>,
    train_split: bool,
) -> Result<()> {
    if protocol == Protocol::Casia && data.join(MANIFEST).exists() {
        return Err(Error::Config(format!(
            "--protocol casia needs a CASIA-B tree with view and condition labels; {} is a Mask-MARS corpus",
            data.display()
        )));
    }
    let (model, manifest) = load_model(checkpoint)?;
    let (index, mut skipped) = read_corpus(data, frames_root)?;
    if protocol == Protocol::Casia && !index.has_gait_meta() {
        return Err(Error::Config(format!("{} has no view/condition labels", data.display())));
    }
    let split = if train_split { Some(Split::Train) } else { None };
    let (records, more) = extract_features(&model, &index, split, &manifest.input, &manifest.extract)?;
    skipped.extend(more);
    write_embeddings(out, &records, &skipped)?;
    let problem = retrieval_problem(&records, train_split)?;
    let report = match protocol {
        Protocol::Mars => EvalReport {
            protocol: "mars".into(),
            mars: Some(cmc_map(&problem)?),
            casia: None,
        },
        Protocol::Casia => EvalReport {
            protocol: "casia".into(),
            mars: None,
            casia: Some(casia_eval(&problem)?),
        },
    };
    report.write(out)?;
    print!("{}", report.table());
    Ok(())
}

fn report(input: &Path) -> Result<()> {
    let name = input.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let target = if input.is_dir() { input.join("report.json") } else { input.to_path_buf() };
    if name.ends_with(".csv") {
        return report_log(input);
    }
    if name == EMBEDDINGS_FILE {
        let records = read_embeddings(input)?;
        let dim = records.first().map_or(0, |r| r.embedding.len());
        println!("{} embeddings of dimension {dim}", records.len());
        return Ok(());
    }
    let text = std::fs::read_to_string(&target).map_err(|e| Error::io(&target, e))?;
    if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
        print!("{}", r.table());
    } else {
        let v: serde_json::Value = serde_json::from_str(&text)?;
        println!("{}", serde_json::to_string_pretty(&v)?);
    }
    Ok(())
}

/// Per-epoch mean of the total loss in a training log.
fn report_log(path: &Path) -> Result<()> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: no `{name}` column", path.display())))
    };
    let (epoch_col, total_col) = (col("epoch")?, col("l_total")?);
    let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad number `{}`", path.display(), &rec[i])))
        };
        let e = sums.entry(parse(epoch_col)? as usize).or_default();
        e.0 += parse(total_col)?;
        e.1 += 1;
    }
    println!("{:>6} {:>6} {:>10}", "epoch", "steps", "loss");
    for (epoch, (s, n)) in sums {
        println!("{epoch:>6} {n:>6} {:>10.4}", s / n as f64);
    }
    Ok(())
}
