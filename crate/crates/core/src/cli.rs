//! The `crnet` command line: gen, dist, anchors, train, eval, report.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::anchors::{kmedoids, StructureAnchorSet};
use crate::bench::{generate, DataConfig};
use crate::engine::data::stream_offsets;
use crate::engine::{evaluate, train, Checkpoint, Dataset, MetricsRow, RunData, TrainConfig};
use crate::error::{Error, Result};
use crate::imaging::{pgm, resize_roi};
use crate::io::{
    self, points_sidecar, read_dataset, read_distance_csv, read_json, read_rois, write_dataset,
    write_distance_csv, write_json, write_jsonl, DistanceTable, LabeledImage, PointSets,
};
use crate::rng;
use crate::scatter::{extract_scatter_set, scatter_distance, ScatterSet, CANONICAL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Overrides every `--seed` flag when set.
pub const SEED_ENV: &str = "CRNET_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "crnet",
    version,
    about = "Cross-resolution scatterer-structure adaptation toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded source/target/eval benchmark plus source ROI crops.
    Gen(GenArgs),
    /// Pairwise scattering-structure distances between ROI patches.
    Dist(DistArgs),
    /// Cluster a distance matrix into structure anchors.
    Anchors(AnchorArgs),
    /// Train a detector and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Summarize one or more run directories as Markdown.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// JSON data config; defaults to the standard benchmark.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DistArgs {
    #[arg(long)]
    pub rois: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct AnchorArgs {
    #[arg(long)]
    pub dist: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Labeled target split evaluated after every epoch.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Precomputed anchors (from `crnet anchors`); built from the source otherwise.
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories; each becomes a row of the ablation table.
    #[arg(long, required = true, num_args = 1..)]
    pub run: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const ANCHORS_FILE: &str = "anchors.json";
pub const LOG_FILE: &str = "log.jsonl";

fn seed_override(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a),
        Command::Dist(a) => cmd_dist(&a),
        Command::Anchors(a) => cmd_anchors(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

pub const SOURCE_DIR: &str = "source";
pub const TARGET_DIR: &str = "target";
pub const EVAL_DIR: &str = "eval";

/// Canonical ground-truth ROI crops of a dataset, named `<image id>_<box>.pgm`.
fn write_rois(dir: &Path, items: &[LabeledImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for it in items {
        for (k, b) in it.annotation.boxes.iter().enumerate() {
            let b = b.clip_to(it.image.width as f64, it.image.height as f64);
            if b.w < 2.0 || b.h < 2.0 {
                continue;
            }
            pgm::write(
                &dir.join(format!("{}_{k}.pgm", it.id)),
                &resize_roi(&it.image, &b, CANONICAL)?,
            )?;
        }
    }
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let cfg: DataConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => DataConfig::default(),
    };
    let seed = seed_override(a.seed)?;
    let b = generate(&cfg, seed)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join(CONFIG_FILE), &cfg)?;
    write_dataset(&a.out.join(SOURCE_DIR), &b.source)?;
    write_dataset(&a.out.join(TARGET_DIR), &b.target)?;
    if !b.eval.is_empty() {
        write_dataset(&a.out.join(EVAL_DIR), &b.eval)?;
    }
    write_rois(&a.out.join(io::ROI_DIR), &b.source)
}

/// Upper-triangle pairs split into `jobs` interleaved shares.
fn parallel_distances(sets: &[ScatterSet], jobs: usize) -> Result<Vec<Vec<f64>>> {
    let n = sets.len();
    let jobs = jobs.clamp(1, n.max(1));
    let rows: Vec<Result<Vec<(usize, Vec<f64>)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                scope.spawn(move || {
                    (j..n)
                        .step_by(jobs)
                        .map(|i| {
                            let row = (i + 1..n)
                                .map(|k| scatter_distance(&sets[i], &sets[k]))
                                .collect::<Result<_>>()?;
                            Ok((i, row))
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("distance worker panicked"))
            .collect()
    });
    let mut d = vec![vec![0.0; n]; n];
    for share in rows {
        for (i, row) in share? {
            for (off, v) in row.into_iter().enumerate() {
                d[i][i + 1 + off] = v;
                d[i + 1 + off][i] = v;
            }
        }
    }
    Ok(d)
}

fn cmd_dist(a: &DistArgs) -> Result<()> {
    if a.jobs == 0 {
        return Err(Error::invalid("--jobs must be at least 1"));
    }
    let rois = read_rois(&a.rois)?;
    if rois.is_empty() {
        return Err(Error::Empty("ROI directory"));
    }
    let mut ids = Vec::with_capacity(rois.len());
    let mut sets = Vec::with_capacity(rois.len());
    for (id, img) in &rois {
        let patch = if img.width == CANONICAL && img.height == CANONICAL {
            img.clone()
        } else {
            resize_roi(
                img,
                &crate::imaging::BBox::new(0.0, 0.0, img.width as f64, img.height as f64),
                CANONICAL,
            )?
        };
        ids.push(id.clone());
        sets.push(extract_scatter_set(&patch)?);
    }
    let values = parallel_distances(&sets, a.jobs)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_distance_csv(
        &a.out,
        &DistanceTable {
            ids: ids.clone(),
            values,
        },
    )?;
    let points: PointSets = ids.into_iter().zip(sets).collect();
    write_json(&points_sidecar(&a.out), &points)
}

fn cmd_anchors(a: &AnchorArgs) -> Result<()> {
    let table = read_distance_csv(&a.dist)?;
    let points: PointSets = read_json(&points_sidecar(&a.dist))?;
    let sets = table
        .ids
        .iter()
        .map(|id| {
            points
                .get(id)
                .cloned()
                .ok_or_else(|| Error::Parse(format!("no scatter set for ROI {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let seed = seed_override(a.seed)?;
    let mut r = rng::stream(seed, rng::streams::ANCHORS);
    let c = kmedoids(&table.values, a.k, &mut r)?;
    write_json(
        &a.out,
        &StructureAnchorSet::from_clustering(&table.ids, &sets, &c),
    )
}

fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io::csv_err)?;
    for r in rows {
        w.serialize(r).map_err(io::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(io::csv_err)?;
    r.deserialize()
        .map(|row| row.map_err(io::csv_err))
        .collect()
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.seed = seed_override(a.seed.unwrap_or(cfg.seed))?;
    cfg.validate()?;
    let source = read_dataset(&a.source)?;
    let target = read_dataset(&a.target)?;
    let eval = a.eval.as_deref().map(read_dataset).transpose()?;
    let anchors: Option<StructureAnchorSet> = a.anchors.as_deref().map(read_json).transpose()?;
    let data = RunData::prepare(&cfg, &source, &target, eval.as_deref(), anchors)?;
    let out = train(&cfg, &data)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join(CONFIG_FILE), &cfg)?;
    write_metrics_csv(&a.out.join(METRICS_FILE), &out.metrics)?;
    write_json(&a.out.join(CHECKPOINT_FILE), &out.checkpoint)?;
    write_json(&a.out.join(ANCHORS_FILE), &out.anchors)?;
    write_jsonl(&a.out.join(LOG_FILE), &out.iterations)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck: Checkpoint = read_json(&a.checkpoint)?;
    let images = read_dataset(&a.data)?;
    let data = Dataset::prepare(&images, &ck.config, stream_offsets::EVAL)?;
    let m = evaluate(&ck.params, &ck.config, &data)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(&a.out).map_err(io::csv_err)?;
    w.serialize(m).map_err(io::csv_err)?;
    w.flush()?;
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let stem = a
        .out
        .file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    let dir = a
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_default();
    fs::create_dir_all(if dir.as_os_str().is_empty() {
        Path::new(".")
    } else {
        &dir
    })?;
    let mut md = String::from("# Training report\n\n## Ablation\n\n");
    md.push_str(
        "| run | source_only | λ_SHFA | λ_RSAA | epochs | precision | recall | F1 | mAP |\n",
    );
    md.push_str("|---|---|---|---|---|---|---|---|---|\n");
    let mut curves = Vec::new();
    for run in &a.run {
        let name = run
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let cfg: TrainConfig = read_json(&run.join(CONFIG_FILE))?;
        let rows = read_metrics_csv(&run.join(METRICS_FILE))?;
        let last = rows.iter().rev().find(|r| r.split == "eval");
        md.push_str(&format!(
            "| {name} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            cfg.source_only,
            cfg.lambda_shfa,
            cfg.lambda_rsaa,
            cfg.epochs,
            fmt(last.and_then(|r| r.precision)),
            fmt(last.and_then(|r| r.recall)),
            fmt(last.and_then(|r| r.f1)),
            fmt(last.and_then(|r| r.map)),
        ));
        let sidecar = format!("{stem}_{name}_curves.csv");
        write_metrics_csv(&dir.join(&sidecar), &rows)?;
        curves.push((name, sidecar));
    }
    md.push_str(
        "\n## Loss curves\n\nPer-epoch losses and evaluation metrics are in CSV sidecars:\n\n",
    );
    for (name, file) in &curves {
        md.push_str(&format!("- {name}: [{file}]({file})\n"));
    }
    fs::write(&a.out, md)?;
    Ok(())
}
