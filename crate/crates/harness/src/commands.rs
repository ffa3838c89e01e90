//! `run`, `ablate` and `data gen`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use sscl_core::data::write_snapshot;
use sscl_core::trainer::{write_metrics_csv, EpochMetrics, TrainConfig};
use sscl_core::Trainer;

use crate::config::ExperimentSpec;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Replaces `train.seed` when set.
    pub seed: Option<u64>,
    /// Worker threads for independent runs.
    pub jobs: usize,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            seed: None,
            jobs: 1,
        }
    }

    fn apply(&self, spec: &ExperimentSpec) -> ExperimentSpec {
        let mut spec = spec.clone();
        if let Some(s) = self.seed {
            spec.train.seed = s;
        }
        spec
    }

    fn pool(&self) -> anyhow::Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build()
            .context("building worker pool")
    }
}

/// Writes to a sibling temporary file and renames it into place, so a
/// reader never observes a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().context("output path has no parent")?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp =
        tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Final-epoch metrics of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub last: EpochMetrics,
}

fn train_one(cfg: TrainConfig, dir: &Path) -> anyhow::Result<SeedResult> {
    let seed = cfg.seed;
    let mut t = Trainer::new(cfg).with_context(|| format!("setting up seed {seed}"))?;
    t.run().with_context(|| format!("training seed {seed}"))?;
    let mut csv = Vec::new();
    write_metrics_csv(t.history(), &mut csv)?;
    write_atomic(&dir.join("metrics.csv"), &csv)?;
    let ck = serde_json::to_vec(&t.checkpoint())?;
    write_atomic(&dir.join("checkpoint.json"), &ck)?;
    let last = t
        .history()
        .last()
        .copied()
        .with_context(|| format!("seed {seed} ran zero epochs"))?;
    Ok(SeedResult { seed, last })
}

/// Sample mean and standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const SUMMARY_HEADER: &str = "metric,mean,std,n";

fn summary_csv(results: &[SeedResult]) -> String {
    type Getter = fn(&EpochMetrics) -> f64;
    let metrics: [(&str, Getter); 7] = [
        ("top1", |m| m.top1),
        ("pl_acc", |m| m.pl_acc),
        ("proto_acc", |m| m.proto_acc),
        ("overlap", |m| m.overlap),
        ("intra_sim", |m| m.intra_sim),
        ("pos_sel_acc", |m| m.pos_sel_acc),
        ("kept_frac", |m| m.kept_frac),
    ];
    let mut out = format!("{SUMMARY_HEADER}\n");
    for (name, get) in metrics {
        let xs: Vec<f64> = results.iter().map(|r| get(&r.last)).collect();
        let (m, s) = mean_std(&xs);
        writeln!(out, "{name},{m:.6},{s:.6},{}", xs.len()).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub dir: PathBuf,
    pub seeds: Vec<SeedResult>,
    pub top1_mean: f64,
    pub top1_std: f64,
}

/// One training run per seed under `<out>/<name>/seed-<s>/`, then
/// `<out>/<name>/summary.csv`.
pub fn cmd_run(spec: &ExperimentSpec, opts: &RunOptions) -> anyhow::Result<RunReport> {
    let spec = opts.apply(spec);
    spec.validate()?;
    let dir = opts.out_dir.join(&spec.name);
    let seeds = run_seeds(&spec.train, &spec.seeds(), &dir, opts)?;
    write_atomic(&dir.join("summary.csv"), summary_csv(&seeds).as_bytes())?;
    let top1: Vec<f64> = seeds.iter().map(|r| r.last.top1).collect();
    let (top1_mean, top1_std) = mean_std(&top1);
    println!(
        "{}: top1 {top1_mean:.4} ± {top1_std:.4} over {} seed(s)",
        spec.name,
        seeds.len()
    );
    Ok(RunReport {
        dir,
        seeds,
        top1_mean,
        top1_std,
    })
}

fn run_seeds(train: &TrainConfig, seeds: &[u64], dir: &Path, opts: &RunOptions) -> anyhow::Result<Vec<SeedResult>> {
    let jobs: Vec<(TrainConfig, PathBuf)> = seeds
        .iter()
        .map(|&s| {
            (
                TrainConfig {
                    seed: s,
                    ..train.clone()
                },
                dir.join(format!("seed-{s}")),
            )
        })
        .collect();
    opts.pool()?
        .install(|| jobs.into_par_iter().map(|(cfg, d)| train_one(cfg, &d)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub variant: String,
    /// Final-epoch test top-1 per seed, in seed order.
    pub top1: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

/// Ablation results in sweep order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let seeds: Vec<u64> = self
            .rows
            .first()
            .map(|r| r.top1.iter().map(|(s, _)| *s).collect())
            .unwrap_or_default();
        let mut out = String::from("variant,mean,std");
        for s in &seeds {
            write!(out, ",top1_seed{s}").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{:.6},{:.6}", csv_field(&r.variant), r.mean, r.std).unwrap();
            for (_, v) in &r.top1 {
                write!(out, ",{v:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
        let mut out = format!("{:<width$}  top1 (mean ± std)\n", "variant");
        for r in &self.rows {
            writeln!(out, "{:<width$}  {:.4} ± {:.4}", r.variant, r.mean, r.std).unwrap();
        }
        out
    }
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.=".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Every sweep point times every seed, aggregated in sweep order.
pub fn cmd_ablate(spec: &ExperimentSpec, opts: &RunOptions) -> anyhow::Result<ResultTable> {
    let spec = opts.apply(spec);
    spec.validate()?;
    if spec.variants.is_empty() {
        bail!("ablation needs at least one sweep.* key");
    }
    let dir = opts.out_dir.join(&spec.name);
    let variants = spec.variant_runs()?;
    let seeds = spec.seeds();
    let jobs: Vec<(usize, TrainConfig, PathBuf)> = variants
        .iter()
        .enumerate()
        .flat_map(|(i, v)| {
            let vdir = dir.join(slug(&v.label));
            seeds.iter().map(move |&s| {
                (
                    i,
                    TrainConfig {
                        seed: s,
                        ..v.train.clone()
                    },
                    vdir.join(format!("seed-{s}")),
                )
            })
        })
        .collect();
    let results: Vec<(usize, SeedResult)> = opts.pool()?.install(|| {
        jobs.into_par_iter()
            .map(|(i, cfg, d)| train_one(cfg, &d).map(|r| (i, r)))
            .collect::<anyhow::Result<_>>()
    })?;
    let rows = variants
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let top1: Vec<(u64, f64)> = results
                .iter()
                .filter(|(j, _)| *j == i)
                .map(|(_, r)| (r.seed, r.last.top1))
                .collect();
            let (mean, std) = mean_std(&top1.iter().map(|(_, v)| *v).collect::<Vec<_>>());
            ResultRow {
                variant: v.label.clone(),
                top1,
                mean,
                std,
            }
        })
        .collect();
    let table = ResultTable { rows };
    write_atomic(&dir.join("ablation.csv"), table.to_csv().as_bytes())?;
    print!("{}", table.to_text());
    Ok(table)
}

/// Writes the dataset of `train.seed` as `<out>/<name>/data-seed-<s>.csv`.
pub fn cmd_data_gen(spec: &ExperimentSpec, opts: &RunOptions) -> anyhow::Result<PathBuf> {
    let spec = opts.apply(spec);
    spec.validate()?;
    let ds = spec.train.data.build(spec.train.seed)?;
    let mut buf = Vec::new();
    write_snapshot(&ds, &mut buf)?;
    let path = opts
        .out_dir
        .join(&spec.name)
        .join(format!("data-seed-{}.csv", spec.train.seed));
    write_atomic(&path, &buf)?;
    println!("wrote {}", path.display());
    Ok(path)
}
