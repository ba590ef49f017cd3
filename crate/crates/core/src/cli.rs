//! `fhsim gen | run | summarize`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{generate, DatasetSource, ExperimentConfig, ProfileFile, SEED_ENV};
use crate::evaluation::{describe_plan, run_experiment, summarize, ExperimentPlan, ExperimentResult, ResultRow, SummaryRow};
use crate::phantom::io::{write_dataset, Manifest};
use crate::phantom::{default_profiles, PhantomGeometry};

pub const RESULTS_CSV: &str = "results.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const ROUNDS_JSONL: &str = "rounds.jsonl";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const RUN_JSON: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "fhsim", version, about = "Federated vs pooled training simulator on synthetic cardiac phantoms")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset tree with a manifest.
    Gen {
        /// TOML file with `[[centers]]` profiles and optional `[geometry]`;
        /// the built-in four centers when omitted.
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run an experiment grid from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite existing results.
        #[arg(long)]
        force: bool,
        /// Print folds, batch sizes and reference scope, then exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Recompute summary.json from a results.csv.
    Summarize {
        #[arg(long)]
        results: PathBuf,
        /// Defaults to summary.json next to the results file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn cmd_gen(profiles: Option<&Path>, seed: u64, out: &Path, force: bool) -> anyhow::Result<Manifest> {
    if is_nonempty_dir(out) && !force {
        bail!("{} is not empty; pass --force to overwrite", out.display());
    }
    let (profiles, geometry) = match profiles {
        Some(p) => {
            let f = ProfileFile::load(p)?;
            (f.centers, f.geometry.unwrap_or_default())
        }
        None => (default_profiles(), PhantomGeometry::default()),
    };
    let centers = generate(&profiles, &geometry, seed)?;
    if force && out.exists() {
        fs::remove_dir_all(out).with_context(|| format!("clearing {}", out.display()))?;
    }
    Ok(write_dataset(out, seed, &centers)?)
}

#[derive(Serialize)]
struct RunInfo<'a> {
    fingerprint: &'a str,
    dataset: String,
    plan: &'a ExperimentPlan,
}

#[derive(Serialize)]
struct RoundRecord<'a> {
    framework: &'a str,
    scheme: &'a str,
    tier: &'a str,
    prior: &'a str,
    seed: u64,
    fold: usize,
    #[serde(flatten)]
    round: &'a crate::federation::RoundLog,
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> anyhow::Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r.deserialize().collect::<Result<Vec<ResultRow>, _>>()?;
    Ok(rows)
}

pub fn write_summary(path: &Path, summary: &[SummaryRow]) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(summary)?;
    fs::write(path, json + "\n")?;
    Ok(())
}

/// Writes results.csv, summary.json, predictions.csv, rounds.jsonl and run.json.
pub fn write_outputs(dir: &Path, result: &ExperimentResult, plan: &ExperimentPlan, source: &DatasetSource) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    write_results_csv(&dir.join(RESULTS_CSV), &result.rows)?;
    write_summary(&dir.join(SUMMARY_JSON), &result.summary)?;

    let mut preds = csv::Writer::from_path(dir.join(PREDICTIONS_CSV))?;
    preds.write_record(["framework", "scheme", "tier", "prior", "seed", "fold", "center", "subject", "sample", "label", "score"])?;
    let mut rounds = std::io::BufWriter::new(fs::File::create(dir.join(ROUNDS_JSONL))?);
    for j in &result.jobs {
        let c = &j.cell;
        for p in &j.predictions {
            preds.write_record([
                c.framework.as_str(),
                c.scheme.as_str(),
                c.tier.as_str(),
                c.prior.as_str(),
                &j.seed.to_string(),
                &j.fold.to_string(),
                &p.center_id,
                &p.subject_id,
                &p.sample_key,
                &p.label.to_string(),
                &p.score.to_string(),
            ])?;
        }
        for r in &j.rounds {
            let rec = RoundRecord {
                framework: c.framework.as_str(),
                scheme: c.scheme.as_str(),
                tier: c.tier.as_str(),
                prior: c.prior.as_str(),
                seed: j.seed,
                fold: j.fold,
                round: r,
            };
            serde_json::to_writer(&mut rounds, &rec)?;
            rounds.write_all(b"\n")?;
        }
    }
    preds.flush()?;
    rounds.flush()?;

    let info = RunInfo {
        fingerprint: &result.fingerprint,
        dataset: source.describe(),
        plan,
    };
    fs::write(dir.join(RUN_JSON), serde_json::to_string_pretty(&info)? + "\n")?;
    Ok(())
}

pub enum RunOutcome {
    DryRun(String),
    Completed { output_dir: PathBuf, result: ExperimentResult },
}

pub fn cmd_run(config: &Path, force: bool, dry_run: bool, seed_override: Option<&str>) -> anyhow::Result<RunOutcome> {
    let cfg = ExperimentConfig::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let (plan, source, out_dir) = cfg.resolve(base, seed_override)?;
    if !dry_run && out_dir.join(RESULTS_CSV).exists() && !force {
        bail!("{} already holds results; pass --force to overwrite", out_dir.display());
    }
    let centers = source.load().with_context(|| source.describe())?;
    if dry_run {
        let mut text = format!("{}\noutput: {}\n", source.describe(), out_dir.display());
        text.push_str(&describe_plan(&plan, &centers)?);
        return Ok(RunOutcome::DryRun(text));
    }
    let result = run_experiment(&plan, &centers)?;
    write_outputs(&out_dir, &result, &plan, &source)?;
    Ok(RunOutcome::Completed { output_dir: out_dir, result })
}

pub fn cmd_summarize(results: &Path, out: Option<&Path>) -> anyhow::Result<PathBuf> {
    let rows = read_results_csv(results)?;
    let target = match out {
        Some(p) => p.to_path_buf(),
        None => results.parent().unwrap_or(Path::new(".")).join(SUMMARY_JSON),
    };
    write_summary(&target, &summarize(&rows))?;
    Ok(target)
}

pub fn main_with(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match cli.command {
        Command::Gen { profiles, seed, out, force } => {
            let m = cmd_gen(profiles.as_deref(), seed, &out, force)?;
            println!(
                "wrote {} files for {} subjects in {} centers to {}",
                m.total_files,
                m.total_subjects,
                m.centers.len(),
                out.display()
            );
        }
        Command::Run { config, force, dry_run } => {
            let seeds = std::env::var(SEED_ENV).ok();
            match cmd_run(&config, force, dry_run, seeds.as_deref())? {
                RunOutcome::DryRun(text) => print!("{text}"),
                RunOutcome::Completed { output_dir, result } => {
                    for s in &result.summary {
                        println!(
                            "{:<6} {:<4} {:<16} {:<14} AUC {:.3} ± {:.3}",
                            s.framework, s.scheme, s.tier, s.prior, s.total.mean, s.total.sd
                        );
                    }
                    println!("results in {}", output_dir.display());
                }
            }
        }
        Command::Summarize { results, out } => {
            let path = cmd_summarize(&results, out.as_deref())?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
