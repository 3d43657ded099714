//! Command line front end: every experiment is one subcommand driven by a
//! single config document, with dotted-path overrides. Result files carry no
//! wall-clock data, so re-running a command reproduces them byte for byte;
//! timing goes to stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use infergap::ais::{ais_forward, bdmc, BdmcPoint};
use infergap::bounds::BoundEstimate;
use infergap::harness::checkpoint::Checkpoint;
use infergap::harness::config::{ExperimentConfig, PRESET_NAMES};
use infergap::harness::dataset::Split;
use infergap::harness::report::{
    curve_to_csv, eval_subset, evaluate_gaps, gaps_over_epochs, grid_dump, grid_to_csv,
    GridConfig, Report, REPORT_VERSION,
};
use infergap::harness::train::{retrain_encoder, train, TrainOutcome};
use infergap::localopt::{optimize_local, Family};
use infergap::rng::derive_rng;
use infergap::{Error, Result};

#[derive(Parser)]
#[command(
    name = "infergap",
    version,
    about = "Trains small VAEs and splits their inference gap into approximation and amortization parts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// How the experiment config is obtained for commands that start from one.
#[derive(Args)]
struct ConfigArgs {
    /// Start from a named preset (run with a bad name to list them).
    #[arg(long, value_name = "NAME", conflicts_with = "config")]
    preset: Option<String>,
    /// Load the experiment config from a JSON file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Use the full-size training and evaluation budgets (with --preset).
    #[arg(long, requires = "preset")]
    paper_scale: bool,
    /// Override one config field: dotted path and JSON value, e.g.
    /// --set train.epochs=5 or --set eval.ais.n_chains=4.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

/// Checkpoint source for evaluation commands; overrides hit its embedded
/// config (estimator budgets, dataset limits, and so on).
#[derive(Args)]
struct CheckpointArgs {
    /// Trained checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Override one field of the checkpoint's embedded config.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save its checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Where to write the checkpoint.
        #[arg(long, value_name = "FILE", default_value = "checkpoint.json")]
        out: PathBuf,
    },
    /// Retrain a fresh encoder against a checkpoint's frozen decoder.
    RetrainEncoder {
        /// Checkpoint providing the decoder.
        #[arg(long, value_name = "FILE")]
        base: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "FILE", default_value = "retrained.json")]
        out: PathBuf,
    },
    /// Decompose the inference gap on a subset of datapoints.
    Gaps {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Which split the evaluation subset is drawn from.
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        /// Subset size; defaults to the config's eval.subset_size.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_name = "FILE", default_value = "report.json")]
        out: PathBuf,
    },
    /// Annealed lower bound on log p(x) per datapoint.
    Ais {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_name = "FILE", default_value = "ais.json")]
        out: PathBuf,
    },
    /// Sandwich the annealing error on data simulated from the model.
    Bdmc {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Number of simulated datapoints.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, value_name = "FILE", default_value = "bdmc.json")]
        out: PathBuf,
    },
    /// Locally optimize per-datapoint posteriors and report their bounds.
    LocalOpt {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_name = "FILE", default_value = "localopt.json")]
        out: PathBuf,
    },
    /// Train with snapshots and emit gap curves over epochs as CSV.
    Curve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "FILE", default_value = "curve.csv")]
        out: PathBuf,
        /// Also write the full curve document as JSON.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Dump latent-grid densities for one datapoint as CSV.
    Grid {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Dataset index of the datapoint.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Half-width of the square grid (default 4).
        #[arg(long)]
        span: Option<f64>,
        /// Cells per axis (default 200).
        #[arg(long)]
        cells: Option<usize>,
        #[arg(long, value_name = "FILE", default_value = "grid.csv")]
        out: PathBuf,
    },
}

/// Replaces one existing field of a JSON document. The path is dotted object
/// keys with numeric segments indexing arrays; the value is parsed as JSON,
/// falling back to a plain string.
fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("override '{spec}' must look like path.to.field=value"))
    })?;
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split('.').collect();

    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let here = || segments[..=i].join(".");
        let next = match cur {
            serde_json::Value::Object(map) => map
                .get_mut(*seg)
                .ok_or_else(|| Error::Config(format!("config has no field '{}'", here())))?,
            serde_json::Value::Array(items) => {
                let len = items.len();
                let idx: usize = seg.parse().map_err(|_| {
                    Error::Config(format!("'{}' indexes an array and needs a number", here()))
                })?;
                items.get_mut(idx).ok_or_else(|| {
                    Error::Config(format!("index '{}' is out of bounds (length {len})", here()))
                })?
            }
            _ => {
                return Err(Error::Config(format!(
                    "'{}' has no nested fields",
                    segments[..i].join(".")
                )))
            }
        };
        if i + 1 == segments.len() {
            *next = value;
            return Ok(());
        }
        cur = next;
    }
    unreachable!("an override path always has at least one segment")
}

fn apply_sets(cfg: &ExperimentConfig, sets: &[String]) -> Result<ExperimentConfig> {
    if sets.is_empty() {
        return Ok(cfg.clone());
    }
    let mut value = serde_json::to_value(cfg)?;
    for spec in sets {
        apply_override(&mut value, spec)?;
    }
    Ok(serde_json::from_value(value)?)
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let cfg = match (&self.preset, &self.config) {
            (Some(name), None) => ExperimentConfig::preset(name, self.paper_scale)?,
            (None, Some(path)) => ExperimentConfig::from_json_file(path)?,
            _ => {
                return Err(Error::Config(format!(
                    "pass exactly one of --preset NAME (one of {}) or --config FILE",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        let cfg = apply_sets(&cfg, &self.set)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl CheckpointArgs {
    fn load(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::load(&self.checkpoint)?;
        let cfg = apply_sets(&ckpt.config, &self.set)?;
        cfg.validate()?;
        ckpt.config = cfg;
        Ok(ckpt)
    }
}

fn save_json<T: Serialize>(doc: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Saves a (possibly partial) training result, then surfaces divergence as
/// the numerical-failure exit code.
fn finish_training(outcome: TrainOutcome, out: &Path) -> Result<()> {
    outcome.checkpoint.save(out)?;
    if let Some(rec) = outcome.checkpoint.curve.last() {
        println!(
            "epoch {}: train bound {:.4}, val bound {:.4}",
            rec.epoch, rec.train_bound, rec.val_bound
        );
    }
    println!("checkpoint written to {}", out.display());
    if outcome.diverged {
        return Err(Error::Numerical(format!(
            "training diverged; the last finite checkpoint (epoch {}) was kept",
            outcome.checkpoint.epoch
        )));
    }
    Ok(())
}

fn subset_for(
    ckpt: &Checkpoint,
    dataset: &infergap::harness::dataset::Dataset,
    split: SplitArg,
    n: Option<usize>,
) -> Vec<usize> {
    let n = n.unwrap_or(ckpt.config.eval.subset_size);
    eval_subset(dataset, split.into(), n)
}

fn cmd_train(config: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = config.resolve()?;
    let dataset = cfg.load_dataset()?;
    finish_training(train(&cfg, &dataset)?, out)
}

fn cmd_retrain(base: &Path, config: &ConfigArgs, out: &Path) -> Result<()> {
    let base = Checkpoint::load(base)?;
    let cfg = config.resolve()?;
    let dataset = cfg.load_dataset()?;
    finish_training(retrain_encoder(&base, &cfg, &dataset)?, out)
}

fn cmd_gaps(args: &CheckpointArgs, split: SplitArg, n: Option<usize>, out: &Path) -> Result<()> {
    let ckpt = args.load()?;
    let dataset = ckpt.config.load_dataset()?;
    let subset = subset_for(&ckpt, &dataset, split, n);
    let report: Report = evaluate_gaps(&ckpt, &dataset, &subset)?;
    report.save(out)?;
    let agg = &report.aggregate;
    println!(
        "n={} logp_hat {:.4}, elbo_q {:.4}; gaps: approximation {:.4}, amortization {:.4}, inference {:.4}",
        agg.n_points,
        agg.logp_hat,
        agg.elbo_q,
        agg.approximation_gap,
        agg.amortization_gap,
        agg.inference_gap
    );
    if !report.failures.is_empty() {
        println!("{} point(s) failed and were skipped", report.failures.len());
    }
    println!("report written to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct AisRow {
    index: usize,
    log_marginal_bound: f64,
    mean_acceptance: f64,
    n_dropped: usize,
}

#[derive(Serialize)]
struct AisReport {
    version: u32,
    config: ExperimentConfig,
    subset: Vec<usize>,
    mean_bound: f64,
    per_point: Vec<AisRow>,
}

fn cmd_ais(args: &CheckpointArgs, split: SplitArg, n: Option<usize>, out: &Path) -> Result<()> {
    let ckpt = args.load()?;
    let cfg = &ckpt.config;
    let dataset = cfg.load_dataset()?;
    let subset = subset_for(&ckpt, &dataset, split, n);
    if subset.is_empty() {
        return Err(Error::Config("the requested split has no datapoints".into()));
    }
    let schedule = cfg.eval.ais.build_schedule();
    let per_point: Vec<AisRow> = subset
        .iter()
        .map(|&idx| {
            let mut rng = derive_rng(cfg.eval.seed, "ais-cli", idx as u64);
            let r = ais_forward(
                &ckpt.model,
                &dataset.images[idx],
                &schedule,
                cfg.eval.ais.n_chains,
                cfg.eval.ais.n_leapfrog,
                &mut rng,
            )?;
            Ok(AisRow {
                index: idx,
                log_marginal_bound: r.log_marginal_bound,
                mean_acceptance: r.mean_acceptance,
                n_dropped: r.n_dropped,
            })
        })
        .collect::<Result<_>>()?;
    let mean_bound =
        per_point.iter().map(|r| r.log_marginal_bound).sum::<f64>() / per_point.len() as f64;
    let doc = AisReport { version: REPORT_VERSION, config: cfg.clone(), subset, mean_bound, per_point };
    save_json(&doc, out)?;
    println!("mean annealed bound {mean_bound:.4} over {} points", doc.per_point.len());
    println!("report written to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct BdmcReport {
    version: u32,
    config: ExperimentConfig,
    n_points: usize,
    lower: f64,
    upper: f64,
    gap: f64,
    per_point: Vec<BdmcPoint>,
}

fn cmd_bdmc(args: &CheckpointArgs, n: usize, out: &Path) -> Result<()> {
    let ckpt = args.load()?;
    let cfg = &ckpt.config;
    let schedule = cfg.eval.ais.build_schedule();
    let mut rng = derive_rng(cfg.eval.seed, "bdmc-cli", 0);
    let result = bdmc(
        &ckpt.model,
        n,
        &schedule,
        cfg.eval.ais.n_chains,
        cfg.eval.ais.n_leapfrog,
        &mut rng,
    )?;
    let doc = BdmcReport {
        version: REPORT_VERSION,
        config: cfg.clone(),
        n_points: n,
        lower: result.lower,
        upper: result.upper,
        gap: result.gap,
        per_point: result.per_point,
    };
    save_json(&doc, out)?;
    println!("sandwich [{:.4}, {:.4}], mean gap {:.4}", doc.lower, doc.upper, doc.gap);
    println!("report written to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct LocalRow {
    index: usize,
    family: Family,
    elbo_star: BoundEstimate,
    steps_used: usize,
    converged: bool,
    restarted: bool,
}

#[derive(Serialize)]
struct LocalReport {
    version: u32,
    config: ExperimentConfig,
    subset: Vec<usize>,
    rows: Vec<LocalRow>,
}

fn cmd_local_opt(
    args: &CheckpointArgs,
    split: SplitArg,
    n: Option<usize>,
    out: &Path,
) -> Result<()> {
    let ckpt = args.load()?;
    let cfg = &ckpt.config;
    let dataset = cfg.load_dataset()?;
    let subset = subset_for(&ckpt, &dataset, split, n);
    if subset.is_empty() {
        return Err(Error::Config("the requested split has no datapoints".into()));
    }
    let rows: Vec<LocalRow> = subset
        .par_iter()
        .map(|&idx| {
            let mut rng = derive_rng(cfg.eval.seed, "local-cli", idx as u64);
            let mut point_rows = Vec::new();
            for &family in &cfg.eval.local_families {
                let local_cfg = cfg.local_opt_config(family);
                let r = optimize_local(&ckpt.model, &dataset.images[idx], &local_cfg, &mut rng)?;
                point_rows.push(LocalRow {
                    index: idx,
                    family,
                    elbo_star: r.elbo_star,
                    steps_used: r.steps_used,
                    converged: r.converged,
                    restarted: r.restarted,
                });
            }
            Ok(point_rows)
        })
        .collect::<Result<Vec<Vec<LocalRow>>>>()?
        .into_iter()
        .flatten()
        .collect();
    let n_converged = rows.iter().filter(|r| r.converged).count();
    let n_rows = rows.len();
    let doc = LocalReport { version: REPORT_VERSION, config: cfg.clone(), subset, rows };
    save_json(&doc, out)?;
    println!("{n_converged}/{n_rows} local optimizations converged");
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_curve(config: &ConfigArgs, out: &Path, report: Option<&Path>) -> Result<()> {
    let cfg = config.resolve()?;
    let dataset = cfg.load_dataset()?;
    let curve = gaps_over_epochs(&cfg, &dataset)?;
    fs::write(out, curve_to_csv(&curve.rows)?)?;
    if let Some(path) = report {
        save_json(&curve, path)?;
    }
    println!(
        "{} rows over epochs {:?} written to {}",
        curve.rows.len(),
        curve.epochs,
        out.display()
    );
    if curve.diverged {
        return Err(Error::Numerical(
            "training diverged; the curve covers the finite prefix".into(),
        ));
    }
    Ok(())
}

fn cmd_grid(
    args: &CheckpointArgs,
    index: usize,
    span: Option<f64>,
    cells: Option<usize>,
    out: &Path,
) -> Result<()> {
    let ckpt = args.load()?;
    let dataset = ckpt.config.load_dataset()?;
    if index >= dataset.n() {
        return Err(Error::Config(format!(
            "datapoint index {index} out of range for {} datapoints",
            dataset.n()
        )));
    }
    let mut grid_cfg = GridConfig::default();
    if let Some(s) = span {
        grid_cfg.span = s;
    }
    if let Some(c) = cells {
        grid_cfg.n = c;
    }
    let table = grid_dump(&ckpt, &dataset.images[index], &grid_cfg)?;
    fs::write(out, grid_to_csv(&table)?)?;
    println!("{} grid cells written to {}", table.rows.len(), out.display());
    Ok(())
}

fn run(command: &Command) -> Result<()> {
    match command {
        Command::Train { config, out } => cmd_train(config, out),
        Command::RetrainEncoder { base, config, out } => cmd_retrain(base, config, out),
        Command::Gaps { ckpt, split, n, out } => cmd_gaps(ckpt, *split, *n, out),
        Command::Ais { ckpt, split, n, out } => cmd_ais(ckpt, *split, *n, out),
        Command::Bdmc { ckpt, n, out } => cmd_bdmc(ckpt, *n, out),
        Command::LocalOpt { ckpt, split, n, out } => cmd_local_opt(ckpt, *split, *n, out),
        Command::Curve { config, out, report } => cmd_curve(config, out, report.as_deref()),
        Command::Grid { ckpt, index, span, cells, out } => {
            cmd_grid(ckpt, *index, *span, *cells, out)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let started = std::time::Instant::now();
    let result = run(&cli.command);
    eprintln!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
