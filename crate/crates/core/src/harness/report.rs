//! Report emission: per-datapoint gap evaluation, gap-over-epoch curves,
//! and 2-D density grids for posterior visualization.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, EpochRecord};
use super::config::ExperimentConfig;
use super::dataset::{Dataset, Split};
use super::train::train_with_snapshots;
use crate::bounds::Posterior;
use crate::error::{Error, Result};
use crate::flows::{log_density_split, FlowPosterior};
use crate::gaps::{aggregate, decompose, estimate_logp, GapReport, IwaeConfig, PointGaps};
use crate::localopt::{amortized_elbo, optimize_local, Family};
use crate::model::{encode, log_q_ffg, normalize_grid, true_posterior_grid, Grid2d, VaeModel};
use crate::rng::derive_rng;

/// Schema version of report documents.
pub const REPORT_VERSION: u32 = 1;

/// A datapoint whose evaluation failed, with the reason it was skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub index: usize,
    pub message: String,
}

/// Full gap-evaluation document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub config: ExperimentConfig,
    /// Epochs the evaluated checkpoint had completed.
    pub epoch: usize,
    /// Dataset indices evaluated, in report order.
    pub subset: Vec<usize>,
    pub per_point: Vec<PointGaps>,
    pub aggregate: GapReport,
    pub failures: Vec<PointFailure>,
    /// Per-epoch bound curve copied from the checkpoint.
    pub training_curve: Vec<EpochRecord>,
}

impl Report {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// First `n` dataset indices carrying the split tag.
pub fn eval_subset(dataset: &Dataset, split: Split, n: usize) -> Vec<usize> {
    dataset.indices_of(split).into_iter().take(n).collect()
}

fn family_star(point: &PointGaps, family: Family) -> Option<crate::bounds::BoundEstimate> {
    match family {
        Family::Ffg => point.elbo_star_ffg,
        Family::Flow => point.elbo_star_flow,
        Family::AuxFlow => point.elbo_star_aux_flow,
    }
}

fn eval_point(
    model: &VaeModel,
    flow: Option<&FlowPosterior>,
    x: &[f64],
    index: usize,
    config: &ExperimentConfig,
    rng: &mut crate::rng::Prng,
) -> Result<PointGaps> {
    let q = match flow {
        Some(f) => Posterior::AmortizedFlow(f),
        None => Posterior::AmortizedFfg,
    };
    let iwae_cfg = IwaeConfig { k: config.eval.iwae_k };
    let logp = estimate_logp(model, &q, x, &config.eval.ais, &iwae_cfg, rng)?;
    let elbo_q = amortized_elbo(model, flow, x, config.eval.local_final_samples, rng)?;

    let mut point = PointGaps {
        index,
        logp,
        elbo_q,
        elbo_star_ffg: None,
        elbo_star_flow: None,
        elbo_star_aux_flow: None,
        decomposition: decompose(0.0, 0.0, 0.0),
    };
    for &family in &config.eval.local_families {
        let local_cfg = config.local_opt_config(family);
        let result = optimize_local(model, x, &local_cfg, rng)?;
        let slot = match family {
            Family::Ffg => &mut point.elbo_star_ffg,
            Family::Flow => &mut point.elbo_star_flow,
            Family::AuxFlow => &mut point.elbo_star_aux_flow,
        };
        *slot = Some(result.elbo_star);
    }
    let star = family_star(&point, config.model.family)
        .expect("local families were checked to cover the trained family");
    point.decomposition = decompose(point.logp.value, star.value, point.elbo_q.value);
    Ok(point)
}

/// Evaluates the full gap pipeline on a subset of datapoints. Failed points
/// are recorded and skipped; everything else lands in the aggregate.
pub fn evaluate_gaps(ckpt: &Checkpoint, dataset: &Dataset, subset: &[usize]) -> Result<Report> {
    ckpt.validate()?;
    let config = &ckpt.config;
    if !config.eval.local_families.contains(&config.model.family) {
        return Err(Error::Config(format!(
            "local_families {:?} must include the trained family {:?} to decompose its gap",
            config.eval.local_families, config.model.family
        )));
    }
    if subset.is_empty() {
        return Err(Error::Config("gap evaluation needs a non-empty subset".into()));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= dataset.n()) {
        return Err(Error::Config(format!(
            "subset index {bad} out of range for {} datapoints",
            dataset.n()
        )));
    }

    let master = config.eval.seed;
    let outcomes: Vec<(usize, Result<PointGaps>)> = subset
        .par_iter()
        .map(|&idx| {
            let mut rng = derive_rng(master, "gap-point", idx as u64);
            (idx, eval_point(&ckpt.model, ckpt.flow.as_ref(), &dataset.images[idx], idx, config, &mut rng))
        })
        .collect();

    let mut per_point = Vec::new();
    let mut failures = Vec::new();
    for (idx, outcome) in outcomes {
        match outcome {
            Ok(point) => per_point.push(point),
            Err(e) => failures.push(PointFailure { index: idx, message: e.to_string() }),
        }
    }
    if per_point.is_empty() {
        return Err(Error::Numerical(format!(
            "all {} datapoints failed evaluation; first failure: {}",
            subset.len(),
            failures[0].message
        )));
    }
    let aggregate = aggregate(&per_point);
    Ok(Report {
        version: REPORT_VERSION,
        config: config.clone(),
        epoch: ckpt.epoch,
        subset: subset.to_vec(),
        per_point,
        aggregate,
        failures,
        training_curve: ckpt.curve.clone(),
    })
}

/// One observation of the long-form epoch curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: String,
    pub bound: String,
    pub value: f64,
}

/// Gap curves over training, in long form for external plotting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveReport {
    pub version: u32,
    pub config: ExperimentConfig,
    /// Epoch checkpoints actually evaluated.
    pub epochs: Vec<usize>,
    pub rows: Vec<CurveRow>,
    /// True when training aborted early on a non-finite objective.
    pub diverged: bool,
}

/// Powers of two up to the total, plus the endpoints.
pub fn log_spaced_epochs(total: usize) -> Vec<usize> {
    let mut epochs = vec![0];
    let mut e = 1;
    while e < total {
        epochs.push(e);
        e *= 2;
    }
    if total > 0 {
        epochs.push(total);
    }
    epochs.dedup();
    epochs
}

fn curve_bound_names(config: &ExperimentConfig) -> Vec<&'static str> {
    let mut names = vec!["logp_hat", "elbo_q"];
    for family in &config.eval.local_families {
        names.push(match family {
            Family::Ffg => "elbo_star_ffg",
            Family::Flow => "elbo_star_flow",
            Family::AuxFlow => "elbo_star_aux_flow",
        });
    }
    names.extend(["approximation_gap", "amortization_gap", "inference_gap"]);
    names
}

fn aggregate_value(agg: &GapReport, bound: &str) -> f64 {
    match bound {
        "logp_hat" => agg.logp_hat,
        "elbo_q" => agg.elbo_q,
        "elbo_star_ffg" => agg.elbo_star_ffg.expect("family evaluated"),
        "elbo_star_flow" => agg.elbo_star_flow.expect("family evaluated"),
        "elbo_star_aux_flow" => agg.elbo_star_aux_flow.expect("family evaluated"),
        "approximation_gap" => agg.approximation_gap,
        "amortization_gap" => agg.amortization_gap,
        "inference_gap" => agg.inference_gap,
        other => unreachable!("unknown bound column {other}"),
    }
}

/// Trains with log-spaced snapshots and evaluates the gap pipeline on fixed
/// train/validation subsets at each kept epoch.
pub fn gaps_over_epochs(config: &ExperimentConfig, dataset: &Dataset) -> Result<CurveReport> {
    let planned = log_spaced_epochs(config.train.epochs);
    let (outcome, snapshots) = train_with_snapshots(config, dataset, &planned)?;

    let n = config.train.eval_points.max(1);
    let train_sub = eval_subset(dataset, Split::Train, n);
    let mut val_sub = eval_subset(dataset, Split::Val, n);
    if val_sub.is_empty() {
        val_sub = train_sub.clone();
    }

    let bounds = curve_bound_names(config);
    let mut rows = Vec::new();
    let mut epochs = Vec::new();
    for snap in &snapshots {
        epochs.push(snap.epoch);
        for (split, subset) in [("train", &train_sub), ("val", &val_sub)] {
            let report = evaluate_gaps(snap, dataset, subset)?;
            for &bound in &bounds {
                rows.push(CurveRow {
                    epoch: snap.epoch,
                    split: split.to_string(),
                    bound: bound.to_string(),
                    value: aggregate_value(&report.aggregate, bound),
                });
            }
        }
    }
    Ok(CurveReport {
        version: REPORT_VERSION,
        config: config.clone(),
        epochs,
        rows,
        diverged: outcome.diverged,
    })
}

/// Serializes curve rows as CSV with an epoch,split,bound,value header.
pub fn curve_to_csv(rows: &[CurveRow]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(format!("csv: {e}")))
}

/// Parses CSV produced by `curve_to_csv`.
pub fn parse_curve_csv(text: &str) -> Result<Vec<CurveRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record.map_err(|e| Error::Config(format!("csv: {e}")))?);
    }
    Ok(rows)
}

/// Grid evaluation settings: an n x n lattice over [-span, span]^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub span: f64,
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { span: 4.0, n: 200 }
    }
}

/// One grid cell with the four density columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub z1: f64,
    pub z2: f64,
    pub true_density: f64,
    pub amortized_q: f64,
    pub optimal_ffg: f64,
    pub optimal_flow: f64,
}

/// Density table over the latent grid for one datapoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridTable {
    pub grid: Grid2d,
    pub rows: Vec<GridRow>,
}

fn density_column<F>(grid: &Grid2d, mut log_density: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut vals = Vec::with_capacity(grid.n_cells());
    for i in 0..grid.n[0] {
        for j in 0..grid.n[1] {
            let z = [grid.center(0, i), grid.center(1, j)];
            vals.push(log_density(&z)?);
        }
    }
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Numerical("density underflowed on the whole grid".into()));
    }
    normalize_grid(vals.iter().map(|lv| (lv - m).exp()).collect(), grid)
}

/// Evaluates the true posterior and three approximations of it on a latent
/// grid: the amortized posterior, and locally optimized diagonal and flow
/// posteriors. All columns are normalized over the grid.
pub fn grid_dump(ckpt: &Checkpoint, x: &[f64], grid_cfg: &GridConfig) -> Result<GridTable> {
    ckpt.validate()?;
    let model = &ckpt.model;
    if model.latent_dim != 2 {
        return Err(Error::Config(format!(
            "grid evaluation needs a 2-D latent space, got {}",
            model.latent_dim
        )));
    }
    if grid_cfg.n < 2 || !(grid_cfg.span > 0.0) {
        return Err(Error::Config("grid needs n >= 2 cells per axis and a positive span".into()));
    }
    if let Some(flow) = &ckpt.flow {
        if flow.is_auxiliary() {
            return Err(Error::Config(
                "the auxiliary family has no closed grid density; dump a diagonal or split-flow model"
                    .into(),
            ));
        }
    }
    let grid = Grid2d {
        min: [-grid_cfg.span; 2],
        max: [grid_cfg.span; 2],
        n: [grid_cfg.n; 2],
    };

    let true_density = true_posterior_grid(model, x, &grid)?;

    let enc_params = encode(model, x)?;
    let amortized = match &ckpt.flow {
        None => density_column(&grid, |z| Ok(log_q_ffg(z, &enc_params)))?,
        Some(flow) => density_column(&grid, |z| log_density_split(flow, &enc_params, z))?,
    };

    let config = &ckpt.config;
    let mut rng = derive_rng(config.eval.seed, "grid-local", 0);
    let ffg_cfg = config.local_opt_config(Family::Ffg);
    let ffg = optimize_local(model, x, &ffg_cfg, &mut rng)?;
    let ffg_col = density_column(&grid, |z| Ok(log_q_ffg(z, &ffg.q.base)))?;

    let mut rng = derive_rng(config.eval.seed, "grid-local", 1);
    let flow_cfg = config.local_opt_config(Family::Flow);
    let flow = optimize_local(model, x, &flow_cfg, &mut rng)?;
    let flow_post = flow.q.flow.as_ref().expect("split flow family carries a flow");
    let flow_col = density_column(&grid, |z| log_density_split(flow_post, &flow.q.base, z))?;

    let mut rows = Vec::with_capacity(grid.n_cells());
    for i in 0..grid.n[0] {
        for j in 0..grid.n[1] {
            let k = grid.index(i, j);
            rows.push(GridRow {
                z1: grid.center(0, i),
                z2: grid.center(1, j),
                true_density: true_density[k],
                amortized_q: amortized[k],
                optimal_ffg: ffg_col[k],
                optimal_flow: flow_col[k],
            });
        }
    }
    Ok(GridTable { grid, rows })
}

/// Serializes grid rows as CSV with a z1,z2,... header.
pub fn grid_to_csv(table: &GridTable) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in &table.rows {
        writer.serialize(row).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(format!("csv: {e}")))
}

/// Parses CSV produced by `grid_to_csv`.
pub fn parse_grid_csv(text: &str) -> Result<Vec<GridRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record.map_err(|e| Error::Config(format!("csv: {e}")))?);
    }
    Ok(rows)
}
