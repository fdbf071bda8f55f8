//! Subcommand implementations, usable as a library.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hvae_core::alloc::{argmax_smallest_key, dims_label};
use hvae_core::datasets::{encode_idx_images, preprocess, subsample, Dataset, Provenance as DataSource};
use hvae_core::hvae::{HvaeParams, Trainer};
use hvae_core::metrics::{normalized_mean, summary};
use hvae_core::numerics::{SeededRng, Stream, Tensor, RNG_ALGORITHM};
use hvae_core::scoring::{mi_estimate, score_batch, MiEstimate, ScoreOptions, ScoreSeries, SeriesLabel};
use hvae_core::Exec;

use crate::checkpoint::{file_sha256, Checkpoint};
use crate::config::{AllocationSpec, DataRef, EvalSpec, ResolvedAllocation, RunConfig, SweepConfig, TrainSpec};
use crate::data;
use crate::error::{io, CliError};
use crate::report::{
    read_json, write_json, write_report_csv, CellFailure, DataProvenance, Heatmap, HeatmapCell, HeatmapRow, Provenance, Report,
    ReportRow,
};

pub const TOOL: &str = concat!("hvae-ood ", env!("CARGO_PKG_VERSION"));

/// Machine-readable allocation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub label: String,
    pub budget: usize,
    pub depth: usize,
    pub ratio: Option<f64>,
    pub control: Option<String>,
    pub dims: Vec<usize>,
}

pub fn allocate(spec: &AllocationSpec) -> Result<PlanRecord, CliError> {
    let r = spec.resolve().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(PlanRecord { label: r.label, budget: r.budget, depth: r.dims.len(), ratio: r.ratio, control: spec.control.clone(), dims: r.dims })
}

/// One structured training-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub elbo: f64,
    pub objective: f64,
    pub kl: Vec<f64>,
}

/// Trains `cfg` into `out`. With `resume`, an existing checkpoint for the
/// same model continues from its saved epoch (and is returned untouched if
/// already complete).
pub fn train(cfg: &RunConfig, out: &Path, log: &mut dyn Write, resume: bool) -> Result<Checkpoint, CliError> {
    let alloc = cfg.allocation.resolve()?;
    let ds = data::load(&cfg.data.train)?;
    let model = cfg.model.hvae_config(alloc.dims.clone(), ds.image_shape(), cfg.train.seed);
    let hyper = cfg.train.optimizer();

    let existing = if resume && out.exists() { Some(Checkpoint::load(out)?) } else { None };
    let (mut trainer, mut rng) = match existing {
        // a longer schedule may continue a shorter run; anything else restarts
        Some(c) if c.header.model == model && TrainSpec { epochs: hyper.epochs, ..c.header.train.clone() } == cfg.train => {
            if c.header.epoch >= hyper.epochs {
                return Ok(c);
            }
            c.trainer()?
        }
        _ => {
            let mut rng = SeededRng::new(cfg.train.seed);
            let params = HvaeParams::build(&model, &mut rng)?;
            (Trainer::new(params), rng)
        }
    };
    while trainer.epoch < hyper.epochs {
        let s = trainer.run_epoch_dataset(&ds, &hyper, &mut rng)?;
        let rec = LogRecord { epoch: s.epoch, elbo: s.mean_elbo, objective: s.mean_objective, kl: s.kl_per_layer };
        writeln!(log, "{}", serde_json::to_string(&rec).expect("log record")).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let ckpt = Checkpoint::from_trainer(&trainer, &rng, &cfg.train, Some(alloc));
    ckpt.save(out)?;
    Ok(Checkpoint::load(out)?)
}

/// Caps `ds` at `limit` inputs and applies the decoder's preprocessing.
fn prepare(ds: &Dataset, params: &HvaeParams, limit: usize, seed: u64, index: u64) -> Result<Tensor, CliError> {
    let capped = if ds.len() > limit { subsample(ds, limit, seed.wrapping_add(index))? } else { ds.clone() };
    if capped.image_shape() != params.config().input_shape {
        return Err(CliError::Config(format!(
            "dataset `{}` has shape {:?}, model expects {:?}",
            ds.name,
            capped.image_shape(),
            params.config().input_shape
        )));
    }
    let mut rng = SeededRng::for_stream(seed, Stream::Data).derive(index);
    Ok(preprocess(&capped, params.config().decoder, &mut rng).tensor())
}

fn data_provenance(ds: &Dataset, n: usize) -> DataProvenance {
    let sha256 = match &ds.provenance {
        DataSource::IdxFile { checksum, .. } => checksum.clone(),
        _ => ds.checksum(),
    };
    DataProvenance { name: ds.name.clone(), sha256, n }
}

/// Scores plus the report built from them.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: Report,
    pub id_series: ScoreSeries,
    pub ood_series: Vec<ScoreSeries>,
}

pub fn evaluate(
    checkpoint: &Path,
    eval: &EvalSpec,
    id: &DataRef,
    oods: &[DataRef],
    label: Option<&str>,
    exec: Exec,
) -> Result<EvalOutcome, CliError> {
    eval.validate()?;
    if oods.is_empty() {
        return Err(CliError::Usage("at least one OOD dataset is required".into()));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let params = ckpt.params()?;
    if eval.k_llr > params.layers() {
        return Err(CliError::Usage(format!("k = {} exceeds the model depth {}", eval.k_llr, params.layers())));
    }
    let config = label
        .map(str::to_string)
        .or_else(|| ckpt.header.allocation.as_ref().map(|a| a.label.clone()))
        .unwrap_or_else(|| dims_label(&params.config().layer_dims));
    let opts = ScoreOptions { k: eval.k_llr, importance_samples: eval.importance_samples, limit: None, exec };
    let base = SeededRng::for_stream(eval.seed, Stream::Eval);

    let id_ds = data::load(id)?;
    let id_x = prepare(&id_ds, &params, eval.eval_samples, eval.seed, 0)?;
    let id_series = score_batch(&params, &id_x, &opts, &base.derive(0), SeriesLabel::Id, &id_ds.name)?;
    let id_scores = eval.orientation.id_scores(&id_series.values);

    let mut rows = Vec::new();
    let mut ood_series = Vec::new();
    let mut ood_prov = Vec::new();
    for (j, r) in oods.iter().enumerate() {
        let ds = data::load(r)?;
        let x = prepare(&ds, &params, eval.eval_samples, eval.seed, j as u64 + 1)?;
        let s = score_batch(&params, &x, &opts, &base.derive(j as u64 + 1), SeriesLabel::Ood, &ds.name)?;
        let m = summary(&id_scores, &eval.orientation.id_scores(&s.values))?;
        rows.push(ReportRow {
            config: config.clone(),
            ood: ds.name.clone(),
            auroc: m.auroc,
            auprc: m.auprc,
            fpr80: m.fpr80,
            fpr95: m.fpr95,
            mean: m.normalized_mean,
            n_id: m.n_id,
            n_ood: m.n_ood,
            seed: eval.seed,
        });
        ood_prov.push(data_provenance(&ds, s.values.len()));
        ood_series.push(s);
    }
    let provenance = Provenance {
        tool: TOOL.into(),
        checkpoint_sha256: file_sha256(checkpoint)?,
        id: data_provenance(&id_ds, id_series.values.len()),
        ood: ood_prov,
        k: eval.k_llr,
        importance_samples: eval.importance_samples,
        eval_samples: eval.eval_samples,
        seed: eval.seed,
        orientation: eval.orientation,
        rng: RNG_ALGORITHM.into(),
    };
    Ok(EvalOutcome { report: Report { provenance, rows }, id_series, ood_series })
}

/// MI estimate with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiRecord {
    #[serde(flatten)]
    pub estimate: MiEstimate,
    pub checkpoint_sha256: String,
    pub data: DataProvenance,
    pub seed: u64,
}

pub fn mutual_information(
    checkpoint: &Path,
    data_ref: &DataRef,
    layer: usize,
    samples: usize,
    limit: usize,
    seed: u64,
    exec: Exec,
) -> Result<MiRecord, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let params = ckpt.params()?;
    if layer == 0 || layer > params.layers() {
        return Err(CliError::Usage(format!("layer {layer} outside 1..={}", params.layers())));
    }
    if samples == 0 || limit == 0 {
        return Err(CliError::Usage("samples and input count must be >= 1".into()));
    }
    let ds = data::load(data_ref)?;
    let x = prepare(&ds, &params, limit, seed, 0)?;
    let estimate = mi_estimate(&params, &x, layer, samples, &SeededRng::for_stream(seed, Stream::MutualInfo), exec)?;
    Ok(MiRecord {
        checkpoint_sha256: file_sha256(checkpoint)?,
        data: data_provenance(&ds, estimate.inputs_used),
        seed,
        estimate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRecord {
    pub k: usize,
    pub n: usize,
    pub mse: f64,
}

/// Reconstructs up to `n` inputs keeping the bottom `k` latents from the
/// posterior; optionally writes the reconstructions as IDX.
pub fn reconstruct(
    checkpoint: &Path,
    data_ref: &DataRef,
    k: usize,
    n: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<ReconRecord, CliError> {
    let params = Checkpoint::load(checkpoint)?.params()?;
    if k > params.layers() {
        return Err(CliError::Usage(format!("k = {k} exceeds the model depth {}", params.layers())));
    }
    let ds = data::load(data_ref)?;
    let x = prepare(&ds, &params, n.max(1), seed, 0)?;
    let rec = params.reconstruct_gt_k(&x, k, &mut SeededRng::for_stream(seed, Stream::Eval))?;
    let mse = x.data().iter().zip(rec.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    if let Some(path) = out {
        let clamped: Vec<f64> = rec.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let rows = x.shape()[0];
        let recon = Dataset::new("recon", rows, params.config().input_shape, clamped, ds.provenance.clone())?;
        fs::write(path, encode_idx_images(&recon)).map_err(io(path))?;
    }
    Ok(ReconRecord { k, n: x.shape()[0], mse })
}

fn cell_dir(out: &Path, alloc: &ResolvedAllocation, seed: usize) -> PathBuf {
    out.join(&alloc.label).join(format!("seed-{seed}"))
}

/// Trains (or resumes) and evaluates one sweep cell, reusing a stored report
/// when it matches the stored checkpoint.
fn run_cell(cfg: &SweepConfig, alloc: &ResolvedAllocation, seed: usize, out: &Path, exec: Exec) -> Result<Report, CliError> {
    let dir = cell_dir(out, alloc, seed);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let ckpt_path = dir.join("model.hvck");
    let report_path = dir.join("report.json");
    let run = cfg.cell(alloc, seed);
    if ckpt_path.exists() && report_path.exists() {
        if let Ok(report) = read_json::<Report>(&report_path) {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let fresh = ckpt.header.epoch >= run.train.epochs && ckpt.header.train == run.train;
            if fresh && report.provenance.checkpoint_sha256 == file_sha256(&ckpt_path)? {
                return Ok(report);
            }
        }
    }
    let log_path = dir.join("train.log");
    let mut log = fs::File::create(&log_path).map_err(io(&log_path))?;
    train(&run, &ckpt_path, &mut log, true)?;
    let outcome = evaluate(&ckpt_path, &run.eval, &run.data.id, &run.data.ood, Some(&alloc.label), exec)?;
    write_report_csv(&outcome.report.rows, &dir.join("report.csv"))?;
    write_json(&outcome.report, &report_path)?;
    Ok(outcome.report)
}

/// Seed-averages cell reports into heatmap rows and picks `r*` over the
/// ratio-grid rows.
pub fn aggregate(id: &str, allocs: &[ResolvedAllocation], reports: &[Vec<Option<Report>>], failures: Vec<CellFailure>) -> Heatmap {
    let mut rows = Vec::new();
    for (alloc, per_seed) in allocs.iter().zip(reports) {
        let ok: Vec<&Report> = per_seed.iter().flatten().collect();
        let Some(first) = ok.first() else { continue };
        let n = ok.len() as f64;
        let cells: Vec<HeatmapCell> = first
            .rows
            .iter()
            .enumerate()
            .map(|(j, r0)| {
                let avg = |f: fn(&ReportRow) -> f64| ok.iter().map(|r| f(&r.rows[j])).sum::<f64>() / n;
                let (auroc, auprc, fpr80, fpr95) = (avg(|r| r.auroc), avg(|r| r.auprc), avg(|r| r.fpr80), avg(|r| r.fpr95));
                HeatmapCell { ood: r0.ood.clone(), auroc, auprc, fpr80, fpr95, mean: normalized_mean(auroc, auprc, fpr80, fpr95) }
            })
            .collect();
        let mean = cells.iter().map(|c| c.mean).sum::<f64>() / cells.len() as f64;
        rows.push(HeatmapRow { config: alloc.label.clone(), ratio: alloc.ratio, cells, mean, seeds: ok.len() });
    }
    let grid: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.ratio.map(|k| (k, r.mean))).collect();
    let r_star = argmax_smallest_key(&grid).map(|i| grid[i].0);
    Heatmap { id: id.to_string(), rows, r_star, failures }
}

/// Runs every (configuration, seed) cell, writes `heatmap.csv` and
/// `heatmap.json` under `out`, and fails after writing if any cell failed.
pub fn sweep(cfg: &SweepConfig, out: &Path, jobs: usize, exec: Exec) -> Result<Heatmap, CliError> {
    let allocs = cfg.allocations()?;
    fs::create_dir_all(out).map_err(io(out))?;
    let seeds = cfg.sweep.seeds;
    let cells: Vec<(usize, usize)> = (0..allocs.len()).flat_map(|a| (0..seeds).map(move |s| (a, s))).collect();
    let inner = if jobs > 1 { Exec::Sequential } else { exec };
    let work = |&(a, s): &(usize, usize)| run_cell(cfg, &allocs[a], s, out, inner);
    let results: Vec<Result<Report, CliError>> = run_cells(&cells, jobs, work);

    let mut reports = vec![vec![None; seeds]; allocs.len()];
    let mut failures = Vec::new();
    for (&(a, s), r) in cells.iter().zip(results) {
        match r {
            Ok(rep) => reports[a][s] = Some(rep),
            Err(e) => failures.push(CellFailure { config: allocs[a].label.clone(), seed: s, error: e.to_string() }),
        }
    }
    let heatmap = aggregate(&cfg.data.id.label(), &allocs, &reports, failures);
    let csv_path = out.join("heatmap.csv");
    fs::write(&csv_path, heatmap.to_csv()).map_err(io(&csv_path))?;
    write_json(&heatmap, &out.join("heatmap.json"))?;
    if !heatmap.failures.is_empty() {
        return Err(CliError::SweepFailures { failed: heatmap.failures.len(), total: cells.len() });
    }
    Ok(heatmap)
}

#[cfg(feature = "parallel")]
fn run_cells<T: Send, F: Fn(&(usize, usize)) -> T + Sync>(cells: &[(usize, usize)], jobs: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    if jobs <= 1 {
        return cells.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| cells.par_iter().map(&f).collect()),
        Err(_) => cells.iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_cells<T, F: Fn(&(usize, usize)) -> T>(cells: &[(usize, usize)], _jobs: usize, f: F) -> Vec<T> {
    cells.iter().map(f).collect()
}
