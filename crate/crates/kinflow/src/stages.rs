//! The pipeline stages as plain functions of their inputs. The CLI
//! subcommands and [`crate::pipeline`] both go through these.

use std::path::Path;

use kinflow_core::diagnostics::{exact_w2, f_mem, kpe_density_stats};
use kinflow_core::efm::EfmField;
use kinflow_core::mlp::{self, MlpParams, TrainConfig, TrainOutcome};
use kinflow_core::sampler::{sample_batch, BatchOutcome, KtsSchedule, Shaped, SolverConfig};
use kinflow_core::synthdata::{self, DatasetKind, LabeledDataset, MIN_POINTS};
use kinflow_core::VelocityField;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, DiagnosticsConfig};
use crate::error::{Error, Result};
use crate::formats::{self, BatchSummary, DiagnoseReport, DiagnoseSettings, FieldInfo};

/// Offset between a dataset's seed and the seed of its held-out W2 sample.
pub const HELDOUT_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn heldout_seed(data_seed: u64) -> u64 {
    data_seed.wrapping_add(HELDOUT_SEED_OFFSET)
}

pub fn gen_data(cfg: &DatasetConfig) -> Result<LabeledDataset> {
    Ok(synthdata::generate(cfg.kind, cfg.n, cfg.seed)?)
}

pub fn train_model(data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Ok(mlp::train(data, cfg)?)
}

pub fn model_info(p: &MlpParams) -> FieldInfo {
    FieldInfo::Model {
        widths: p.dims().to_vec(),
        params: p.num_params(),
    }
}

pub fn efm_info(f: &EfmField) -> FieldInfo {
    FieldInfo::Efm {
        atoms: f.mixture().len(),
        neighbors: f.neighbors(),
    }
}

/// What to integrate and how.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub solver: SolverConfig,
    pub trajectories: usize,
    pub tau_split: f64,
    pub kts: KtsSchedule,
}

/// Samples `field` under the spec's gain. The identity gain reproduces the
/// unshaped field bit for bit.
pub fn sample_field<F: VelocityField>(
    field: &F,
    info: FieldInfo,
    spec: &SampleSpec,
) -> Result<(BatchOutcome, BatchSummary)> {
    let shaped = Shaped::new(field, spec.kts)?;
    let batch = sample_batch(&shaped, spec.trajectories, &spec.solver, spec.tau_split)?;
    if batch.trajectories.is_empty() {
        return Err(Error::Check(format!(
            "all {} trajectories diverged (first: {})",
            spec.trajectories,
            batch.failures[0].1
        )));
    }
    let summary = BatchSummary::new(
        info,
        spec.solver,
        spec.kts,
        spec.tau_split,
        spec.trajectories,
        &batch,
    );
    Ok((batch, summary))
}

pub const TRACES_FILE: &str = "traces.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes `traces.csv` and `summary.json` into `dir`.
pub fn write_sample(dir: &Path, batch: &BatchOutcome, summary: &BatchSummary) -> Result<()> {
    formats::write_traces(&dir.join(TRACES_FILE), &batch.trajectories)?;
    formats::write_json(&dir.join(SUMMARY_FILE), summary)
}

fn heldout_flat(kind: DatasetKind, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n < MIN_POINTS {
        return Err(Error::Check(format!(
            "W2 needs at least {MIN_POINTS} samples, got {n}"
        )));
    }
    Ok(synthdata::generate(kind, n, seed)?.flat())
}

/// W2 between the first `min(n, max_points)` generated points and an
/// equally large fresh sample of the data distribution.
pub fn w2_to_heldout(
    generated: &[f64],
    kind: DatasetKind,
    max_points: usize,
    seed: u64,
) -> Result<f64> {
    let n = (generated.len() / 2).min(max_points);
    let held = heldout_flat(kind, n, seed)?;
    Ok(exact_w2(&generated[..2 * n], &held, 2)?)
}

pub fn diagnose(
    summary: &BatchSummary,
    data: &LabeledDataset,
    cfg: &DiagnosticsConfig,
    heldout_seed: u64,
) -> Result<DiagnoseReport> {
    let ends = summary.endpoints().map_err(Error::Check)?;
    let stats = kpe_density_stats(&summary.kpe(), &ends, data, cfg.density())?;
    let flat = summary.flat_endpoints();
    let mem = f_mem(&flat, &data.flat(), 2, cfg.tau_gap, cfg.k_mem)?;
    let w2 = w2_to_heldout(&flat, data.kind, cfg.w2_points, heldout_seed)?;
    Ok(DiagnoseReport {
        rho_knn: stats.rho_knn,
        rho_kde: stats.rho_kde,
        cliffs_delta: stats.cliffs_delta,
        mwu_u: stats.mwu.u,
        mwu_p: stats.mwu.p,
        f_mem: mem.f_mem,
        w2,
        n: stats.n,
        config: DiagnoseSettings {
            knn_k: cfg.knn_k,
            bandwidth: cfg.bandwidth,
            tau_gap: cfg.tau_gap,
            k_mem: cfg.k_mem,
            w2_points: cfg.w2_points,
            heldout_seed,
            mwu_exact: stats.mwu.exact,
            n_sparse: stats.n_sparse,
            n_dense: stats.n_dense,
            mean_kpe_sparse: stats.mean_kpe_sparse,
            mean_kpe_dense: stats.mean_kpe_dense,
        },
    })
}

/// One cell of a KTS sweep. Metrics are empty when the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub alpha0: f64,
    pub beta0: f64,
    pub w2: Option<f64>,
    pub f_mem: Option<f64>,
    pub kpe_early: Option<f64>,
    pub kpe_late: Option<f64>,
    pub kpe: Option<f64>,
    pub n: usize,
    pub failures: usize,
    pub error: Option<String>,
}

impl SweepRow {
    fn failed(label: String, kts: &KtsSchedule, e: Error) -> Self {
        Self {
            label,
            alpha0: kts.alpha0,
            beta0: kts.beta0,
            w2: None,
            f_mem: None,
            kpe_early: None,
            kpe_late: None,
            kpe: None,
            n: 0,
            failures: 0,
            error: Some(e.to_string()),
        }
    }
}

/// Inputs shared by every sweep cell.
#[derive(Debug, Clone, Copy)]
pub struct SweepContext<'a> {
    pub data: &'a LabeledDataset,
    pub spec: SampleSpec,
    pub diagnostics: &'a DiagnosticsConfig,
    pub heldout_seed: u64,
}

fn sweep_cell<F: VelocityField>(
    field: &F,
    info: &FieldInfo,
    ctx: &SweepContext<'_>,
    kts: KtsSchedule,
    label: String,
) -> SweepRow {
    let run = || -> Result<SweepRow> {
        let spec = SampleSpec { kts, ..ctx.spec };
        let (_, s) = sample_field(field, info.clone(), &spec)?;
        let flat = s.flat_endpoints();
        let mem = f_mem(
            &flat,
            &ctx.data.flat(),
            2,
            ctx.diagnostics.tau_gap,
            ctx.diagnostics.k_mem,
        )?;
        let w2 = w2_to_heldout(&flat, ctx.data.kind, ctx.diagnostics.w2_points, ctx.heldout_seed)?;
        Ok(SweepRow {
            label: label.clone(),
            alpha0: kts.alpha0,
            beta0: kts.beta0,
            w2: Some(w2),
            f_mem: Some(mem.f_mem),
            kpe_early: Some(s.mean(|t| t.kpe_early)),
            kpe_late: Some(s.mean(|t| t.kpe_late)),
            kpe: Some(s.mean(|t| t.kpe)),
            n: s.trajectories.len(),
            failures: s.failures.len(),
            error: None,
        })
    };
    run().unwrap_or_else(|e| SweepRow::failed(label, &kts, e))
}

/// A baseline row (no gain) followed by one row per `(alpha0, beta0)`,
/// alpha0-major. Failing cells are recorded and the sweep continues.
pub fn kts_sweep<F: VelocityField>(
    field: &F,
    info: FieldInfo,
    ctx: &SweepContext<'_>,
    alpha0: &[f64],
    beta0: &[f64],
) -> Result<Vec<SweepRow>> {
    let base = KtsSchedule {
        alpha0: 0.0,
        beta0: 0.0,
        ..ctx.spec.kts
    };
    base.validate()?;
    let mut grid = Vec::with_capacity(alpha0.len() * beta0.len());
    for &a in alpha0 {
        for &b in beta0 {
            let kts = KtsSchedule {
                alpha0: a,
                beta0: b,
                ..base
            };
            kts.validate()?;
            grid.push(kts);
        }
    }
    let mut rows = vec![sweep_cell(field, &info, ctx, base, "baseline".into())];
    for kts in grid {
        rows.push(sweep_cell(field, &info, ctx, kts, "kts".into()));
    }
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    formats::create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<SweepRow>, _>>()
        .map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use kinflow_core::sampler::SolverMethod;

    fn small_spec() -> SampleSpec {
        SampleSpec {
            solver: SolverConfig {
                method: SolverMethod::Euler,
                steps: 20,
                delta_cut: 1e-3,
                seed: 1,
            },
            trajectories: 40,
            tau_split: 0.6,
            kts: KtsSchedule::default(),
        }
    }

    fn diag() -> DiagnosticsConfig {
        crate::config::ExperimentConfig::ci().diagnostics
    }

    #[test]
    fn identity_gain_matches_unshaped_sampling() {
        let data = synthdata::generate(DatasetKind::DenseSparse, 60, 2).unwrap();
        let f = EfmField::from_points(&data.points, Some(10)).unwrap();
        let spec = small_spec();
        let (shaped, _) = sample_field(&f, efm_info(&f), &spec).unwrap();
        let plain = sample_batch(&f, 40, &spec.solver, 0.6).unwrap();
        assert_eq!(shaped.trajectories, plain.trajectories);
    }

    #[test]
    fn efm_diagnose_report() {
        let data = synthdata::generate(DatasetKind::DenseSparse, 60, 2).unwrap();
        let f = EfmField::from_points(&data.points, None).unwrap();
        let mut spec = small_spec();
        spec.solver.steps = 200;
        let (_, s) = sample_field(&f, efm_info(&f), &spec).unwrap();
        let r = diagnose(&s, &data, &diag(), heldout_seed(2)).unwrap();
        assert_eq!(r.n, 40);
        assert!(r.f_mem >= 0.85, "{r:?}");
        assert!(r.rho_kde < 0.0 && r.config.mean_kpe_sparse > r.config.mean_kpe_dense);
        assert!(r.w2 > 0.0 && r.w2.is_finite());
        assert!((0.0..=1.0).contains(&r.mwu_p));
    }

    #[test]
    fn w2_is_zero_against_own_heldout() {
        let seed = heldout_seed(5);
        let held = synthdata::generate(DatasetKind::Sandwich, 30, seed).unwrap().flat();
        assert_eq!(w2_to_heldout(&held, DatasetKind::Sandwich, 100, seed).unwrap(), 0.0);
        assert!(w2_to_heldout(&held[..10], DatasetKind::Sandwich, 100, seed).is_err());
    }

    #[test]
    fn sweep_has_baseline_plus_grid_rows() {
        let data = synthdata::generate(DatasetKind::DenseSparse, 60, 2).unwrap();
        let f = EfmField::from_points(&data.points, Some(10)).unwrap();
        let d = diag();
        let ctx = SweepContext {
            data: &data,
            spec: small_spec(),
            diagnostics: &d,
            heldout_seed: heldout_seed(2),
        };
        let rows = kts_sweep(&f, efm_info(&f), &ctx, &[0.0, 0.02], &[0.0, 0.02]).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].label, "baseline");
        let mut zero = rows[1].clone();
        zero.label = "baseline".into();
        assert_eq!(zero, rows[0]);
        assert!(rows.iter().all(|r| r.error.is_none()));
        assert!(rows[3].kpe_early.unwrap() > rows[1].kpe_early.unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sweep.csv");
        write_sweep(&p, &rows).unwrap();
        assert_eq!(read_sweep(&p).unwrap(), rows);
    }

    #[test]
    fn failing_cells_do_not_stop_the_sweep() {
        let data = synthdata::generate(DatasetKind::DenseSparse, 60, 2).unwrap();
        let f = kinflow_core::field::FnField::new(2, |x: &[f64], _t, o: &mut [f64]| {
            o[0] = -x[0];
            o[1] = -x[1];
        });
        let d = DiagnosticsConfig { w2_points: 5, ..diag() };
        let ctx = SweepContext {
            data: &data,
            spec: small_spec(),
            diagnostics: &d,
            heldout_seed: 0,
        };
        let info = FieldInfo::Efm { atoms: 0, neighbors: None };
        let rows = kts_sweep(&f, info, &ctx, &[0.0], &[0.0, 0.01]).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.error.as_deref().is_some_and(|e| e.contains("W2"))));
    }
}
