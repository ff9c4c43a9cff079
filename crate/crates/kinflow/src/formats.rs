//! On-disk formats.
//!
//! | artifact      | format                                              |
//! |---------------|-----------------------------------------------------|
//! | dataset       | CSV `x,y,stratum`                                   |
//! | checkpoint    | JSON, one `{name, shape, data}` block per tensor    |
//! | loss curve    | CSV `iter,loss`                                     |
//! | traces        | CSV `traj_id,t,x,y,power,cum_kpe`                   |
//! | batch summary | JSON [`BatchSummary`]                               |
//! | reports       | JSON ([`DiagnoseReport`], theory report)            |
//!
//! Floats are written in shortest round-trip form, so every reader gets back
//! the exact bits that were written.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use kinflow_core::mlp::MlpParams;
use kinflow_core::sampler::{BatchOutcome, KtsSchedule, SolverConfig, Trajectory};
use kinflow_core::synthdata::{DatasetKind, LabeledDataset, Point2, Stratum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
        }
        _ => Ok(()),
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    create_parent(path)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn csv_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::format(path, e))
}

fn finish<W: Write>(path: &Path, w: csv::Writer<W>) -> Result<()> {
    let mut inner = w.into_inner().map_err(|e| Error::format(path, e))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct DataRow {
    x: f64,
    y: f64,
    stratum: Stratum,
}

pub fn write_dataset(path: &Path, data: &LabeledDataset) -> Result<()> {
    let mut w = csv_writer(path)?;
    for (p, s) in data.points.iter().zip(&data.strata) {
        w.serialize(DataRow {
            x: p.x,
            y: p.y,
            stratum: *s,
        })
        .map_err(|e| Error::format(path, e))?;
    }
    finish(path, w)
}

/// The dataset kind is recovered from the labels; the seed is not stored
/// and reads back as 0.
pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    let rows: Vec<DataRow> = csv_rows(path)?;
    let first = rows
        .first()
        .ok_or_else(|| Error::format(path, "dataset has no rows"))?;
    let kind = DatasetKind::ALL
        .into_iter()
        .find(|k| k.allows(first.stratum))
        .ok_or_else(|| Error::format(path, "stratum belongs to no dataset"))?;
    let (points, strata) = rows
        .iter()
        .map(|r| (Point2::new(r.x, r.y), r.stratum))
        .unzip();
    LabeledDataset::from_parts(kind, 0, points, strata).map_err(|e| Error::format(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major payload.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub widths: Vec<usize>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    /// `layer{k}.weight` is `fan_in x fan_out`, `layer{k}.bias` is `fan_out`.
    pub fn from_params(p: &MlpParams) -> Self {
        let dims = p.dims();
        let mut tensors = Vec::with_capacity(2 * p.layer_count());
        for l in 0..p.layer_count() {
            let (w, b) = p.layer(l);
            tensors.push(Tensor {
                name: format!("layer{l}.weight"),
                shape: vec![dims[l], dims[l + 1]],
                data: w.to_vec(),
            });
            tensors.push(Tensor {
                name: format!("layer{l}.bias"),
                shape: vec![dims[l + 1]],
                data: b.to_vec(),
            });
        }
        Self {
            widths: dims.to_vec(),
            tensors,
        }
    }

    pub fn to_params(&self) -> std::result::Result<MlpParams, String> {
        let layers = self.widths.len().saturating_sub(1);
        if self.tensors.len() != 2 * layers {
            return Err(format!(
                "{} tensors for {layers} layers",
                self.tensors.len()
            ));
        }
        let mut flat = Vec::new();
        for (l, pair) in self.tensors.chunks(2).enumerate() {
            let (fi, fo) = (self.widths[l], self.widths[l + 1]);
            for (t, name, shape) in [
                (&pair[0], format!("layer{l}.weight"), vec![fi, fo]),
                (&pair[1], format!("layer{l}.bias"), vec![fo]),
            ] {
                if t.name != name || t.shape != shape {
                    return Err(format!(
                        "expected {name} {shape:?}, found {} {:?}",
                        t.name, t.shape
                    ));
                }
                if t.data.len() != shape.iter().product::<usize>() {
                    return Err(format!("{name}: payload length {}", t.data.len()));
                }
                flat.extend_from_slice(&t.data);
            }
        }
        MlpParams::from_flat(&self.widths, flat).map_err(|e| e.to_string())
    }
}

pub fn write_checkpoint(path: &Path, p: &MlpParams) -> Result<()> {
    write_json(path, &Checkpoint::from_params(p))
}

pub fn read_checkpoint(path: &Path) -> Result<MlpParams> {
    let c: Checkpoint = read_json(path)?;
    c.to_params().map_err(|e| Error::format(path, e))
}

#[derive(Serialize, Deserialize)]
struct LossRow {
    iter: usize,
    loss: f64,
}

pub fn write_loss_curve(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for (iter, &loss) in losses.iter().enumerate() {
        w.serialize(LossRow { iter, loss })
            .map_err(|e| Error::format(path, e))?;
    }
    finish(path, w)
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<f64>> {
    let rows: Vec<LossRow> = csv_rows(path)?;
    if rows.iter().enumerate().any(|(i, r)| r.iter != i) {
        return Err(Error::format(path, "iterations are not 0, 1, 2, ..."));
    }
    Ok(rows.into_iter().map(|r| r.loss).collect())
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    traj_id: usize,
    t: f64,
    x: f64,
    y: f64,
    /// Power of the step leaving this grid time; empty on the last row.
    power: Option<f64>,
    cum_kpe: f64,
}

/// One trajectory's energy trace, as needed for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub index: usize,
    /// Grid times `t_0 .. t_N`.
    pub times: Vec<f64>,
    /// `(N + 1) x 2` states.
    pub states: Vec<f64>,
    /// Evaluation time of each step.
    pub eval_times: Vec<f64>,
    pub power: Vec<f64>,
    pub cum_kpe: Vec<f64>,
}

impl Trace {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        Self {
            index: t.meta.index,
            times: t.times.clone(),
            states: t.states.clone(),
            eval_times: t.eval_times.clone(),
            power: t.power.clone(),
            cum_kpe: t.cum_kpe.clone(),
        }
    }

    pub fn endpoint(&self) -> Point2 {
        let n = self.states.len();
        Point2::new(self.states[n - 2], self.states[n - 1])
    }
}

pub fn write_traces(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    if let Some(t) = trajectories.iter().find(|t| t.dim != 2) {
        return Err(Error::format(path, format!("trace CSV holds 2D states, got dim {}", t.dim)));
    }
    let mut w = csv_writer(path)?;
    for tr in trajectories {
        for (j, &t) in tr.times.iter().enumerate() {
            let s = tr.state(j);
            w.serialize(TraceRow {
                traj_id: tr.meta.index,
                t,
                x: s[0],
                y: s[1],
                power: tr.power.get(j).copied(),
                cum_kpe: tr.cum_kpe[j],
            })
            .map_err(|e| Error::format(path, e))?;
        }
    }
    finish(path, w)
}

/// Reads traces written by [`write_traces`]; evaluation times come from
/// the solver that produced them.
pub fn read_traces(path: &Path, solver: &SolverConfig) -> Result<Vec<Trace>> {
    let rows: Vec<TraceRow> = csv_rows(path)?;
    let mut out: Vec<Trace> = Vec::new();
    for r in rows {
        let fresh = out.last().is_none_or(|t| t.index != r.traj_id || t.power.len() < t.times.len());
        if fresh {
            out.push(Trace {
                index: r.traj_id,
                times: vec![],
                states: vec![],
                eval_times: vec![],
                power: vec![],
                cum_kpe: vec![],
            });
        }
        let t = out.last_mut().expect("pushed above");
        t.times.push(r.t);
        t.states.extend([r.x, r.y]);
        t.cum_kpe.push(r.cum_kpe);
        if let Some(p) = r.power {
            t.power.push(p);
        }
    }
    for t in &mut out {
        if t.times.len() != solver.steps + 1 || t.power.len() != solver.steps {
            return Err(Error::format(
                path,
                format!("trajectory {} does not have {} steps", t.index, solver.steps),
            ));
        }
        t.eval_times = (0..solver.steps).map(|j| solver.eval_time(j)).collect();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FieldInfo {
    Model { widths: Vec<usize>, params: usize },
    Efm { atoms: usize, neighbors: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub index: usize,
    pub kpe: f64,
    pub kpe_early: f64,
    pub kpe_late: f64,
    pub peak_time: f64,
    pub peak_power: f64,
    pub start: Vec<f64>,
    pub endpoint: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub index: usize,
    pub error: String,
}

/// Per-trajectory energies of one sampled batch, with its metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub field: FieldInfo,
    pub solver: SolverConfig,
    pub kts: KtsSchedule,
    pub tau_split: f64,
    pub requested: usize,
    pub trajectories: Vec<TrajectorySummary>,
    pub failures: Vec<FailureRecord>,
}

impl BatchSummary {
    pub fn new(
        field: FieldInfo,
        solver: SolverConfig,
        kts: KtsSchedule,
        tau_split: f64,
        requested: usize,
        batch: &BatchOutcome,
    ) -> Self {
        let trajectories = batch
            .trajectories
            .iter()
            .map(|t| {
                let (peak_time, peak_power) = t.peak_power();
                TrajectorySummary {
                    index: t.meta.index,
                    kpe: t.kpe,
                    kpe_early: t.kpe_early,
                    kpe_late: t.kpe_late,
                    peak_time,
                    peak_power,
                    start: t.start().to_vec(),
                    endpoint: t.endpoint().to_vec(),
                }
            })
            .collect();
        let failures = batch
            .failures
            .iter()
            .map(|(index, e)| FailureRecord {
                index: *index,
                error: e.to_string(),
            })
            .collect();
        Self {
            field,
            solver,
            kts,
            tau_split,
            requested,
            trajectories,
            failures,
        }
    }

    pub fn kpe(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.kpe).collect()
    }

    /// Endpoints as 2D points; errors on other dimensions.
    pub fn endpoints(&self) -> std::result::Result<Vec<Point2>, String> {
        self.trajectories
            .iter()
            .map(|t| match t.endpoint[..] {
                [x, y] => Ok(Point2::new(x, y)),
                _ => Err(format!("trajectory {} is not 2D", t.index)),
            })
            .collect()
    }

    pub fn flat_endpoints(&self) -> Vec<f64> {
        self.trajectories.iter().flat_map(|t| t.endpoint.iter().copied()).collect()
    }

    pub fn mean(&self, f: impl Fn(&TrajectorySummary) -> f64) -> f64 {
        let n = self.trajectories.len();
        if n == 0 {
            return f64::NAN;
        }
        self.trajectories.iter().map(f).sum::<f64>() / n as f64
    }
}

/// KPE/density statistics, memorization and sample quality of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub rho_knn: f64,
    pub rho_kde: f64,
    pub cliffs_delta: f64,
    pub mwu_u: f64,
    pub mwu_p: f64,
    pub f_mem: f64,
    pub w2: f64,
    pub n: usize,
    pub config: DiagnoseSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseSettings {
    pub knn_k: usize,
    pub bandwidth: f64,
    pub tau_gap: f64,
    pub k_mem: usize,
    pub w2_points: usize,
    pub heldout_seed: u64,
    pub mwu_exact: bool,
    pub n_sparse: usize,
    pub n_dense: usize,
    pub mean_kpe_sparse: f64,
    pub mean_kpe_dense: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use kinflow_core::sampler::{sample_batch, SolverMethod};
    use kinflow_core::synthdata::generate;
    use tempfile::tempdir;

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        for kind in DatasetKind::ALL {
            let data = generate(kind, 97, 4).unwrap();
            let p = dir.path().join(format!("{kind}.csv"));
            write_dataset(&p, &data).unwrap();
            let back = read_dataset(&p).unwrap();
            assert_eq!(back.kind, kind);
            assert_eq!(back.points, data.points);
            assert_eq!(back.strata, data.strata);
        }
        let text = std::fs::read_to_string(dir.path().join("sandwich.csv")).unwrap();
        assert!(text.starts_with("x,y,stratum\n"));
    }

    #[test]
    fn dataset_rejects_mixed_labels() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "x,y,stratum\n0,0,dense_core\n1,1,dense_band\n").unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Format { .. })));
        std::fs::write(&p, "x,y,stratum\n").unwrap();
        assert!(read_dataset(&p).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = MlpParams::init(&[18, 7, 3, 2], 9).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.json");
        write_checkpoint(&path, &p).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), p);
        let c: Checkpoint = read_json(&path).unwrap();
        assert_eq!(c.tensors[2].name, "layer1.weight");
        assert_eq!(c.tensors[2].shape, vec![7, 3]);
        assert_eq!(c.tensors[2].data[3], p.layer(1).0[3]);
    }

    #[test]
    fn checkpoint_shape_mismatch_is_reported() {
        let mut c = Checkpoint::from_params(&MlpParams::init(&[18, 4, 2], 1).unwrap());
        c.tensors[1].shape = vec![5];
        assert!(c.to_params().unwrap_err().contains("layer0.bias"));
    }

    #[test]
    fn loss_curve_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let l = vec![1.5, 0.1 + 0.2, 1e-300];
        write_loss_curve(&p, &l).unwrap();
        assert_eq!(read_loss_curve(&p).unwrap(), l);
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("iter,loss\n0,1.5\n"));
    }

    #[test]
    fn traces_round_trip() {
        let f = kinflow_core::field::FnField::new(2, |x: &[f64], t, o: &mut [f64]| {
            o[0] = -x[1] * t;
            o[1] = x[0];
        });
        for method in [SolverMethod::Euler, SolverMethod::Midpoint] {
            let cfg = SolverConfig {
                method,
                steps: 7,
                delta_cut: 1e-3,
                seed: 3,
            };
            let b = sample_batch(&f, 4, &cfg, 0.6).unwrap();
            let dir = tempdir().unwrap();
            let p = dir.path().join("traces.csv");
            write_traces(&p, &b.trajectories).unwrap();
            let back = read_traces(&p, &cfg).unwrap();
            assert_eq!(back.len(), 4);
            for (t, tr) in back.iter().zip(&b.trajectories) {
                assert_eq!(*t, Trace::from_trajectory(tr));
            }
            let text = std::fs::read_to_string(&p).unwrap();
            assert!(text.starts_with("traj_id,t,x,y,power,cum_kpe\n"));
            assert_eq!(text.lines().count(), 1 + 4 * 8);
        }
    }

    #[test]
    fn summary_keeps_failures() {
        let f = kinflow_core::field::FnField::new(2, |x: &[f64], _t, o: &mut [f64]| {
            o[0] = if x[0] > 0.0 { f64::NAN } else { 1.0 };
            o[1] = 0.0;
        });
        let cfg = SolverConfig::default();
        let b = sample_batch(&f, 10, &cfg, 0.6).unwrap();
        let s = BatchSummary::new(
            FieldInfo::Efm { atoms: 1, neighbors: None },
            cfg,
            KtsSchedule::default(),
            0.6,
            10,
            &b,
        );
        assert_eq!(s.trajectories.len() + s.failures.len(), 10);
        assert!(!s.failures.is_empty());
        let dir = tempdir().unwrap();
        let p = dir.path().join("s.json");
        write_json(&p, &s).unwrap();
        assert_eq!(read_json::<BatchSummary>(&p).unwrap(), s);
    }
}
