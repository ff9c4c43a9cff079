//! The declarative experiment config and its two built-in profiles.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use kinflow_core::diagnostics::{DensityParams, DEFAULT_K_MEM, DEFAULT_TAU_GAP};
use kinflow_core::mlp::TrainConfig;
use kinflow_core::sampler::{KtsSchedule, SolverConfig, SolverMethod, DEFAULT_TAU_SPLIT, EFM_DELTA_CUT};
use kinflow_core::synthdata::DatasetKind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Ci,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "ci" => Ok(Profile::Ci),
            _ => Err(Error::Config(format!("unknown profile {s:?} (expected paper or ci)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n: usize,
    pub seed: u64,
}

/// Solver settings shared by every sampled field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub method: SolverMethod,
    pub steps: usize,
    /// Trajectories per batch.
    pub trajectories: usize,
    pub seed: u64,
    pub tau_split: f64,
}

impl SamplingConfig {
    pub fn solver(&self, delta_cut: f64) -> SolverConfig {
        SolverConfig {
            method: self.method,
            steps: self.steps,
            delta_cut,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfmConfig {
    /// Nearest atoms kept per evaluation, capped at the dataset size; `None`
    /// uses all of them.
    pub neighbors: Option<usize>,
    pub delta_cut: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub knn_k: usize,
    pub bandwidth: f64,
    pub tau_gap: f64,
    pub k_mem: usize,
    /// Largest sample used for W2 against the held-out set.
    pub w2_points: usize,
}

impl DiagnosticsConfig {
    pub fn density(&self) -> DensityParams {
        DensityParams {
            k: self.knn_k,
            bandwidth: self.bandwidth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    pub dims: Vec<usize>,
    pub atom_counts: Vec<usize>,
    pub eps: Vec<f64>,
    /// Dominant points per (dim, atoms, eps) cell, spread over the deciles.
    pub points_per_cell: usize,
    /// Atoms are drawn as `atom_scale * N(0, I)`.
    pub atom_scale: f64,
    pub lower_bound_paths: usize,
    pub concentration_probes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub alpha0: Vec<f64>,
    pub beta0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub efm: EfmConfig,
    pub kts: KtsSchedule,
    pub diagnostics: DiagnosticsConfig,
    pub theory: TheoryConfig,
    pub sweep: SweepConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// n = 1000, 50k iterations, 500 midpoint trajectories of 100 steps.
    pub fn paper() -> Self {
        Self {
            dataset: DatasetConfig {
                kind: DatasetKind::DenseSparse,
                n: 1000,
                seed: 0,
            },
            train: TrainConfig::default(),
            sampling: SamplingConfig {
                method: SolverMethod::Midpoint,
                steps: 100,
                trajectories: 500,
                seed: 0,
                tau_split: DEFAULT_TAU_SPLIT,
            },
            efm: EfmConfig {
                neighbors: Some(100),
                delta_cut: EFM_DELTA_CUT,
            },
            kts: KtsSchedule {
                alpha0: 0.01,
                beta0: 0.01,
                ..KtsSchedule::default()
            },
            diagnostics: DiagnosticsConfig {
                knn_k: DensityParams::default().k,
                bandwidth: DensityParams::default().bandwidth,
                tau_gap: DEFAULT_TAU_GAP,
                k_mem: DEFAULT_K_MEM,
                w2_points: 500,
            },
            theory: TheoryConfig {
                dims: vec![1, 2, 5],
                atom_counts: vec![1, 5, 50],
                eps: vec![0.05, 0.1, 0.3],
                points_per_cell: 450,
                atom_scale: 3.0,
                lower_bound_paths: 100,
                concentration_probes: 20,
                seed: 0,
            },
            sweep: SweepConfig {
                alpha0: vec![0.0, 0.01, 0.02],
                beta0: vec![0.0, 0.01, 0.02],
            },
            output_dir: PathBuf::from("runs/paper"),
        }
    }

    /// n = 500, 5k iterations, 200 Euler trajectories of 50 steps.
    pub fn ci() -> Self {
        let mut c = Self::paper();
        c.dataset.n = 500;
        c.train.iterations = 5000;
        c.sampling.method = SolverMethod::Euler;
        c.sampling.steps = 50;
        c.sampling.trajectories = 200;
        c.diagnostics.w2_points = 200;
        c.output_dir = PathBuf::from("runs/ci");
        c
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Ci => Self::ci(),
        }
    }

    /// Sets every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.sampling.seed = seed;
        self.theory.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dataset.n < kinflow_core::synthdata::MIN_POINTS {
            return bad(format!(
                "dataset.n must be at least {}",
                kinflow_core::synthdata::MIN_POINTS
            ));
        }
        self.train.validate().map_err(cfg_err)?;
        self.sampling.solver(0.0).validate().map_err(cfg_err)?;
        self.sampling.solver(self.efm.delta_cut).validate().map_err(cfg_err)?;
        if self.sampling.trajectories == 0 {
            return bad("sampling.trajectories must be at least 1".into());
        }
        if !(self.sampling.tau_split > 0.0 && self.sampling.tau_split < 1.0) {
            return bad("sampling.tau_split must lie in (0, 1)".into());
        }
        if self.efm.neighbors == Some(0) {
            return bad("efm.neighbors must be at least 1".into());
        }
        self.kts.validate().map_err(cfg_err)?;
        let d = &self.diagnostics;
        if d.knn_k == 0 || d.k_mem < 2 || d.w2_points == 0 {
            return bad("diagnostics.knn_k >= 1, k_mem >= 2 and w2_points >= 1 required".into());
        }
        if !(d.bandwidth > 0.0 && d.bandwidth.is_finite()) {
            return bad("diagnostics.bandwidth must be positive".into());
        }
        if !(d.tau_gap > 0.0 && d.tau_gap < 1.0) {
            return bad("diagnostics.tau_gap must lie in (0, 1)".into());
        }
        if d.w2_points > kinflow_core::diagnostics::MAX_W2_POINTS {
            return bad(format!(
                "diagnostics.w2_points must be at most {}",
                kinflow_core::diagnostics::MAX_W2_POINTS
            ));
        }
        let th = &self.theory;
        if th.dims.contains(&0) || th.atom_counts.contains(&0) {
            return bad("theory dims and atom counts must be positive".into());
        }
        if th.eps.iter().any(|e| !(*e > 0.0 && *e < 0.5)) {
            return bad("theory.eps values must lie in (0, 0.5)".into());
        }
        if !(th.atom_scale > 0.0 && th.atom_scale.is_finite()) {
            return bad("theory.atom_scale must be positive".into());
        }
        for (a, b) in self.sweep.alpha0.iter().flat_map(|a| self.sweep.beta0.iter().map(move |b| (a, b))) {
            KtsSchedule::new(*a, *b).map_err(cfg_err)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        formats::write_json(path, self)
    }
}

fn cfg_err(e: kinflow_core::Error) -> Error {
    Error::Config(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid() {
        ExperimentConfig::paper().validate().unwrap();
        ExperimentConfig::ci().validate().unwrap();
        let ci = ExperimentConfig::ci();
        assert_eq!((ci.dataset.n, ci.train.iterations, ci.sampling.trajectories, ci.sampling.steps), (500, 5000, 200, 50));
        let p = ExperimentConfig::paper();
        assert_eq!((p.dataset.n, p.train.iterations, p.sampling.trajectories, p.sampling.steps), (1000, 50_000, 500, 100));
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let mut c = ExperimentConfig::ci().with_seed(17);
        c.kts.alpha0 = 0.1 + 0.2;
        c.diagnostics.tau_gap = 1.0 / 3.0;
        c.efm.neighbors = None;
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), text);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::ci()).unwrap();
        v["dataset"]["colour"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
        let mut c = ExperimentConfig::ci();
        c.efm.neighbors = Some(0);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::ci();
        c.sweep.alpha0.push(-1.0);
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }
}
