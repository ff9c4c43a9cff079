//! The end-to-end experiment: generate, train, sample, diagnose, verify,
//! sweep and plot, with stage caching keyed by config-subtree hashes.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! config.json
//! data/train.csv
//! model/checkpoint.json   model/loss.csv
//! samples/{baseline,efm,kts}/{traces.csv,summary.json}
//! reports/diagnose_{baseline,efm,kts}.json  reports/theory.json  reports/kts_sweep.csv
//! plots/energy.svg  plots/kpe_strata.svg
//! stages/<stage>.json     manifest.json
//! ```

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kinflow_core::efm::EfmField;
use kinflow_core::sampler::KtsSchedule;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result, Stage};
use crate::formats::{self, BatchSummary, Trace};
use crate::plot::{self, Series};
use crate::stages::{self, SampleSpec, SweepContext, SUMMARY_FILE, TRACES_FILE};
use crate::verify;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const LOCK_FILE: &str = ".kinflow.lock";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Sample sets produced by the sample stage.
pub const SAMPLE_SETS: [&str; 3] = ["baseline", "efm", "kts"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn value_hash<T: Serialize>(v: &T) -> String {
    sha256_hex(serde_json::to_string(v).expect("config values serialize").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: String,
    pub key: String,
    pub outputs: Vec<OutputFile>,
    pub wall_clock_secs: f64,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub stages: Vec<StageEntry>,
    /// Hash of the version, config hash, stage keys and output digests;
    /// timings and cache flags are left out.
    pub hash: String,
}

impl RunManifest {
    fn digest(version: &str, config_hash: &str, stages: &[StageEntry]) -> String {
        let body: Vec<_> = stages
            .iter()
            .map(|s| json!({"stage": s.stage, "key": s.key, "outputs": s.outputs}))
            .collect();
        value_hash(&json!({"tool_version": version, "config_hash": config_hash, "stages": body}))
    }

    pub fn stage(&self, s: Stage) -> Option<&StageEntry> {
        self.stages.iter().find(|e| e.stage == s.as_str())
    }

    /// Every listed output exists under `output_dir` with its recorded digest.
    pub fn verify_outputs(&self) -> Result<()> {
        for s in &self.stages {
            for o in &s.outputs {
                let p = self.output_dir.join(&o.path);
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                if sha256_hex(&bytes) != o.sha256 {
                    return Err(Error::format(&p, "content differs from the manifest"));
                }
            }
        }
        Ok(())
    }
}

/// Holds the output directory's lock file until dropped.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked {
                dir: dir.to_path_buf(),
                lock: path,
            }),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    key: String,
    outputs: Vec<OutputFile>,
    wall_clock_secs: f64,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    keys: Vec<(Stage, String)>,
}

impl Run<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn key_of(&self, s: Stage) -> &str {
        &self.keys.iter().find(|(k, _)| *k == s).expect("upstream stage ran first").1
    }

    /// Config subtree and upstream stages each stage depends on.
    fn inputs(&self, s: Stage) -> serde_json::Value {
        let c = self.cfg;
        match s {
            Stage::GenData => json!({"dataset": c.dataset}),
            Stage::Train => json!({"train": c.train, "up": [self.key_of(Stage::GenData)]}),
            Stage::Sample => json!({
                "sampling": c.sampling, "efm": c.efm, "kts": c.kts,
                "up": [self.key_of(Stage::GenData), self.key_of(Stage::Train)],
            }),
            Stage::Diagnose => json!({
                "diagnostics": c.diagnostics, "seed": c.dataset.seed,
                "up": [self.key_of(Stage::GenData), self.key_of(Stage::Sample)],
            }),
            Stage::VerifyTheory => json!({"theory": c.theory, "up": [self.key_of(Stage::GenData)]}),
            Stage::KtsSweep => json!({
                "sweep": c.sweep, "sampling": c.sampling, "kts": c.kts,
                "diagnostics": c.diagnostics, "seed": c.dataset.seed,
                "up": [self.key_of(Stage::GenData), self.key_of(Stage::Train)],
            }),
            Stage::Plot => json!({"up": [self.key_of(Stage::GenData), self.key_of(Stage::Sample)]}),
        }
    }

    fn record_path(&self, s: Stage) -> PathBuf {
        self.dir.join("stages").join(format!("{s}.json"))
    }

    fn cached(&self, s: Stage, key: &str) -> Option<StageRecord> {
        let rec: StageRecord = formats::read_json(&self.record_path(s)).ok()?;
        let intact = rec.key == key
            && rec.outputs.iter().all(|o| {
                std::fs::read(self.dir.join(&o.path)).is_ok_and(|b| sha256_hex(&b) == o.sha256)
            });
        intact.then_some(rec)
    }

    fn execute(&mut self, s: Stage) -> Result<StageEntry> {
        let key = value_hash(&json!({"stage": s.as_str(), "version": TOOL_VERSION, "inputs": self.inputs(s)}));
        self.keys.push((s, key.clone()));
        if let Some(rec) = self.cached(s, &key) {
            return Ok(StageEntry {
                stage: s.to_string(),
                key,
                outputs: rec.outputs,
                wall_clock_secs: rec.wall_clock_secs,
                cached: true,
            });
        }
        let _ = std::fs::remove_file(self.record_path(s));
        let start = Instant::now();
        let files = self.run_stage(s).map_err(|e| Error::Stage {
            stage: s,
            source: Box::new(e),
        })?;
        let wall_clock_secs = start.elapsed().as_secs_f64();
        let mut outputs = Vec::with_capacity(files.len());
        for rel in files {
            let p = self.dir.join(&rel);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            outputs.push(OutputFile {
                path: PathBuf::from(rel),
                sha256: sha256_hex(&bytes),
            });
        }
        let rec = StageRecord {
            key: key.clone(),
            outputs: outputs.clone(),
            wall_clock_secs,
        };
        formats::write_json(&self.record_path(s), &rec)?;
        Ok(StageEntry {
            stage: s.to_string(),
            key,
            outputs,
            wall_clock_secs,
            cached: false,
        })
    }

    /// Runs one stage, returning the files it wrote (relative paths).
    fn run_stage(&self, s: Stage) -> Result<Vec<String>> {
        let c = self.cfg;
        let data_rel = "data/train.csv";
        let ckpt_rel = "model/checkpoint.json";
        match s {
            Stage::GenData => {
                formats::write_dataset(&self.path(data_rel), &stages::gen_data(&c.dataset)?)?;
                Ok(vec![data_rel.into()])
            }
            Stage::Train => {
                let data = formats::read_dataset(&self.path(data_rel))?;
                let out = stages::train_model(&data, &c.train)?;
                formats::write_checkpoint(&self.path(ckpt_rel), &out.params)?;
                formats::write_loss_curve(&self.path("model/loss.csv"), &out.loss_curve)?;
                Ok(vec![ckpt_rel.into(), "model/loss.csv".into()])
            }
            Stage::Sample => {
                let data = formats::read_dataset(&self.path(data_rel))?;
                let model = formats::read_checkpoint(&self.path(ckpt_rel))?;
                let efm = EfmField::from_points(&data.points, c.efm.neighbors.map(|k| k.min(data.n())))?;
                let base = SampleSpec {
                    solver: c.sampling.solver(0.0),
                    trajectories: c.sampling.trajectories,
                    tau_split: c.sampling.tau_split,
                    kts: KtsSchedule { alpha0: 0.0, beta0: 0.0, ..c.kts },
                };
                let efm_spec = SampleSpec {
                    solver: c.sampling.solver(c.efm.delta_cut),
                    ..base
                };
                let mut files = Vec::new();
                for set in SAMPLE_SETS {
                    let (batch, summary) = match set {
                        "baseline" => stages::sample_field(&model, stages::model_info(&model), &base)?,
                        "efm" => stages::sample_field(&efm, stages::efm_info(&efm), &efm_spec)?,
                        _ => stages::sample_field(
                            &model,
                            stages::model_info(&model),
                            &SampleSpec { kts: c.kts, ..base },
                        )?,
                    };
                    let dir = format!("samples/{set}");
                    stages::write_sample(&self.path(&dir), &batch, &summary)?;
                    files.push(format!("{dir}/{TRACES_FILE}"));
                    files.push(format!("{dir}/{SUMMARY_FILE}"));
                }
                Ok(files)
            }
            Stage::Diagnose => {
                let data = formats::read_dataset(&self.path(data_rel))?;
                let mut files = Vec::new();
                for set in SAMPLE_SETS {
                    let summary: BatchSummary =
                        formats::read_json(&self.path(&format!("samples/{set}/{SUMMARY_FILE}")))?;
                    let r = stages::diagnose(
                        &summary,
                        &data,
                        &c.diagnostics,
                        stages::heldout_seed(c.dataset.seed),
                    )?;
                    let rel = format!("reports/diagnose_{set}.json");
                    formats::write_json(&self.path(&rel), &r)?;
                    files.push(rel);
                }
                Ok(files)
            }
            Stage::VerifyTheory => {
                let data = formats::read_dataset(&self.path(data_rel))?;
                let r = verify::verify_theory(&c.theory, Some(&data.points))?;
                let rel = "reports/theory.json";
                formats::write_json(&self.path(rel), &r)?;
                if !r.passed {
                    return Err(Error::Check(format!("theory suite: {}", r.failures.join("; "))));
                }
                Ok(vec![rel.into()])
            }
            Stage::KtsSweep => {
                let data = formats::read_dataset(&self.path(data_rel))?;
                let model = formats::read_checkpoint(&self.path(ckpt_rel))?;
                let ctx = SweepContext {
                    data: &data,
                    spec: SampleSpec {
                        solver: c.sampling.solver(0.0),
                        trajectories: c.sampling.trajectories,
                        tau_split: c.sampling.tau_split,
                        kts: c.kts,
                    },
                    diagnostics: &c.diagnostics,
                    heldout_seed: stages::heldout_seed(c.dataset.seed),
                };
                let rows = stages::kts_sweep(
                    &model,
                    stages::model_info(&model),
                    &ctx,
                    &c.sweep.alpha0,
                    &c.sweep.beta0,
                )?;
                let rel = "reports/kts_sweep.csv";
                stages::write_sweep(&self.path(rel), &rows)?;
                Ok(vec![rel.into()])
            }
            Stage::Plot => {
                let data = formats::read_dataset(&self.path(data_rel))?;
                let mut sets = Vec::new();
                for set in SAMPLE_SETS {
                    sets.push((set, read_sample_traces(&self.path(&format!("samples/{set}")))?));
                }
                let series: Vec<Series<'_>> = sets
                    .iter()
                    .map(|(label, traces)| Series { label, traces })
                    .collect();
                let title = format!("{} (n = {})", c.dataset.kind, c.dataset.n);
                let energy = plot::energy_svg(&title, &series)?;
                let strata = plot::strata_svg(&title, &series, &data)?;
                write_text(&self.path("plots/energy.svg"), &energy)?;
                write_text(&self.path("plots/kpe_strata.svg"), &strata)?;
                Ok(vec!["plots/energy.svg".into(), "plots/kpe_strata.svg".into()])
            }
        }
    }
}

/// Traces of a sample directory, using its summary for the time grid.
pub fn read_sample_traces(dir: &Path) -> Result<Vec<Trace>> {
    let summary: BatchSummary = formats::read_json(&dir.join(SUMMARY_FILE))?;
    formats::read_traces(&dir.join(TRACES_FILE), &summary.solver)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    formats::create_parent(path)?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunManifest> {
    run_pipeline_with(cfg, |_| {})
}

/// Runs every stage in order, calling `on_stage` after each. A failing stage
/// aborts the run; files already written stay in place.
pub fn run_pipeline_with(
    cfg: &ExperimentConfig,
    mut on_stage: impl FnMut(&StageEntry),
) -> Result<RunManifest> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    let _lock = DirLock::acquire(&dir)?;
    cfg.save(&dir.join("config.json"))?;
    let mut run = Run {
        cfg,
        dir: dir.clone(),
        keys: Vec::new(),
    };
    let mut entries = Vec::new();
    for s in Stage::ALL {
        let e = run.execute(s)?;
        on_stage(&e);
        entries.push(e);
    }
    // Where a run lands does not change what it computes.
    let config_hash = value_hash(&ExperimentConfig {
        output_dir: PathBuf::new(),
        ..cfg.clone()
    });
    let manifest = RunManifest {
        hash: RunManifest::digest(TOOL_VERSION, &config_hash, &entries),
        tool_version: TOOL_VERSION.into(),
        config_hash,
        output_dir: dir.clone(),
        stages: entries,
    };
    formats::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
