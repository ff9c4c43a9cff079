use std::fs;
use std::path::Path;

use kinflow::config::{ExperimentConfig, TheoryConfig};
use kinflow::pipeline::{self, DirLock, RunManifest, MANIFEST_FILE};
use kinflow::{run_pipeline, Error, Stage};
use kinflow_core::sampler::SolverMethod;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::ci();
    cfg.dataset.n = 120;
    cfg.train.iterations = 30;
    cfg.train.batch_size = 32;
    cfg.sampling.method = SolverMethod::Euler;
    cfg.sampling.steps = 20;
    cfg.sampling.trajectories = 40;
    cfg.efm.neighbors = Some(50);
    cfg.kts.alpha0 = 0.0;
    cfg.kts.beta0 = 0.0;
    cfg.diagnostics.knn_k = 20;
    cfg.diagnostics.w2_points = 40;
    cfg.theory = TheoryConfig {
        dims: vec![1, 2],
        atom_counts: vec![1, 5],
        eps: vec![0.1],
        points_per_cell: 20,
        atom_scale: 3.0,
        lower_bound_paths: 10,
        concentration_probes: 3,
        seed: 4,
    };
    cfg.sweep.alpha0 = vec![0.0, 0.01];
    cfg.sweep.beta0 = vec![0.0, 0.02];
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn cached(m: &RunManifest) -> Vec<bool> {
    m.stages.iter().map(|s| s.cached).collect()
}

#[test]
fn rerun_is_cached_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&tmp.path().join("a"));
    let first = run_pipeline(&cfg).unwrap();
    assert_eq!(first.stages.len(), Stage::ALL.len());
    assert!(cached(&first).iter().all(|c| !c));
    first.verify_outputs().unwrap();
    let on_disk: RunManifest =
        kinflow::formats::read_json(&cfg.output_dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(on_disk.hash, first.hash);
    assert!(!cfg.output_dir.join(pipeline::LOCK_FILE).exists());

    let second = run_pipeline(&cfg).unwrap();
    assert!(cached(&second).iter().all(|c| *c));
    assert_eq!(second.hash, first.hash);

    // Identity KTS reproduces the baseline set byte for byte.
    let samples = cfg.output_dir.join("samples");
    let baseline = fs::read(samples.join("baseline/traces.csv")).unwrap();
    assert_eq!(baseline, fs::read(samples.join("kts/traces.csv")).unwrap());

    // Same config elsewhere: same payloads, same manifest hash.
    let other = tiny(&tmp.path().join("b"));
    let third = run_pipeline(&other).unwrap();
    assert_eq!(third.hash, first.hash);
    assert_eq!(baseline, fs::read(other.output_dir.join("samples/baseline/traces.csv")).unwrap());
}

#[test]
fn changed_inputs_invalidate_downstream_only() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    let first = run_pipeline(&cfg).unwrap();
    cfg.sampling.seed += 1;
    let m = run_pipeline(&cfg).unwrap();
    let by_stage = |s: Stage| m.stage(s).unwrap().cached;
    assert!(by_stage(Stage::GenData) && by_stage(Stage::Train) && by_stage(Stage::VerifyTheory));
    assert!(!by_stage(Stage::Sample) && !by_stage(Stage::Diagnose) && !by_stage(Stage::Plot));
    assert_ne!(m.hash, first.hash);

    // A tampered output forces its stage to run again.
    let loss = tmp.path().join("model/loss.csv");
    fs::write(&loss, "iter,loss\n0,1\n").unwrap();
    let m = run_pipeline(&cfg).unwrap();
    assert!(!m.stage(Stage::Train).unwrap().cached);
    assert!(m.stage(Stage::Sample).unwrap().cached);
    m.verify_outputs().unwrap();
}

#[test]
fn locked_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let lock = DirLock::acquire(tmp.path()).unwrap();
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, Error::Locked { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    drop(lock);
    assert!(DirLock::acquire(tmp.path()).is_ok());
}

#[test]
fn invalid_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.sampling.steps = 0;
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!tmp.path().join(MANIFEST_FILE).exists());
}
