use kinflow_core::diagnostics::{exact_w2, f_mem, kpe_density_report, DensityParams};
use kinflow_core::efm::EfmField;
use kinflow_core::mlp::{self, MlpParams, TrainConfig};
use kinflow_core::sampler::{
    sample_batch, KtsSchedule, Shaped, SolverConfig, SolverMethod, EFM_DELTA_CUT,
};
use kinflow_core::synthdata::{generate, group_counts, DatasetKind, Point2};
use kinflow_core::theory::{check_energy_density_bounds, decile_times, sample_dominant_points};
use kinflow_core::VelocityField;
use proptest::prelude::*;

fn kind_strategy() -> impl Strategy<Value = DatasetKind> {
    prop::sample::select(DatasetKind::ALL.to_vec())
}

fn midpoint(steps: usize) -> SolverConfig {
    SolverConfig {
        method: SolverMethod::Midpoint,
        steps,
        delta_cut: EFM_DELTA_CUT,
        seed: 3,
    }
}

fn dense_count(kind: DatasetKind, n: usize) -> usize {
    let c = group_counts(kind, n);
    match kind {
        DatasetKind::DenseSparse | DatasetKind::Sandwich => c[0],
        DatasetKind::MultiscaleClusters => n - c[0],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn datasets_are_reproducible_and_stratified(
        kind in kind_strategy(),
        n in 10usize..400,
        seed in any::<u64>(),
    ) {
        let a = generate(kind, n, seed).unwrap();
        prop_assert_eq!(&a, &generate(kind, n, seed).unwrap());
        prop_assert_eq!(a.n(), n);
        prop_assert!(a.points.iter().all(|p| p.is_finite()));
        prop_assert!(a.strata.iter().all(|s| kind.allows(*s)));
        let dense = a.strata.iter().filter(|s| s.is_dense()).count();
        prop_assert_eq!(dense, dense_count(kind, n));
    }

    #[test]
    fn w2_of_a_translate_is_the_shift(
        pts in prop::collection::vec(-3.0f64..3.0, 2..40),
        cx in -2.0f64..2.0,
        cy in -2.0f64..2.0,
    ) {
        let pts = &pts[..pts.len() / 2 * 2];
        let moved: Vec<f64> = pts
            .chunks_exact(2)
            .flat_map(|p| [p[0] + cx, p[1] + cy])
            .collect();
        let w = exact_w2(pts, &moved, 2).unwrap();
        prop_assert!((w - (cx * cx + cy * cy).sqrt()).abs() < 1e-9);
    }
}

#[test]
fn efm_samples_land_on_training_atoms() {
    let data = generate(DatasetKind::DenseSparse, 200, 7).unwrap();
    let f = EfmField::from_points(&data.points, None).unwrap();
    let b = sample_batch(&f, 60, &midpoint(300), 0.6).unwrap();
    assert!(b.failures.is_empty());
    let ends: Vec<f64> = b.trajectories.iter().flat_map(|t| t.endpoint().to_vec()).collect();
    let r = f_mem(&ends, &data.flat(), 2, 1.0 / 3.0, 2).unwrap();
    assert!(r.f_mem >= 0.9, "{}", r.f_mem);
    let steps = b.trajectories[0].power.len();
    let mean_power: Vec<f64> = (0..steps)
        .map(|j| b.trajectories.iter().map(|t| t.power[j]).sum::<f64>())
        .collect();
    let peak = (0..steps).max_by(|&i, &j| mean_power[i].total_cmp(&mean_power[j])).unwrap();
    assert!(b.trajectories[0].eval_times[peak] > 0.5);
    for t in &b.trajectories {
        assert!((t.kpe_early + t.kpe_late - t.kpe).abs() < 1e-12 * t.kpe.max(1.0));
    }
    let rep = kpe_density_report(&b.trajectories, &data, DensityParams::default()).unwrap();
    assert!(rep.mean_kpe_sparse > rep.mean_kpe_dense);
}

#[test]
fn bounds_hold_on_dataset_mixture() {
    let data = generate(DatasetKind::Sandwich, 40, 1).unwrap();
    let f = EfmField::from_points(&data.points, None).unwrap();
    let s = sample_dominant_points(f.mixture(), &decile_times(), 0.1, 200, 200_000, 5).unwrap();
    assert_eq!(s.points.len(), 200);
    let r = check_energy_density_bounds(f.mixture(), &s.points, 0.1).unwrap();
    assert!(r.skipped.is_empty());
    assert_eq!(r.pass_rate, 1.0);
    assert_eq!(r.remainder_pass_rate, 1.0);
}

#[test]
fn short_training_gives_a_usable_field() {
    let data = generate(DatasetKind::MultiscaleClusters, 100, 4).unwrap();
    let cfg = TrainConfig {
        iterations: 60,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let dims = [mlp::INPUT_DIM, 16, 16, mlp::OUTPUT_DIM];
    let init = MlpParams::init(&dims, cfg.seed).unwrap();
    let out = mlp::train_with(&data, &cfg, init, |_, _| {}).unwrap();
    assert_eq!(out.loss_curve.len(), 60);
    let p = out.params;
    assert_eq!(p.dim(), 2);
    let solver = SolverConfig {
        steps: 20,
        ..SolverConfig::default()
    };
    let plain = sample_batch(&p, 40, &solver, 0.6).unwrap();
    let same = Shaped::new(&p, KtsSchedule::new(0.0, 0.0).unwrap()).unwrap();
    assert_eq!(plain.trajectories, sample_batch(&same, 40, &solver, 0.6).unwrap().trajectories);
    let damped = Shaped::new(&p, KtsSchedule::new(0.0, 0.02).unwrap()).unwrap();
    let d = sample_batch(&damped, 40, &solver, 0.6).unwrap();
    for (a, b) in plain.trajectories.iter().zip(&d.trajectories) {
        assert_eq!(a.kpe_early, b.kpe_early);
        assert!(a.times.iter().zip(&b.times).all(|(x, y)| x == y));
    }
    let ends: Vec<Point2> = d
        .trajectories
        .iter()
        .map(|t| Point2::new(t.endpoint()[0], t.endpoint()[1]))
        .collect();
    assert!(ends.iter().all(|e| e.is_finite()));
}
