//! The theory suite behind `verify-theory`: energy/density bounds on
//! dominant points, concentration along frozen points, terminal blow-up and
//! the universal lower bound on atom-terminating paths.

use kinflow_core::efm::{EfmField, MixtureModel};
use kinflow_core::math::dist_sq;
use kinflow_core::rng::{self, StreamRng};
use kinflow_core::synthdata::Point2;
use kinflow_core::theory::{
    self, BlowupConfig, check_concentration, check_energy_density_bounds, decile_times,
    frozen_path, sample_dominant_points, universal_lower_bound_check,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::TheoryConfig;
use crate::error::Result;

const ATOM_STREAM_BASE: u64 = (1 << 32) + 16;
const PROBE_STREAM: u64 = (1 << 32) + 8;
const PATH_STREAM: u64 = (1 << 32) + 9;

pub const CONSTANT_TOL: f64 = 1e-14;
pub const BLOWUP_REL_TOL: f64 = 1e-6;
pub const HALVING_RANGE: (f64, f64) = (1.8, 2.2);
pub const STRAIGHT_REL_TOL: f64 = 1e-6;

/// `scale * N(0, I)` atoms, `n x dim`, from stream `id`.
pub fn gaussian_atoms(dim: usize, n: usize, scale: f64, seed: u64, id: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, ATOM_STREAM_BASE + id);
    normal_vec(&mut r, dim * n, scale)
}

fn normal_vec(r: &mut StreamRng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            scale * z
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCell {
    pub source: String,
    pub dim: usize,
    pub atoms: usize,
    pub eps: f64,
    pub points: usize,
    pub skipped: usize,
    pub attempts: usize,
    pub rejected: usize,
    pub pass_rate: f64,
    pub remainder_pass_rate: f64,
    /// Largest `|c1 - 1/2|` and `|c2 - 12|` over the cell.
    pub constants_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSummary {
    pub probes: usize,
    pub checked: usize,
    pub violations: usize,
    /// Largest `deficit / bound` among checked points.
    pub worst_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticBlowup {
    pub delta: f64,
    pub integral: f64,
    pub exact: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupSummary {
    pub t_bar: f64,
    pub analytic: Vec<AnalyticBlowup>,
    pub max_rel_error: f64,
    /// `I(delta / 2) / I(delta)` over the single-atom and mixture probes.
    pub halving_ratios: Vec<f64>,
    pub lower_bounds_hold: bool,
    /// Mixture probes whose hypotheses failed.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundSummary {
    pub paths: usize,
    pub passed: usize,
    /// `|lhs - rhs| / rhs` for the straight constant-speed path.
    pub straight_rel_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub config: TheoryConfig,
    pub bounds: Vec<BoundCell>,
    pub bound_points: usize,
    pub bound_pass_rate: f64,
    pub remainder_pass_rate: f64,
    pub constants_error: f64,
    pub concentration: ConcentrationSummary,
    pub blowup: BlowupSummary,
    pub lower_bound: LowerBoundSummary,
    pub passed: bool,
    pub failures: Vec<String>,
}

fn bound_cell(
    source: &str,
    mix: &MixtureModel,
    eps: f64,
    count: usize,
    seed: u64,
) -> Result<BoundCell> {
    let times = decile_times();
    let s = sample_dominant_points(mix, &times, eps, count, 1000 * count.max(1), seed)?;
    let rep = check_energy_density_bounds(mix, &s.points, eps)?;
    let constants_error = rep
        .records
        .iter()
        .map(|r| (r.constants.c1 - 0.5).abs().max((r.constants.c2 - 12.0).abs()))
        .fold(0.0, f64::max);
    Ok(BoundCell {
        source: source.into(),
        dim: mix.dim(),
        atoms: mix.len(),
        eps,
        points: rep.records.len(),
        skipped: rep.skipped.len(),
        attempts: s.attempts,
        rejected: s.rejected,
        pass_rate: rep.pass_rate,
        remainder_pass_rate: rep.remainder_pass_rate,
        constants_error,
    })
}

fn concentration(mix: &MixtureModel, cfg: &TheoryConfig) -> Result<ConcentrationSummary> {
    let ts = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.995, 0.999];
    let mut r = rng::stream(cfg.seed, PROBE_STREAM);
    let mut out = ConcentrationSummary {
        probes: 0,
        checked: 0,
        violations: 0,
        worst_ratio: 0.0,
    };
    for _ in 0..cfg.concentration_probes {
        let x = normal_vec(&mut r, mix.dim(), cfg.atom_scale);
        for m_gap in [1e-3, 1e-2, 1e-1, 1.0] {
            let rep = check_concentration(mix, &frozen_path(&x, &ts), m_gap, 0.5)?;
            out.probes += 1;
            out.checked += rep.checked();
            out.violations += rep.violations();
            for p in rep.points.iter().filter(|p| p.margin_valid && p.bound > 0.0) {
                out.worst_ratio = out.worst_ratio.max(p.deficit / p.bound);
            }
        }
    }
    Ok(out)
}

fn blowup(mix_points: Option<&[Point2]>, atoms2: &[f64]) -> Result<BlowupSummary> {
    let deltas = vec![1e-2, 5e-3, 2.5e-3, 1.25e-3, 1e-3];
    let single = EfmField::from_points(&[Point2::new(0.0, 0.0)], None)?;
    let rep = theory::blowup_probe(&single, &[1.0, 0.0], &BlowupConfig::new(1.0, deltas.clone()))?;
    let analytic: Vec<AnalyticBlowup> = rep
        .points
        .iter()
        .map(|p| {
            let exact = 1.0 / p.delta - 1.0 / (1.0 - rep.t_bar);
            AnalyticBlowup {
                delta: p.delta,
                integral: p.integral,
                exact,
                rel_error: ((p.integral - exact) / exact).abs(),
            }
        })
        .collect();
    let mut lower_bounds_hold = rep.points.iter().all(|p| p.pass);
    let mut halving_ratios = halving(&rep.points);
    let mut skipped = Vec::new();
    let mix = match mix_points {
        Some(p) => EfmField::from_points(p, None)?,
        None => EfmField::new(MixtureModel::linear(2, atoms2.to_vec())?, None)?,
    };
    let r_max = mix
        .mixture()
        .atoms()
        .map(|a| dist_sq(a, &[0.0, 0.0]).sqrt())
        .fold(0.0, f64::max);
    for dir in [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.6, -0.8]] {
        let x = [dir[0] * (r_max + 1.0), dir[1] * (r_max + 1.0)];
        let c = mix
            .mixture()
            .atoms()
            .map(|a| dist_sq(a, &x).sqrt())
            .fold(f64::INFINITY, f64::min);
        let cfg = BlowupConfig {
            panels_per_efold: 2000,
            ..BlowupConfig::new(c, deltas.clone())
        };
        match theory::blowup_probe(&mix, &x, &cfg) {
            Ok(r) => {
                lower_bounds_hold &= r.points.iter().all(|p| p.pass);
                halving_ratios.extend(halving(&r.points));
            }
            Err(kinflow_core::Error::Hypothesis(why)) => {
                skipped.push(format!("x = {x:?}: {why}"));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(BlowupSummary {
        t_bar: rep.t_bar,
        max_rel_error: analytic.iter().map(|a| a.rel_error).fold(0.0, f64::max),
        analytic,
        halving_ratios,
        lower_bounds_hold,
        skipped,
    })
}

fn halving(points: &[theory::BlowupPoint]) -> Vec<f64> {
    points
        .windows(2)
        .filter(|w| w[1].delta == w[0].delta / 2.0 && w[0].integral > 0.0)
        .map(|w| w[1].integral / w[0].integral)
        .collect()
}

/// Random polygonal paths in the plane ending on a random atom of `mix`.
fn lower_bound(mix: &MixtureModel, cfg: &TheoryConfig) -> Result<LowerBoundSummary> {
    let mut r = rng::stream(cfg.seed, PATH_STREAM);
    let mut passed = 0;
    for _ in 0..cfg.lower_bound_paths {
        let nodes = r.random_range(2..30usize);
        let mut weights: Vec<f64> = (0..nodes).map(|_| r.random_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let mut times = vec![0.0];
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            times.push(acc);
        }
        *times.last_mut().expect("non-empty") = 1.0;
        let mut states = normal_vec(&mut r, nodes * mix.dim(), cfg.atom_scale);
        let atom = r.random_range(0..mix.len());
        states.extend_from_slice(mix.atom(atom));
        let t = r.random_range(0.0..0.999);
        if universal_lower_bound_check(mix, &times, &states, t)?.pass {
            passed += 1;
        }
    }
    let steps = 1000;
    let target = mix.atom(0);
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
    let states: Vec<f64> = times
        .iter()
        .flat_map(|&s| target.iter().enumerate().map(move |(k, a)| a + if k == 0 { 2.0 * (s - 1.0) } else { 0.0 }))
        .collect();
    let c = universal_lower_bound_check(mix, &times, &states, 0.5)?;
    Ok(LowerBoundSummary {
        paths: cfg.lower_bound_paths,
        passed,
        straight_rel_gap: ((c.lhs - c.rhs) / c.rhs).abs(),
    })
}

/// Runs the suite. With `data`, its points form one more d = 2 atom set for
/// the bound cells and the mixture blow-up probes.
pub fn verify_theory(cfg: &TheoryConfig, data: Option<&[Point2]>) -> Result<TheoryReport> {
    let mut bounds = Vec::new();
    let mut id = 0;
    let mut planar = None;
    for &dim in &cfg.dims {
        for &n in &cfg.atom_counts {
            let atoms = gaussian_atoms(dim, n, cfg.atom_scale, cfg.seed, id);
            id += 1;
            let mix = MixtureModel::linear(dim, atoms.clone())?;
            if dim == 2 && planar.as_ref().is_none_or(|(m, _): &(MixtureModel, _)| m.len() < n) {
                planar = Some((mix.clone(), atoms));
            }
            for &eps in &cfg.eps {
                bounds.push(bound_cell("gaussian", &mix, eps, cfg.points_per_cell, cfg.seed)?);
            }
        }
    }
    if let Some(points) = data {
        let mix = MixtureModel::from_points(points)?;
        for &eps in &cfg.eps {
            bounds.push(bound_cell("dataset", &mix, eps, cfg.points_per_cell, cfg.seed)?);
        }
    }
    let (planar_mix, planar_atoms) = match planar {
        Some(p) => p,
        None => {
            let atoms = gaussian_atoms(2, 5, cfg.atom_scale, cfg.seed, id);
            (MixtureModel::linear(2, atoms.clone())?, atoms)
        }
    };
    let concentration = concentration(&planar_mix, cfg)?;
    let blowup = blowup(data, &planar_atoms)?;
    let lower_bound = lower_bound(&planar_mix, cfg)?;

    let bound_points: usize = bounds.iter().map(|b| b.points).sum();
    let weighted = |f: fn(&BoundCell) -> f64| {
        if bound_points == 0 {
            1.0
        } else {
            bounds.iter().map(|b| f(b) * b.points as f64).sum::<f64>() / bound_points as f64
        }
    };
    let bound_pass_rate = weighted(|b| b.pass_rate);
    let remainder_pass_rate = weighted(|b| b.remainder_pass_rate);
    let constants_error = bounds.iter().map(|b| b.constants_error).fold(0.0, f64::max);

    let mut failures = Vec::new();
    if bound_points == 0 {
        failures.push("no dominant points were found".to_string());
    }
    if bounds.iter().any(|b| b.pass_rate < 1.0) {
        failures.push(format!("bound pass rate {bound_pass_rate}"));
    }
    if bounds.iter().any(|b| b.remainder_pass_rate < 1.0) {
        failures.push(format!("remainder pass rate {remainder_pass_rate}"));
    }
    if constants_error >= CONSTANT_TOL {
        failures.push(format!("constants off by {constants_error:e}"));
    }
    if concentration.violations > 0 {
        failures.push(format!("{} concentration violations", concentration.violations));
    }
    if blowup.max_rel_error >= BLOWUP_REL_TOL {
        failures.push(format!("blow-up relative error {:e}", blowup.max_rel_error));
    }
    if let Some(r) = blowup
        .halving_ratios
        .iter()
        .find(|r| !(HALVING_RANGE.0..=HALVING_RANGE.1).contains(*r))
    {
        failures.push(format!("halving ratio {r}"));
    }
    if !blowup.lower_bounds_hold {
        failures.push("blow-up lower bound violated".into());
    }
    if lower_bound.passed < lower_bound.paths {
        failures.push(format!(
            "{} of {} paths violate the lower bound",
            lower_bound.paths - lower_bound.passed,
            lower_bound.paths
        ));
    }
    if lower_bound.straight_rel_gap >= STRAIGHT_REL_TOL {
        failures.push(format!("straight path gap {:e}", lower_bound.straight_rel_gap));
    }
    Ok(TheoryReport {
        config: cfg.clone(),
        bounds,
        bound_points,
        bound_pass_rate,
        remainder_pass_rate,
        constants_error,
        concentration,
        blowup,
        lower_bound,
        passed: failures.is_empty(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TheoryConfig {
        TheoryConfig {
            dims: vec![1, 2],
            atom_counts: vec![1, 5],
            eps: vec![0.1],
            points_per_cell: 30,
            atom_scale: 3.0,
            lower_bound_paths: 20,
            concentration_probes: 3,
            seed: 4,
        }
    }

    #[test]
    fn small_suite_passes() {
        let r = verify_theory(&small(), None).unwrap();
        assert!(r.passed, "{:?}", r.failures);
        assert_eq!(r.bounds.len(), 4);
        assert_eq!(r.bound_points, 4 * 30);
        assert!(r.constants_error < CONSTANT_TOL);
        assert_eq!(r.lower_bound.passed, 20);
        assert!(r.concentration.checked > 0);
        assert!(!r.blowup.halving_ratios.is_empty());
    }

    #[test]
    fn dataset_cells_are_added() {
        let data = kinflow_core::synthdata::generate(
            kinflow_core::synthdata::DatasetKind::Sandwich,
            40,
            1,
        )
        .unwrap();
        let r = verify_theory(&small(), Some(&data.points)).unwrap();
        assert!(r.passed, "{:?}", r.failures);
        let last = r.bounds.last().unwrap();
        assert_eq!((last.source.as_str(), last.atoms), ("dataset", 40));
    }

    #[test]
    fn atoms_are_reproducible() {
        assert_eq!(gaussian_atoms(2, 3, 3.0, 7, 1), gaussian_atoms(2, 3, 3.0, 7, 1));
        assert_ne!(gaussian_atoms(2, 3, 3.0, 7, 1), gaussian_atoms(2, 3, 3.0, 7, 2));
    }
}
