//! Numerical checks of the energy/density theory for the closed-form field.
//!
//! - Energy/density sandwich: at a point where one mixture component holds
//!   posterior mass `>= 1 - eps`,
//!   `c1 (-log p) - C' <= |u*|^2 <= c2 (-log p) + C'` with explicit constants
//!   ([`BoundConstants`], [`check_energy_density_bounds`]), together with the
//!   two remainder estimates it is built from.
//! - Terminal behaviour: posterior concentration under a margin
//!   ([`check_concentration`]), the `1/delta` growth of the partial energy at
//!   a frozen off-atom point ([`blowup_probe`]) and the path-independent
//!   Cauchy-Schwarz lower bound on the energy needed to reach an atom
//!   ([`universal_lower_bound_check`]).
//! - [`integrated_energy_density`] reports the trajectory-level integrals the
//!   sandwich relates; it asserts nothing.
//!
//! Exact inequalities are checked with a relative slack of [`REL_SLACK`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::efm::{EfmField, MixtureModel};
use crate::error::{invalid, Error, Result};
use crate::math::{ceil, compensated_sum, dist_sq, exp, ln, norm, norm_sq, sqrt, LN_2PI};
use crate::rng::{self, THEORY_STREAM};
use crate::sampler::Trajectory;

pub const REL_SLACK: f64 = 1e-9;

/// Smallest panel ratio used by [`blowup_probe`] is `1 + 1 / panels_per_efold`.
pub const DEFAULT_PANELS_PER_EFOLD: usize = 5000;

fn leq(a: f64, b: f64) -> bool {
    a <= b + REL_SLACK * a.abs().max(b.abs()).max(1.0)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(invalid!("eps {eps} outside (0, 0.5)"));
    }
    Ok(())
}

/// Constants of the energy/density sandwich at `(t, i*, eps)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub eps: f64,
    pub t: f64,
    pub i_star: usize,
    pub m: f64,
    pub sigma_sq: f64,
    pub alpha: f64,
    pub c1: f64,
    pub c2: f64,
    pub delta: f64,
    pub b_norm: f64,
    pub e: f64,
    pub f: f64,
    pub c_minus: f64,
    pub c_plus: f64,
    pub c0: f64,
    pub k: f64,
    pub c_prime: f64,
}

impl BoundConstants {
    pub fn new(mix: &MixtureModel, i_star: usize, t: f64, eps: f64) -> Result<Self> {
        check_eps(eps)?;
        if !(t > 0.0 && t < 1.0) {
            return Err(invalid!("time {t} outside (0, 1)"));
        }
        if i_star >= mix.len() {
            return Err(invalid!("component {i_star} out of range"));
        }
        let sch = mix.schedule();
        let g = sch.gamma(t);
        if !(g > 0.0 && g < 1.0) {
            return Err(invalid!("gamma({t}) = {g} outside (0, 1)"));
        }
        if sch.gamma_dot(t) == 0.0 {
            return Err(invalid!("gamma'({t}) = 0"));
        }
        let m = sch.m(t);
        let sigma_sq = sch.sigma_sq(t);
        let alpha = sch.alpha(t);
        let ms = m * (1.0 - g);
        let c1 = 0.5 * ms * ms;
        let c2 = 12.0 * ms * ms;
        let mu = mix.mean(i_star, t);
        let mu_sq = norm_sq(&mu);
        let delta = (0..mix.len())
            .map(|j| sqrt(dist_sq(&mix.mean(j, t), &mu)))
            .fold(0.0, f64::max);
        let b_norm = (alpha / sigma_sq).abs() * sqrt(mu_sq);
        let e = alpha.abs() * eps * delta / sigma_sq;
        let f = b_norm + e;
        let c_minus = 0.5 * m * m * mu_sq + 2.0 * f * f;
        let c_plus = 6.0 * m * m * mu_sq + 3.0 * (b_norm * b_norm + e * e);
        let d = mix.dim() as f64;
        let c0 = 0.5 * d * LN_2PI + 0.5 * d * ln(sigma_sq) + ln(mix.len() as f64);
        let k = c0.abs() - ln(1.0 - eps);
        let c_prime = (c_minus + c1 * k).max(c_plus + c2 * k);
        Ok(Self {
            eps,
            t,
            i_star,
            m,
            sigma_sq,
            alpha,
            c1,
            c2,
            delta,
            b_norm,
            e,
            f,
            c_minus,
            c_plus,
            c0,
            k,
            c_prime,
        })
    }
}

/// `R_t = -log p - |z - mu*|^2 / (2 sigma^2) - C0`, which must lie in
/// `[log(1 - eps), 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalRemainder {
    pub value: f64,
    pub lower: f64,
    pub pass: bool,
}

/// `r_t = grad log p + (z - mu*) / sigma^2` against `eps Delta / sigma^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRemainder {
    pub norm: f64,
    pub bound: f64,
    pub pass: bool,
}

fn dominant(mix: &MixtureModel, z: &[f64], t: f64, eps: f64) -> Result<Option<usize>> {
    mix.dominance(z, t, eps)
}

/// `None` when `(z, t)` is not dominated at level `eps`.
pub fn check_local_gaussian_remainder(
    mix: &MixtureModel,
    z: &[f64],
    t: f64,
    eps: f64,
) -> Result<Option<LocalRemainder>> {
    let Some(i) = dominant(mix, z, t, eps)? else {
        return Ok(None);
    };
    let c = BoundConstants::new(mix, i, t, eps)?;
    let a = dist_sq(z, &mix.mean(i, t)) / (2.0 * c.sigma_sq);
    let value = -mix.log_density(z, t)? - a - c.c0;
    let lower = ln(1.0 - eps);
    let tol = REL_SLACK * (a + c.c0.abs()).max(1.0);
    Ok(Some(LocalRemainder {
        value,
        lower,
        pass: value >= lower - tol && value <= tol,
    }))
}

/// `None` when `(z, t)` is not dominated at level `eps`.
pub fn check_score_remainder(
    mix: &MixtureModel,
    z: &[f64],
    t: f64,
    eps: f64,
) -> Result<Option<ScoreRemainder>> {
    let Some(i) = dominant(mix, z, t, eps)? else {
        return Ok(None);
    };
    let c = BoundConstants::new(mix, i, t, eps)?;
    let score = mix.score(z, t)?;
    let mu = mix.mean(i, t);
    let r: Vec<f64> = score
        .iter()
        .zip(z.iter().zip(&mu))
        .map(|(s, (zz, m))| s + (zz - m) / c.sigma_sq)
        .collect();
    let rn = norm(&r);
    let bound = eps * c.delta / c.sigma_sq;
    let scale = norm(&score).max(norm(z) / c.sigma_sq).max(1.0);
    Ok(Some(ScoreRemainder {
        norm: rn,
        bound,
        pass: rn <= bound + REL_SLACK * scale,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub z: Vec<f64>,
    pub t: f64,
    pub i_star: usize,
    pub lambda: f64,
    pub neg_log_density: f64,
    pub energy: f64,
    pub lower: f64,
    pub upper: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
    pub local_remainder: LocalRemainder,
    pub score_remainder: ScoreRemainder,
    pub constants: BoundConstants,
}

impl BoundRecord {
    pub fn passed(&self) -> bool {
        self.lower_ok && self.upper_ok
    }

    pub fn remainders_passed(&self) -> bool {
        self.local_remainder.pass && self.score_remainder.pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPoint {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckReport {
    pub eps: f64,
    pub records: Vec<BoundRecord>,
    pub skipped: Vec<SkippedPoint>,
    /// Share of checked (non-skipped) points satisfying both sides; 1 when
    /// nothing was checked.
    pub pass_rate: f64,
    pub remainder_pass_rate: f64,
}

fn rate(hits: usize, n: usize) -> f64 {
    if n == 0 { 1.0 } else { hits as f64 / n as f64 }
}

/// Checks the sandwich at every `(z, t)`. Points without a dominant
/// component are skipped with a reason rather than counted as failures.
pub fn check_energy_density_bounds(
    mix: &MixtureModel,
    points: &[(Vec<f64>, f64)],
    eps: f64,
) -> Result<BoundCheckReport> {
    check_eps(eps)?;
    let mut records = Vec::with_capacity(points.len());
    let mut skipped = Vec::new();
    for (index, (z, t)) in points.iter().enumerate() {
        let t = *t;
        let g = mix.schedule().gamma(t);
        if !(t > 0.0 && t < 1.0 && g > 0.0 && g < 1.0) {
            skipped.push(SkippedPoint {
                index,
                reason: format!("t = {t} outside the admissible range"),
            });
            continue;
        }
        let lambda = mix.posterior_weights(z, t)?;
        let Some(i) = dominant(mix, z, t, eps)? else {
            let lmax = lambda.iter().copied().fold(0.0, f64::max);
            skipped.push(SkippedPoint {
                index,
                reason: format!("no dominant component: max lambda {lmax} < 1 - {eps}"),
            });
            continue;
        };
        let c = BoundConstants::new(mix, i, t, eps)?;
        let nlp = -mix.log_density(z, t)?;
        let energy = norm_sq(&mix.optimal_velocity(z, t)?);
        let lower = c.c1 * nlp - c.c_prime;
        let upper = c.c2 * nlp + c.c_prime;
        let local_remainder = check_local_gaussian_remainder(mix, z, t, eps)?
            .expect("dominance was established above");
        let score_remainder = check_score_remainder(mix, z, t, eps)?
            .expect("dominance was established above");
        records.push(BoundRecord {
            z: z.clone(),
            t,
            i_star: i,
            lambda: lambda[i],
            neg_log_density: nlp,
            energy,
            lower,
            upper,
            lower_ok: leq(lower, energy),
            upper_ok: leq(energy, upper),
            local_remainder,
            score_remainder,
            constants: c,
        });
    }
    let n = records.len();
    let pass_rate = rate(records.iter().filter(|r| r.passed()).count(), n);
    let remainder_pass_rate = rate(records.iter().filter(|r| r.remainders_passed()).count(), n);
    Ok(BoundCheckReport {
        eps,
        records,
        skipped,
        pass_rate,
        remainder_pass_rate,
    })
}

/// Dominant test points with their rejection statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominantSample {
    pub points: Vec<(Vec<f64>, f64)>,
    pub attempts: usize,
    pub rejected: usize,
}

impl DominantSample {
    pub fn rejection_rate(&self) -> f64 {
        rate(self.rejected, self.attempts)
    }
}

/// Draws `z ~ N(mu_i(t), sigma_t^2 I)` for a uniformly chosen atom `i`,
/// cycling through `times`, and keeps the draws dominated at level `eps`.
/// Gives up after `max_attempts` draws.
pub fn sample_dominant_points(
    mix: &MixtureModel,
    times: &[f64],
    eps: f64,
    count: usize,
    max_attempts: usize,
    seed: u64,
) -> Result<DominantSample> {
    check_eps(eps)?;
    if times.is_empty() {
        return Err(invalid!("no times to sample at"));
    }
    let mut rng = rng::stream(seed, THEORY_STREAM);
    let mut points = Vec::with_capacity(count);
    let mut attempts = 0;
    while points.len() < count && attempts < max_attempts {
        let t = times[attempts % times.len()];
        attempts += 1;
        let i = rng.random_range(0..mix.len());
        let sigma = sqrt(mix.schedule().sigma_sq(t));
        let z: Vec<f64> = mix
            .mean(i, t)
            .into_iter()
            .map(|m| {
                let n: f64 = StandardNormal.sample(&mut rng);
                m + sigma * n
            })
            .collect();
        if mix.dominance(&z, t, eps)?.is_some() {
            points.push((z, t));
        }
    }
    Ok(DominantSample {
        rejected: attempts - points.len(),
        points,
        attempts,
    })
}

/// One time of a concentration probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationPoint {
    pub t: f64,
    /// `min_{j != i*} s_j - s_{i*}`.
    pub margin: f64,
    pub margin_valid: bool,
    /// `1 - lambda_{i*}`, summed over the other components.
    pub deficit: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub i_star: usize,
    pub m_gap: f64,
    pub t0: f64,
    pub points: Vec<ConcentrationPoint>,
}

impl ConcentrationReport {
    /// Violations among margin-valid points.
    pub fn violations(&self) -> usize {
        self.points.iter().filter(|p| p.margin_valid && !p.pass).count()
    }

    pub fn checked(&self) -> usize {
        self.points.iter().filter(|p| p.margin_valid).count()
    }
}

/// Bridge scores `s_i = |x - t x_i|^2` for the linear bridge.
pub fn bridge_scores(mix: &MixtureModel, x: &[f64], t: f64) -> Vec<f64> {
    mix.atoms()
        .map(|a| a.iter().zip(x).map(|(ai, xi)| (xi - t * ai) * (xi - t * ai)).sum())
        .collect()
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// `1 - lambda_{i*}` evaluated as `sum_{j != i*} lambda_j` to keep tiny
/// deficits accurate.
fn deficit(lambda: &[f64], i_star: usize) -> f64 {
    compensated_sum(
        lambda
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i_star)
            .map(|(_, l)| *l),
    )
}

/// Checks `1 - lambda_{i*}(t) <= (n - 1) exp(-m_gap / (2 (1 - t)^2))` along
/// `path`, a list of `(x, t)`. `i*` is the component with the smallest bridge
/// score at the latest time `>= t0`; points before `t0` are ignored and
/// points where the margin fails are marked invalid.
pub fn check_concentration(
    mix: &MixtureModel,
    path: &[(Vec<f64>, f64)],
    m_gap: f64,
    t0: f64,
) -> Result<ConcentrationReport> {
    if m_gap.is_nan() || m_gap < 0.0 {
        return Err(invalid!("margin {m_gap} must be >= 0"));
    }
    if !(0.0..1.0).contains(&t0) {
        return Err(invalid!("t0 {t0} outside [0, 1)"));
    }
    let active: Vec<&(Vec<f64>, f64)> = path.iter().filter(|(_, t)| *t >= t0).collect();
    let Some(last) = active.iter().max_by(|a, b| a.1.total_cmp(&b.1)) else {
        return Err(invalid!("no path points at or after t0 = {t0}"));
    };
    let i_star = argmin(&bridge_scores(mix, &last.0, last.1));
    let n = mix.len() as f64;
    let mut points = Vec::with_capacity(active.len());
    for (x, t) in active {
        let t = *t;
        if !(t > 0.0 && t < 1.0) {
            return Err(invalid!("path time {t} outside (0, 1)"));
        }
        let s = bridge_scores(mix, x, t);
        let margin = s
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i_star)
            .map(|(_, sj)| sj - s[i_star])
            .fold(f64::INFINITY, f64::min);
        let lambda = mix.posterior_weights(x, t)?;
        let d = deficit(&lambda, i_star);
        let bound = (n - 1.0) * exp(-m_gap / (2.0 * (1.0 - t) * (1.0 - t)));
        points.push(ConcentrationPoint {
            t,
            margin,
            margin_valid: margin >= m_gap,
            deficit: d,
            bound,
            pass: d <= bound * (1.0 + REL_SLACK),
        });
    }
    Ok(ConcentrationReport {
        i_star,
        m_gap,
        t0,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupConfig {
    /// Non-collision radius `c`.
    pub c: f64,
    /// Earliest candidate for the concentration time.
    pub t0: f64,
    /// Cutoffs `delta` at which `I(delta)` is reported.
    pub deltas: Vec<f64>,
    pub panels_per_efold: usize,
}

impl BlowupConfig {
    pub fn new(c: f64, deltas: Vec<f64>) -> Self {
        Self {
            c,
            t0: 0.5,
            deltas,
            panels_per_efold: DEFAULT_PANELS_PER_EFOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlowupPoint {
    pub delta: f64,
    /// `I(delta) = int_{t_bar}^{1 - delta} |u*(x, t)|^2 dt`.
    pub integral: f64,
    /// `(c^2 / 4) (1 / delta - 1 / (1 - t_bar))`.
    pub lower_bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupReport {
    pub x: Vec<f64>,
    pub i_star: usize,
    pub c: f64,
    pub r_max: f64,
    pub t_bar: f64,
    pub points: Vec<BlowupPoint>,
}

/// Geometric grid in `s = 1 - t` from `s_hi` down to `s_lo` (both included).
fn geometric_grid(s_hi: f64, s_lo: f64, panels_per_efold: usize) -> Vec<f64> {
    let span = ln(s_hi / s_lo);
    let n = (ceil(span * panels_per_efold as f64) as usize).max(1);
    let mut g: Vec<f64> = (0..=n)
        .map(|k| s_hi * exp(-span * k as f64 / n as f64))
        .collect();
    g[0] = s_hi;
    g[n] = s_lo;
    g
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    compensated_sum(
        xs.windows(2)
            .zip(ys.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]).abs() * (y[0] + y[1])),
    )
}

/// Partial energies of the EFM field at a frozen point `x` near `t = 1`.
///
/// Verifies non-collision (`min_i |x - x_i| >= c`) and a unique nearest atom
/// `i*`, then takes `t_bar` as the first time on a geometric grid from
/// `cfg.t0` to `1 - min(delta)` after which `2 R (1 - lambda_{i*}) <= c / 2`
/// holds at every later grid time, with `R = max_i |x_i|`.
pub fn blowup_probe(f: &EfmField, x: &[f64], cfg: &BlowupConfig) -> Result<BlowupReport> {
    let mix = f.mixture();
    if x.len() != mix.dim() {
        return Err(invalid!("point has dim {}, field has {}", x.len(), mix.dim()));
    }
    if cfg.c.is_nan() || cfg.c <= 0.0 {
        return Err(invalid!("non-collision radius must be > 0"));
    }
    if !(cfg.t0 > 0.0 && cfg.t0 < 1.0) {
        return Err(invalid!("t0 {} outside (0, 1)", cfg.t0));
    }
    if cfg.deltas.is_empty() || cfg.deltas.iter().any(|d| !(*d > 0.0 && *d < 1.0 - cfg.t0)) {
        return Err(invalid!("cutoffs must lie in (0, 1 - t0)"));
    }
    if cfg.panels_per_efold == 0 {
        return Err(invalid!("panels_per_efold must be >= 1"));
    }
    let dists: Vec<f64> = mix.atoms().map(|a| dist_sq(a, x)).collect();
    let i_star = argmin(&dists);
    if sqrt(dists[i_star]) < cfg.c {
        return Err(Error::Hypothesis(format!(
            "non-collision: nearest atom at distance {} < c = {}",
            sqrt(dists[i_star]),
            cfg.c
        )));
    }
    if dists.iter().enumerate().any(|(j, d)| j != i_star && *d == dists[i_star]) {
        return Err(Error::Hypothesis(String::from(
            "terminal concentration: the nearest atom is not unique",
        )));
    }
    let r_max = mix.atoms().map(norm).fold(0.0, f64::max);
    let d_min = cfg.deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let grid = geometric_grid(1.0 - cfg.t0, d_min, cfg.panels_per_efold);
    let mut t_bar_idx = None;
    for (k, s) in grid.iter().enumerate().rev() {
        let lambda = mix.posterior_weights(x, 1.0 - s)?;
        if 2.0 * r_max * deficit(&lambda, i_star) <= cfg.c / 2.0 {
            t_bar_idx = Some(k);
        } else {
            break;
        }
    }
    let Some(k_bar) = t_bar_idx else {
        return Err(Error::Hypothesis(format!(
            "terminal concentration: 2 R (1 - lambda) > c / 2 at t = 1 - {d_min}"
        )));
    };
    let s_bar = grid[k_bar];
    let t_bar = 1.0 - s_bar;
    let mut points = Vec::with_capacity(cfg.deltas.len());
    for &delta in &cfg.deltas {
        let (integral, lower_bound) = if delta >= s_bar {
            (0.0, 0.0)
        } else {
            let s = geometric_grid(s_bar, delta, cfg.panels_per_efold);
            let mut ys = Vec::with_capacity(s.len());
            for &si in &s {
                ys.push(norm_sq(&f.velocity_at(x, 1.0 - si)?));
            }
            let lb = 0.25 * cfg.c * cfg.c * (1.0 / delta - 1.0 / s_bar);
            (trapezoid(&s, &ys), lb)
        };
        points.push(BlowupPoint {
            delta,
            integral,
            lower_bound,
            pass: leq(lower_bound, integral),
        });
    }
    Ok(BlowupReport {
        x: x.to_vec(),
        i_star,
        c: cfg.c,
        r_max,
        t_bar,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundCheck {
    pub atom: usize,
    pub t: f64,
    /// Energy of the path after `t`: `sum |dx|^2 / dt` over its segments.
    pub lhs: f64,
    /// `|x_i - x(t)|^2 / (1 - t)`.
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
}

/// Checks the energy a path needs after time `t` to reach the atom it ends
/// on. `times` must be increasing and end at 1; `states` is row-major. The
/// path is linear between nodes.
pub fn universal_lower_bound_check(
    mix: &MixtureModel,
    times: &[f64],
    states: &[f64],
    t: f64,
) -> Result<LowerBoundCheck> {
    let d = mix.dim();
    let n = times.len();
    if n < 2 || states.len() != n * d {
        return Err(invalid!("path needs >= 2 nodes of dimension {d}"));
    }
    if times.windows(2).any(|w| w[1].is_nan() || w[1] <= w[0]) {
        return Err(invalid!("path times must be strictly increasing"));
    }
    if (times[n - 1] - 1.0).abs() > 1e-12 {
        return Err(invalid!("path must end at t = 1, ends at {}", times[n - 1]));
    }
    if !(t >= times[0] && t < times[n - 1]) {
        return Err(invalid!("t = {t} outside the path's time range"));
    }
    let end = &states[(n - 1) * d..];
    let atom = mix
        .atoms()
        .position(|a| a.iter().zip(end).all(|(p, q)| (p - q).abs() <= 1e-12))
        .ok_or_else(|| invalid!("path does not terminate at a training atom"))?;
    let seg = times.partition_point(|&s| s <= t) - 1;
    let row = |k: usize| &states[k * d..(k + 1) * d];
    let w = (t - times[seg]) / (times[seg + 1] - times[seg]);
    let xt: Vec<f64> = row(seg)
        .iter()
        .zip(row(seg + 1))
        .map(|(a, b)| a + w * (b - a))
        .collect();
    let mut terms = Vec::with_capacity(n - seg);
    let mut push = |a: &[f64], b: &[f64], dt: f64| {
        if dt > 0.0 {
            terms.push(dist_sq(a, b) / dt);
        }
    };
    push(&xt, row(seg + 1), times[seg + 1] - t);
    for k in seg + 1..n - 1 {
        push(row(k), row(k + 1), times[k + 1] - times[k]);
    }
    let lhs = compensated_sum(terms);
    let rhs = dist_sq(mix.atom(atom), &xt) / (1.0 - t);
    let slack = 10.0 * rhs / (n - 1) as f64;
    Ok(LowerBoundCheck {
        atom,
        t,
        lhs,
        rhs,
        slack,
        pass: leq(rhs - slack, lhs),
    })
}

/// Trajectory-level integrals related by the energy/density sandwich.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyDensityIntegrals {
    /// `1/2 int |v|^2 dt`.
    pub kpe: f64,
    /// `int -log p_t(x(t)) dt`, trapezoid over the grid times.
    pub neg_log_density: f64,
    /// `kpe / neg_log_density`, absent when the latter is 0.
    pub ratio: Option<f64>,
}

/// Times are clamped into `[T_FLOOR, 1 - T_FLOOR]` for the density.
pub fn integrated_energy_density(
    traj: &Trajectory,
    mix: &MixtureModel,
) -> Result<EnergyDensityIntegrals> {
    if traj.dim != mix.dim() {
        return Err(invalid!("trajectory dim {} vs mixture dim {}", traj.dim, mix.dim()));
    }
    let floor = crate::efm::T_FLOOR;
    let mut ys = Vec::with_capacity(traj.times.len());
    for (j, &t) in traj.times.iter().enumerate() {
        ys.push(-mix.log_density(traj.state(j), t.clamp(floor, 1.0 - floor))?);
    }
    let nld = trapezoid(&traj.times, &ys);
    let kpe = if traj.power.is_empty() { 0.0 } else { traj.kpe };
    Ok(EnergyDensityIntegrals {
        kpe,
        neg_log_density: nld,
        ratio: (nld != 0.0).then(|| kpe / nld),
    })
}

/// Times `0.1, 0.2, ..., 0.9`.
pub fn decile_times() -> Vec<f64> {
    (1..10).map(|k| k as f64 / 10.0).collect()
}

/// The frozen path `x(t) = x` sampled at `ts`.
pub fn frozen_path(x: &[f64], ts: &[f64]) -> Vec<(Vec<f64>, f64)> {
    ts.iter().map(|&t| (x.to_vec(), t)).collect()
}
