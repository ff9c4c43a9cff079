//! Closed-form empirical flow matching (EFM).
//!
//! A finite training set `{x_i}` and an interpolation schedule `gamma`
//! induce the Gaussian mixture
//!
//! ```text
//! p_t(z) = (1/N) sum_i N(z; gamma(t) x_i, (1 - gamma(t))^2 I)
//! ```
//!
//! whose posterior responsibilities `lambda_i(z, t)` define the
//! regression-optimal velocity
//!
//! ```text
//! u*(z, t) = gamma'(t) / (1 - gamma(t)) * sum_i lambda_i (x_i - z)
//! ```
//!
//! The same field can be written through the mixture score as
//! `alpha(t) grad log p_t(z) + beta(t) z`; [`MixtureModel::general_velocity`]
//! evaluates that form so the two routes can be checked against each other.
//!
//! All routines are dimension-generic. Density, score and responsibilities
//! clamp `t` into `[T_FLOOR, 1 - T_FLOOR]`; the `1 / (1 - t)` factor of the
//! velocity is never clamped.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::field::VelocityField;
use crate::math::{compensated_sum, exp, ln, log_sum_exp, LN_2PI};
use crate::synthdata::Point2;

pub const T_FLOOR: f64 = 1e-9;

fn clamp_t(t: f64) -> f64 {
    t.clamp(T_FLOOR, 1.0 - T_FLOOR)
}

fn check_open_unit(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(invalid!("time {t} outside (0, 1)"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Custom,
}

/// Interpolation schedule `gamma: [0, 1] -> [0, 1]` with its derivative.
#[derive(Debug, Clone, Copy)]
pub struct GammaSchedule {
    kind: ScheduleKind,
    gamma: fn(f64) -> f64,
    gamma_dot: fn(f64) -> f64,
}

fn linear(t: f64) -> f64 {
    t
}

fn one(_: f64) -> f64 {
    1.0
}

impl GammaSchedule {
    pub fn linear() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            gamma: linear,
            gamma_dot: one,
        }
    }

    /// A user schedule; endpoints must satisfy `gamma(0) = 0`, `gamma(1) = 1`
    /// to within `1e-12`.
    pub fn custom(gamma: fn(f64) -> f64, gamma_dot: fn(f64) -> f64) -> Result<Self> {
        let (g0, g1) = (gamma(0.0), gamma(1.0));
        if g0.abs() > 1e-12 || (g1 - 1.0).abs() > 1e-12 {
            return Err(invalid!(
                "schedule endpoints must be gamma(0)=0, gamma(1)=1, got {g0}, {g1}"
            ));
        }
        Ok(Self {
            kind: ScheduleKind::Custom,
            gamma,
            gamma_dot,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn gamma(&self, t: f64) -> f64 {
        (self.gamma)(t)
    }

    pub fn gamma_dot(&self, t: f64) -> f64 {
        (self.gamma_dot)(t)
    }

    /// `sigma_t^2 = (1 - gamma(t))^2`.
    pub fn sigma_sq(&self, t: f64) -> f64 {
        let s = 1.0 - self.gamma(t);
        s * s
    }

    /// Score coefficient `gamma' sigma^2 / (gamma (1 - gamma))`.
    pub fn alpha(&self, t: f64) -> f64 {
        let g = self.gamma(t);
        self.gamma_dot(t) * self.sigma_sq(t) / (g * (1.0 - g))
    }

    /// Drift coefficient `gamma' / gamma`.
    pub fn beta(&self, t: f64) -> f64 {
        self.gamma_dot(t) / self.gamma(t)
    }

    /// `m(t) = beta - alpha / sigma^2 = -gamma' / (1 - gamma)`.
    pub fn m(&self, t: f64) -> f64 {
        -self.gamma_dot(t) / (1.0 - self.gamma(t))
    }
}

/// Uniform mixture of the bridge marginals over a set of atoms.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    dim: usize,
    atoms: Vec<f64>,
    schedule: GammaSchedule,
}

impl MixtureModel {
    /// `atoms` is a flat row-major `N x dim` buffer.
    pub fn new(dim: usize, atoms: Vec<f64>, schedule: GammaSchedule) -> Result<Self> {
        if dim == 0 {
            return Err(invalid!("dimension must be at least 1"));
        }
        if atoms.is_empty() || !atoms.len().is_multiple_of(dim) {
            return Err(invalid!(
                "atom buffer of length {} is not a non-empty multiple of dim {dim}",
                atoms.len()
            ));
        }
        if atoms.iter().any(|x| !x.is_finite()) {
            return Err(invalid!("non-finite atom coordinate"));
        }
        Ok(Self {
            dim,
            atoms,
            schedule,
        })
    }

    pub fn linear(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        Self::new(dim, atoms, GammaSchedule::linear())
    }

    pub fn from_points(points: &[Point2]) -> Result<Self> {
        Self::linear(2, points.iter().flat_map(|p| [p.x, p.y]).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> impl Iterator<Item = &[f64]> {
        self.atoms.chunks_exact(self.dim)
    }

    pub fn schedule(&self) -> &GammaSchedule {
        &self.schedule
    }

    fn check_point(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(invalid!("point has dim {}, mixture has {}", z.len(), self.dim));
        }
        Ok(())
    }

    /// Component mean `gamma(t) x_i`.
    pub fn mean(&self, i: usize, t: f64) -> Vec<f64> {
        let g = self.schedule.gamma(t);
        self.atom(i).iter().map(|x| g * x).collect()
    }

    /// Squared bridge distances `|z - gamma(t) x_i|^2` for every atom.
    pub fn bridge_dist_sq(&self, z: &[f64], t: f64) -> Vec<f64> {
        let g = self.schedule.gamma(t);
        self.atoms()
            .map(|a| a.iter().zip(z).map(|(x, zz)| (zz - g * x) * (zz - g * x)).sum())
            .collect()
    }

    /// Log-weights `-|z - mu_i|^2 / (2 sigma^2)` at an already-clamped time.
    fn log_weights(&self, z: &[f64], t: f64) -> Vec<f64> {
        let two_var = 2.0 * self.schedule.sigma_sq(t);
        let mut w = self.bridge_dist_sq(z, t);
        for x in &mut w {
            *x = -*x / two_var;
        }
        w
    }

    /// Posterior responsibilities `lambda_i(z, t)`.
    pub fn posterior_weights(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        check_open_unit(t)?;
        self.check_point(z)?;
        Ok(softmax(self.log_weights(z, clamp_t(t))))
    }

    /// `log p_t(z)`.
    pub fn log_density(&self, z: &[f64], t: f64) -> Result<f64> {
        check_open_unit(t)?;
        self.check_point(z)?;
        let t = clamp_t(t);
        let var = self.schedule.sigma_sq(t);
        let lw = self.log_weights(z, t);
        Ok(log_sum_exp(&lw)
            - ln(self.len() as f64)
            - 0.5 * self.dim as f64 * (LN_2PI + ln(var)))
    }

    /// `grad_z log p_t(z) = (1/sigma^2) sum_i lambda_i (mu_i - z)`.
    pub fn score(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let lambda = self.posterior_weights(z, t)?;
        let t = clamp_t(t);
        let g = self.schedule.gamma(t);
        let var = self.schedule.sigma_sq(t);
        let mut s = vec![0.0; self.dim];
        for (a, l) in self.atoms().zip(&lambda) {
            for k in 0..self.dim {
                s[k] += l * (g * a[k] - z[k]);
            }
        }
        for x in &mut s {
            *x /= var;
        }
        Ok(s)
    }

    /// Posterior-average form `gamma'/(1-gamma) sum_i lambda_i (x_i - z)`.
    pub fn optimal_velocity(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let lambda = self.posterior_weights(z, t)?;
        let c = self.schedule.gamma_dot(t) / (1.0 - self.schedule.gamma(t));
        let mut v = vec![0.0; self.dim];
        for (a, l) in self.atoms().zip(&lambda) {
            for k in 0..self.dim {
                v[k] += l * (a[k] - z[k]);
            }
        }
        for x in &mut v {
            *x *= c;
        }
        Ok(v)
    }

    /// Score form `alpha(t) grad log p_t(z) + beta(t) z`.
    pub fn general_velocity(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        check_open_unit(t)?;
        let g = self.schedule.gamma(t);
        if !(g > 0.0 && g < 1.0) {
            return Err(invalid!("gamma({t}) = {g} makes the score coefficients singular"));
        }
        if self.schedule.gamma_dot(t) == 0.0 {
            return Err(invalid!("gamma'({t}) = 0"));
        }
        let score = self.score(z, t)?;
        let (alpha, beta) = (self.schedule.alpha(t), self.schedule.beta(t));
        Ok(score
            .iter()
            .zip(z)
            .map(|(s, zz)| alpha * s + beta * zz)
            .collect())
    }

    /// The component holding at least `1 - eps` posterior mass, if any.
    /// Ties resolve to the lowest index.
    pub fn dominance(&self, z: &[f64], t: f64, eps: f64) -> Result<Option<usize>> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(invalid!("dominance parameter {eps} outside (0, 0.5)"));
        }
        let lambda = self.posterior_weights(z, t)?;
        let (best, lmax) = argmax(&lambda);
        Ok((lmax >= 1.0 - eps).then_some(best))
    }
}

fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Max-subtracted softmax, in place.
pub fn softmax(mut logits: Vec<f64>) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for x in &mut logits {
        *x = exp(*x - max);
    }
    let sum = compensated_sum(logits.iter().copied());
    for x in &mut logits {
        *x /= sum;
    }
    logits
}

/// The closed-form EFM field for the linear bridge, optionally restricted to
/// the `k` atoms nearest in bridge distance `|x - t x_i|`.
#[derive(Debug, Clone)]
pub struct EfmField {
    mixture: MixtureModel,
    neighbors: Option<usize>,
}

impl EfmField {
    pub fn new(mixture: MixtureModel, neighbors: Option<usize>) -> Result<Self> {
        if mixture.schedule().kind() != ScheduleKind::Linear {
            return Err(invalid!("the EFM field is defined for the linear schedule"));
        }
        if let Some(k) = neighbors {
            if k == 0 || k > mixture.len() {
                return Err(invalid!(
                    "neighbor count {k} outside [1, {}]",
                    mixture.len()
                ));
            }
        }
        Ok(Self { mixture, neighbors })
    }

    pub fn from_points(points: &[Point2], neighbors: Option<usize>) -> Result<Self> {
        Self::new(MixtureModel::from_points(points)?, neighbors)
    }

    pub fn mixture(&self) -> &MixtureModel {
        &self.mixture
    }

    pub fn neighbors(&self) -> Option<usize> {
        self.neighbors
    }

    /// Responsibilities after neighbor truncation, as `(atom index, weight)`.
    pub fn weights(&self, x: &[f64], t: f64) -> Result<Vec<(usize, f64)>> {
        check_open_unit(t)?;
        self.truncated_weights(x, t)
    }

    fn truncated_weights(&self, x: &[f64], t: f64) -> Result<Vec<(usize, f64)>> {
        if !(0.0..1.0).contains(&t) {
            return Err(invalid!("time {t} outside [0, 1)"));
        }
        self.mixture.check_point(x)?;
        let tc = clamp_t(t);
        let logits = self.mixture.log_weights(x, tc);
        let mut idx: Vec<usize> = (0..logits.len()).collect();
        if let Some(k) = self.neighbors {
            if k < idx.len() {
                // largest logit = smallest bridge distance
                idx.select_nth_unstable_by(k - 1, |&a, &b| logits[b].total_cmp(&logits[a]));
                idx.truncate(k);
                idx.sort_unstable();
            }
        }
        let kept: Vec<f64> = idx.iter().map(|&i| logits[i]).collect();
        Ok(idx.into_iter().zip(softmax(kept)).collect())
    }

    /// `sum_i lambda_i (x_i - x) / (1 - t)` for `t` in `(0, 1)`.
    pub fn velocity_at(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_open_unit(t)?;
        self.eval(x, t)
    }

    fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let w = self.truncated_weights(x, t)?;
        let d = self.mixture.dim();
        let mut v = vec![0.0; d];
        for (i, l) in w {
            let a = self.mixture.atom(i);
            for k in 0..d {
                v[k] += l * (a[k] - x[k]);
            }
        }
        let inv = 1.0 / (1.0 - t);
        for x in &mut v {
            *x *= inv;
        }
        Ok(v)
    }
}

/// As a solver field the EFM velocity is also evaluated at `t = 0`, where the
/// responsibilities are taken at the clamped time `T_FLOOR`.
impl VelocityField for EfmField {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.eval(x, t)?);
        Ok(())
    }
}
