//! Fixed-step ODE sampling with kinetic path energy accounting.
//!
//! A trajectory starts from `x0 ~ N(0, I)` at `t = 0` and follows
//! `dx/dt = v(x, t)` on a uniform grid over `[0, 1 - delta_cut]`. Each step
//! records the power `|v|^2` of the evaluation that moves the state (left
//! endpoint for Euler, midpoint for the midpoint rule) and accumulates
//! `KPE = 1/2 sum power_j dt`, split into early and late parts at `tau_split`.
//!
//! [`KtsSchedule`] and [`Shaped`] implement kinetic trajectory shaping, the
//! training-free gain `v~(x, t) = eta(t) v(x, t)`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::VelocityField;
use crate::math::{exp, norm_sq};
use crate::rng::{self, TRAJECTORY_BASE};

pub const DEFAULT_TAU_SPLIT: f64 = 0.6;
pub const DEFAULT_K: f64 = 3.0;
pub const EFM_DELTA_CUT: f64 = 1e-3;

/// Launch/landing gain parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KtsSchedule {
    pub alpha0: f64,
    pub beta0: f64,
    pub k: f64,
    pub tau_split: f64,
}

impl Default for KtsSchedule {
    fn default() -> Self {
        Self {
            alpha0: 0.0,
            beta0: 0.0,
            k: DEFAULT_K,
            tau_split: DEFAULT_TAU_SPLIT,
        }
    }
}

impl KtsSchedule {
    pub fn new(alpha0: f64, beta0: f64) -> Result<Self> {
        let s = Self {
            alpha0,
            beta0,
            ..Self::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) {
            return Err(invalid!("alpha0 must be finite and >= 0, got {}", self.alpha0));
        }
        if !(self.beta0 >= 0.0 && self.beta0.is_finite()) {
            return Err(invalid!("beta0 must be finite and >= 0, got {}", self.beta0));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(invalid!("k must be finite and > 0, got {}", self.k));
        }
        if !(self.tau_split > 0.0 && self.tau_split < 1.0) {
            return Err(invalid!("tau_split must lie in (0, 1), got {}", self.tau_split));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.alpha0 == 0.0 && self.beta0 == 0.0
    }

    /// The gain `eta(t)`.
    pub fn eta(&self, t: f64) -> f64 {
        if t < self.tau_split {
            1.0 + self.alpha0 * (1.0 - t / self.tau_split).max(0.0)
        } else {
            1.0 - self.beta0 * (exp(self.k * (t - self.tau_split)) - 1.0)
        }
    }
}

/// `eta(t) * base(x, t)`.
#[derive(Debug, Clone)]
pub struct Shaped<F> {
    base: F,
    schedule: KtsSchedule,
}

impl<F: VelocityField> Shaped<F> {
    pub fn new(base: F, schedule: KtsSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self { base, schedule })
    }

    pub fn base(&self) -> &F {
        &self.base
    }

    pub fn schedule(&self) -> &KtsSchedule {
        &self.schedule
    }
}

impl<F: VelocityField> VelocityField for Shaped<F> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.base.velocity(x, t, out)?;
        let eta = self.schedule.eta(t);
        out.iter_mut().for_each(|v| *v *= eta);
        Ok(())
    }

    fn velocity_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.base.velocity_batch(xs, t, out)?;
        let eta = self.schedule.eta(t);
        out.iter_mut().for_each(|v| *v *= eta);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Euler,
    Midpoint,
}

impl SolverMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverMethod::Euler => "euler",
            SolverMethod::Midpoint => "midpoint",
        }
    }
}

impl fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SolverMethod::Euler),
            "midpoint" => Ok(SolverMethod::Midpoint),
            _ => Err(invalid!("unknown solver {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub steps: usize,
    pub delta_cut: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Euler,
            steps: 100,
            delta_cut: 0.0,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid!("solver needs at least one step"));
        }
        if !(0.0..0.5).contains(&self.delta_cut) {
            return Err(invalid!("delta_cut must lie in [0, 0.5), got {}", self.delta_cut));
        }
        Ok(())
    }

    pub fn t_end(&self) -> f64 {
        1.0 - self.delta_cut
    }

    pub fn dt(&self) -> f64 {
        self.t_end() / self.steps as f64
    }

    /// Grid time `t_j`; `time(steps)` is exactly `1 - delta_cut`.
    pub fn time(&self, j: usize) -> f64 {
        if j == self.steps {
            self.t_end()
        } else {
            self.t_end() * j as f64 / self.steps as f64
        }
    }

    /// Time of the evaluation that defines step `j`.
    pub fn eval_time(&self, j: usize) -> f64 {
        match self.method {
            SolverMethod::Euler => self.time(j),
            SolverMethod::Midpoint => self.time(j) + 0.5 * self.dt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub index: usize,
    pub method: SolverMethod,
    pub steps: usize,
    pub delta_cut: f64,
    pub dt: f64,
    pub tau_split: f64,
    pub seed: u64,
}

/// One integrated path with its energy trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    /// Grid times `t_0 .. t_N`.
    pub times: Vec<f64>,
    /// `(N + 1) x dim` states.
    pub states: Vec<f64>,
    /// Time of each step's defining evaluation.
    pub eval_times: Vec<f64>,
    /// `N x dim` defining velocities.
    pub velocities: Vec<f64>,
    /// `|v|^2` per step.
    pub power: Vec<f64>,
    /// Cumulative KPE at each grid time; `cum_kpe[0] = 0`.
    pub cum_kpe: Vec<f64>,
    pub kpe: f64,
    pub kpe_early: f64,
    pub kpe_late: f64,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.power.len()
    }

    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    pub fn start(&self) -> &[f64] {
        self.state(0)
    }

    pub fn endpoint(&self) -> &[f64] {
        self.state(self.steps())
    }

    /// `(t, power)` at the largest power; first occurrence on ties.
    pub fn peak_power(&self) -> (f64, f64) {
        let mut best = (0.0, f64::NEG_INFINITY);
        for (&t, &p) in self.eval_times.iter().zip(&self.power) {
            if p > best.1 {
                best = (t, p);
            }
        }
        best
    }
}

/// Lockstep state of a batch of trajectories on a common grid.
struct Recorder {
    dim: usize,
    dt: f64,
    tau: f64,
    states: Vec<Vec<f64>>,
    velocities: Vec<Vec<f64>>,
    power: Vec<Vec<f64>>,
}

impl Recorder {
    fn new(x0: &[f64], dim: usize, steps: usize, dt: f64, tau: f64) -> Self {
        let m = x0.len() / dim;
        let states = x0
            .chunks_exact(dim)
            .map(|x| {
                let mut s = Vec::with_capacity((steps + 1) * dim);
                s.extend_from_slice(x);
                s
            })
            .collect();
        Self {
            dim,
            dt,
            tau,
            states,
            velocities: vec![Vec::with_capacity(steps * dim); m],
            power: vec![Vec::with_capacity(steps); m],
        }
    }

    fn retain_rows(&mut self, ok: &[bool]) {
        let mut it = ok.iter();
        self.states.retain(|_| *it.next().unwrap());
        let mut it = ok.iter();
        self.velocities.retain(|_| *it.next().unwrap());
        let mut it = ok.iter();
        self.power.retain(|_| *it.next().unwrap());
    }

    fn finish(self, cfg: &SolverConfig, index: &[usize]) -> Vec<Trajectory> {
        let times: Vec<f64> = (0..=cfg.steps).map(|j| cfg.time(j)).collect();
        let eval_times: Vec<f64> = (0..cfg.steps).map(|j| cfg.eval_time(j)).collect();
        let (dim, dt, tau) = (self.dim, self.dt, self.tau);
        self.states
            .into_iter()
            .zip(self.velocities)
            .zip(self.power)
            .zip(index)
            .map(|(((states, velocities), power), &i)| {
                let mut cum_kpe = Vec::with_capacity(power.len() + 1);
                cum_kpe.push(0.0);
                let (mut early, mut late, mut acc) = (0.0, 0.0, 0.0);
                for (j, p) in power.iter().enumerate() {
                    let e = 0.5 * p * dt;
                    acc += e;
                    cum_kpe.push(acc);
                    if times[j] < tau {
                        early += e;
                    } else {
                        late += e;
                    }
                }
                Trajectory {
                    dim,
                    times: times.clone(),
                    states,
                    eval_times: eval_times.clone(),
                    velocities,
                    power,
                    cum_kpe,
                    kpe: early + late,
                    kpe_early: early,
                    kpe_late: late,
                    meta: TrajectoryMeta {
                        index: i,
                        method: cfg.method,
                        steps: cfg.steps,
                        delta_cut: cfg.delta_cut,
                        dt,
                        tau_split: tau,
                        seed: cfg.seed,
                    },
                }
            })
            .collect()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(invalid!("tau_split must lie in (0, 1), got {tau}"));
    }
    Ok(())
}

/// Integrates every row of `x0` in lockstep. Rows that turn non-finite are
/// dropped and reported as `(row, Diverged { step })`.
fn integrate_rows<F: VelocityField + ?Sized>(
    field: &F,
    x0: &[f64],
    cfg: &SolverConfig,
    tau: f64,
) -> Result<(Recorder, Vec<(usize, Error)>)> {
    cfg.validate()?;
    check_tau(tau)?;
    let d = field.dim();
    if d == 0 || !x0.len().is_multiple_of(d) {
        return Err(invalid!("initial states do not match field dimension {d}"));
    }
    let m = x0.len() / d;
    let dt = cfg.dt();
    let mut rec = Recorder::new(x0, d, cfg.steps, dt, tau);
    let mut failures = Vec::new();
    let mut active: Vec<usize> = Vec::with_capacity(m);
    for (r, x) in x0.chunks_exact(d).enumerate() {
        if x.iter().all(|v| v.is_finite()) {
            active.push(r);
        } else {
            failures.push((r, Error::Diverged { step: 0 }));
        }
    }
    let mut cur = vec![0.0; m * d];
    let mut k1 = vec![0.0; m * d];
    let mut k2 = vec![0.0; m * d];
    for j in 0..cfg.steps {
        if active.is_empty() {
            break;
        }
        let n = active.len() * d;
        for (slot, &r) in active.iter().enumerate() {
            cur[slot * d..(slot + 1) * d].copy_from_slice(&rec.states[r][j * d..(j + 1) * d]);
        }
        let t = cfg.time(j);
        field.velocity_batch(&cur[..n], t, &mut k1[..n])?;
        let drive = match cfg.method {
            SolverMethod::Euler => &k1,
            SolverMethod::Midpoint => {
                let mid: Vec<f64> = cur[..n]
                    .iter()
                    .zip(&k1[..n])
                    .map(|(x, v)| x + 0.5 * dt * v)
                    .collect();
                if mid.iter().all(|v| v.is_finite()) {
                    field.velocity_batch(&mid, t + 0.5 * dt, &mut k2[..n])?;
                } else {
                    // fall through to the per-row divergence check below
                    k2[..n].copy_from_slice(&mid);
                }
                &k2
            }
        };
        let mut still = Vec::with_capacity(active.len());
        for (slot, &r) in active.iter().enumerate() {
            let v = &drive[slot * d..(slot + 1) * d];
            let x = &cur[slot * d..(slot + 1) * d];
            let next: Vec<f64> = x.iter().zip(v).map(|(x, v)| x + v * dt).collect();
            let p = norm_sq(v);
            if !(p.is_finite() && next.iter().all(|x| x.is_finite())) {
                failures.push((r, Error::Diverged { step: j }));
                continue;
            }
            rec.velocities[r].extend_from_slice(v);
            rec.power[r].push(p);
            rec.states[r].extend_from_slice(&next);
            still.push(r);
        }
        active = still;
    }
    failures.sort_by_key(|f| f.0);
    Ok((rec, failures))
}

/// Integrates one trajectory from `x0`.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    x0: &[f64],
    cfg: &SolverConfig,
    tau_split: f64,
) -> Result<Trajectory> {
    if x0.len() != field.dim() {
        return Err(invalid!("x0 has dim {}, field has {}", x0.len(), field.dim()));
    }
    let (rec, failures) = integrate_rows(field, x0, cfg, tau_split)?;
    if let Some((_, e)) = failures.into_iter().next() {
        return Err(e);
    }
    Ok(rec.finish(cfg, &[0]).remove(0))
}

/// `x0 ~ N(0, I)` for trajectory `index`, drawn from its own substream.
pub fn initial_state(seed: u64, index: usize, dim: usize) -> Vec<f64> {
    let mut rng = rng::stream(seed, TRAJECTORY_BASE + index as u64);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// Successful trajectories in index order.
    pub trajectories: Vec<Trajectory>,
    /// Trajectories that diverged, by index.
    pub failures: Vec<(usize, Error)>,
}

/// Samples `m` trajectories with initial states from `cfg.seed`.
pub fn sample_batch<F: VelocityField + ?Sized>(
    field: &F,
    m: usize,
    cfg: &SolverConfig,
    tau_split: f64,
) -> Result<BatchOutcome> {
    if m == 0 {
        return Err(invalid!("batch size must be at least 1"));
    }
    let d = field.dim();
    let x0: Vec<f64> = (0..m).flat_map(|i| initial_state(cfg.seed, i, d)).collect();
    let (mut rec, failures) = integrate_rows(field, &x0, cfg, tau_split)?;
    let mut ok = vec![true; m];
    for (i, _) in &failures {
        ok[*i] = false;
    }
    let keep: Vec<usize> = (0..m).filter(|&i| ok[i]).collect();
    rec.retain_rows(&ok);
    Ok(BatchOutcome {
        trajectories: rec.finish(cfg, &keep),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FnField;
    use proptest::prelude::*;

    fn euler(steps: usize) -> SolverConfig {
        SolverConfig {
            steps,
            ..SolverConfig::default()
        }
    }

    fn midpoint(steps: usize) -> SolverConfig {
        SolverConfig {
            method: SolverMethod::Midpoint,
            steps,
            ..SolverConfig::default()
        }
    }

    fn decay() -> FnField<impl Fn(&[f64], f64, &mut [f64])> {
        FnField::new(2, |x: &[f64], _t, out: &mut [f64]| {
            out[0] = -x[0];
            out[1] = -x[1];
        })
    }

    #[test]
    fn eta_values() {
        let s = KtsSchedule::new(0.3, 0.2).unwrap();
        assert_eq!(s.eta(0.0), 1.3);
        assert_eq!(s.eta(0.6), 1.0);
        assert!((s.eta(0.6 - 1e-12) - 1.0).abs() < 1e-11);
        let land = KtsSchedule::new(0.0, 0.01).unwrap();
        assert!((land.eta(1.0) - 0.976_798_830_772_634_5).abs() < 1e-12);
        assert!((land.eta(1.0) - 0.97680).abs() < 5e-6);
    }

    #[test]
    fn schedule_validation() {
        assert!(KtsSchedule::new(-0.1, 0.0).is_err());
        assert!(KtsSchedule::new(0.0, f64::NAN).is_err());
        let bad = KtsSchedule {
            tau_split: 1.0,
            ..KtsSchedule::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn constant_field() {
        let f = FnField::new(2, |_: &[f64], _t, out: &mut [f64]| {
            out[0] = 3.0;
            out[1] = 4.0;
        });
        for cfg in [euler(7), midpoint(13)] {
            let tr = integrate(&f, &[0.5, -1.0], &cfg, 0.6).unwrap();
            assert!((tr.kpe - 12.5).abs() < 1e-12);
            assert!((tr.endpoint()[0] - 3.5).abs() < 1e-12);
            assert!((tr.endpoint()[1] - 3.0).abs() < 1e-12);
            assert!((tr.cum_kpe.last().unwrap() - 12.5).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_field() {
        let f = FnField::new(2, |_: &[f64], _t, out: &mut [f64]| out.fill(0.0));
        let tr = integrate(&f, &[0.2, 0.1], &euler(10), 0.6).unwrap();
        assert_eq!(tr.kpe, 0.0);
        assert!(tr.states.chunks(2).all(|s| s == [0.2, 0.1]));
    }

    #[test]
    fn linear_decay_matches_closed_form() {
        let tr = integrate(&decay(), &[1.0, 0.0], &euler(1000), 0.6).unwrap();
        assert!((tr.endpoint()[0] - (-1.0f64).exp()).abs() < 1e-3);
        assert_eq!(tr.endpoint()[1], 0.0);
        let kpe = (1.0 - (-2.0f64).exp()) / 4.0;
        assert!((tr.kpe - kpe).abs() < 1e-3);
        assert!((kpe - 0.21617).abs() < 1e-5);
    }

    fn endpoint_error(cfg: SolverConfig) -> f64 {
        let tr = integrate(&decay(), &[1.0, 0.0], &cfg, 0.6).unwrap();
        (tr.endpoint()[0] - (-1.0f64).exp()).abs()
    }

    #[test]
    fn convergence_orders() {
        for n in [50, 100, 200] {
            let r = endpoint_error(euler(n)) / endpoint_error(euler(2 * n));
            assert!((1.6..=2.4).contains(&r), "euler ratio {r}");
            let r = endpoint_error(midpoint(n)) / endpoint_error(midpoint(2 * n));
            assert!((2.8..=5.2).contains(&r), "midpoint ratio {r}");
        }
    }

    #[test]
    fn kpe_split_and_additivity() {
        let f = FnField::new(1, |x: &[f64], t, out: &mut [f64]| out[0] = x[0] * t + 1.0);
        let cfg = euler(20);
        let tr = integrate(&f, &[0.3], &cfg, 0.5).unwrap();
        assert!((tr.kpe - (tr.kpe_early + tr.kpe_late)).abs() < 1e-12);
        // grid contains s = 0.5 at j = 10
        let early: f64 = tr.power[..10].iter().map(|p| 0.5 * p * cfg.dt()).sum();
        assert!((tr.kpe_early - early).abs() < 1e-12);
        assert!((tr.cum_kpe[10] - tr.kpe_early).abs() < 1e-12);
    }

    #[test]
    fn midpoint_records_midpoint_evaluation() {
        let f = FnField::new(1, |_: &[f64], t, out: &mut [f64]| out[0] = t);
        let cfg = midpoint(4);
        let tr = integrate(&f, &[0.0], &cfg, 0.6).unwrap();
        assert_eq!(tr.eval_times, vec![0.125, 0.375, 0.625, 0.875]);
        for (t, p) in tr.eval_times.iter().zip(&tr.power) {
            assert!((p - t * t).abs() < 1e-15);
        }
        // exact for linear-in-t fields
        assert!((tr.endpoint()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn delta_cut_grid() {
        let cfg = SolverConfig {
            delta_cut: 1e-3,
            steps: 100,
            ..SolverConfig::default()
        };
        assert_eq!(cfg.time(100), 0.999);
        assert!((cfg.dt() - 0.00999).abs() < 1e-15);
        assert!(SolverConfig { delta_cut: 0.5, ..cfg }.validate().is_err());
        assert!(SolverConfig { steps: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let f = FnField::new(1, |x: &[f64], t, out: &mut [f64]| {
            out[0] = if t >= 0.5 { f64::INFINITY } else { x[0] };
        });
        let err = integrate(&f, &[1.0], &euler(10), 0.6).unwrap_err();
        assert_eq!(err, Error::Diverged { step: 5 });
    }

    #[test]
    fn batch_failures_are_collected() {
        let f = FnField::new(1, |x: &[f64], _t, out: &mut [f64]| {
            out[0] = if x[0] > 0.0 { f64::NAN } else { -1.0 };
        });
        let out = sample_batch(&f, 20, &euler(5), 0.6).unwrap();
        assert_eq!(out.trajectories.len() + out.failures.len(), 20);
        assert!(!out.failures.is_empty() && !out.trajectories.is_empty());
        for tr in &out.trajectories {
            assert!(initial_state(0, tr.meta.index, 1)[0] <= 0.0);
            assert_eq!(tr.start(), initial_state(0, tr.meta.index, 1).as_slice());
        }
        for (i, e) in &out.failures {
            assert!(initial_state(0, *i, 1)[0] > 0.0);
            assert_eq!(*e, Error::Diverged { step: 0 });
        }
    }

    #[test]
    fn batch_matches_single_integration() {
        let f = FnField::new(2, |x: &[f64], t, out: &mut [f64]| {
            out[0] = (x[1] * t).sin() - x[0];
            out[1] = x[0] * x[0] * 0.1;
        });
        let cfg = SolverConfig {
            method: SolverMethod::Midpoint,
            steps: 30,
            delta_cut: 0.0,
            seed: 9,
        };
        let batch = sample_batch(&f, 5, &cfg, 0.6).unwrap();
        assert!(batch.failures.is_empty());
        for (i, tr) in batch.trajectories.iter().enumerate() {
            let single = integrate(&f, &initial_state(9, i, 2), &cfg, 0.6).unwrap();
            assert_eq!(tr.states, single.states);
            assert_eq!(tr.kpe, single.kpe);
            assert_eq!(tr.meta.index, i);
        }
        let again = sample_batch(&f, 5, &cfg, 0.6).unwrap();
        assert_eq!(batch.trajectories, again.trajectories);
        let one = sample_batch(&f, 1, &cfg, 0.6).unwrap();
        assert_eq!(one.trajectories[0], batch.trajectories[0]);
        assert!(sample_batch(&f, 0, &cfg, 0.6).is_err());
    }

    #[test]
    fn identity_gain_is_bit_identical() {
        let f = FnField::new(2, |x: &[f64], t, out: &mut [f64]| {
            out[0] = x[1] / (1.1 - t);
            out[1] = -x[0] * 0.3;
        });
        let shaped = Shaped::new(&f, KtsSchedule::default()).unwrap();
        let cfg = euler(40);
        let a = sample_batch(&f, 8, &cfg, 0.6).unwrap();
        let b = sample_batch(&shaped, 8, &cfg, 0.6).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
    }

    #[test]
    fn shaped_scales_zero_to_zero() {
        let f = FnField::new(2, |_: &[f64], _t, out: &mut [f64]| out.fill(0.0));
        let s = Shaped::new(f, KtsSchedule::new(0.5, 0.5).unwrap()).unwrap();
        let mut out = [1.0; 2];
        s.velocity(&[1.0, 2.0], 0.2, &mut out).unwrap();
        assert_eq!(out, [0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn gain_scales_power(
            a in 0.0f64..0.1, b in 0.0f64..0.1, t in 0.0f64..1.0,
            x in -3.0f64..3.0, y in -3.0f64..3.0,
        ) {
            let f = FnField::new(2, |x: &[f64], t, out: &mut [f64]| {
                out[0] = x[0] * (1.0 + t);
                out[1] = x[1] - t;
            });
            let sch = KtsSchedule::new(a, b).unwrap();
            let s = Shaped::new(&f, sch).unwrap();
            let (mut v, mut w) = ([0.0; 2], [0.0; 2]);
            f.velocity(&[x, y], t, &mut v).unwrap();
            s.velocity(&[x, y], t, &mut w).unwrap();
            let eta = sch.eta(t);
            prop_assert!((norm_sq(&w) - eta * eta * norm_sq(&v)).abs() <= 1e-12 * (1.0 + norm_sq(&v)));
            if t >= sch.tau_split {
                prop_assert!(eta <= 1.0);
            }
        }

        #[test]
        fn trajectory_invariants(seed in 0u64..1000, steps in 1usize..40, mid in any::<bool>()) {
            let f = FnField::new(2, |x: &[f64], t, out: &mut [f64]| {
                out[0] = x[1] - t;
                out[1] = -x[0] * 0.5;
            });
            let cfg = SolverConfig {
                method: if mid { SolverMethod::Midpoint } else { SolverMethod::Euler },
                steps,
                delta_cut: 0.0,
                seed,
            };
            let tr = sample_batch(&f, 1, &cfg, 0.6).unwrap().trajectories.remove(0);
            prop_assert_eq!(tr.states.len(), 2 * (steps + 1));
            prop_assert!(tr.kpe >= 0.0 && tr.power.iter().all(|p| *p >= 0.0));
            prop_assert!((tr.kpe - tr.kpe_early - tr.kpe_late).abs() < 1e-12);
            prop_assert!(tr.cum_kpe.windows(2).all(|w| w[1] >= w[0]));
        }
    }
}
