//! Measurement layer: density estimates, rank statistics, the memorization
//! fraction and an exact small-sample W2 distance.
//!
//! Point sets are flat row-major buffers with an explicit dimension unless a
//! function is specific to the 2D datasets.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{dist_sq, erfc, ln, pow, sqrt};
use crate::sampler::Trajectory;
use crate::synthdata::{KdeEstimator, LabeledDataset, Point2, Stratum};

pub const DEFAULT_KNN_K: usize = 50;
pub const DEFAULT_TAU_GAP: f64 = 1.0 / 3.0;
pub const DEFAULT_K_MEM: usize = 2;
pub const DENSITY_FLOOR: f64 = 1e-300;
/// Combined sample size up to which Mann-Whitney p-values are exact.
pub const MWU_EXACT_MAX: usize = 20;
pub const MIN_REPORT_TRAJECTORIES: usize = 30;
pub const MAX_W2_POINTS: usize = 1024;

fn check_rows(points: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(invalid!("buffer of length {} is not a multiple of dim {dim}", points.len()));
    }
    Ok(points.len() / dim)
}

/// Volume of the unit ball in `d` dimensions.
pub fn unit_ball_volume(d: usize) -> f64 {
    let (mut even, mut odd) = (1.0, 2.0);
    for k in 2..=d {
        let v = if k % 2 == 0 { &mut even } else { &mut odd };
        *v *= 2.0 * PI / k as f64;
    }
    if d.is_multiple_of(2) { even } else { odd }
}

/// Distances from `q` to every row of `points`, sorted ascending.
fn sorted_distances(points: &[f64], dim: usize, q: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = points.chunks_exact(dim).map(|p| sqrt(dist_sq(p, q))).collect();
    d.sort_unstable_by(f64::total_cmp);
    d
}

/// `k / (n V_d r_k^d)` with `r_k` the distance to the `k`-th nearest training
/// point; `+inf` when `r_k = 0`.
pub fn knn_density(train: &[f64], dim: usize, q: &[f64], k: usize) -> Result<f64> {
    let n = check_rows(train, dim)?;
    if q.len() != dim {
        return Err(invalid!("query has dim {}, expected {dim}", q.len()));
    }
    if k == 0 || k > n {
        return Err(invalid!("k = {k} outside [1, {n}]"));
    }
    let r = sorted_distances(train, dim, q)[k - 1];
    if r == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(k as f64 / (n as f64 * unit_ball_volume(dim) * pow(r, dim as f64)))
}

/// Natural log with the density floored at [`DENSITY_FLOOR`].
pub fn log_density(d: f64) -> f64 {
    ln(d.max(DENSITY_FLOOR))
}

/// Mid-ranks (1-based, ties averaged).
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mid;
        }
        i = j + 1;
    }
    r
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of mid-ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(invalid!("length mismatch {} vs {}", xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(invalid!("spearman needs at least 3 pairs"));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(invalid!("NaN input"));
    }
    pearson(&ranks(xs), &ranks(ys))
}

/// `(#{a_i > b_j} - #{a_i < b_j}) / (|a| |b|)`.
pub fn cliffs_delta(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid!("cliffs_delta needs two non-empty samples"));
    }
    let mut sb = b.to_vec();
    sb.sort_unstable_by(f64::total_cmp);
    let mut net: i64 = 0;
    for x in a {
        let below = sb.partition_point(|y| y < x) as i64;
        let above = (sb.len() - sb.partition_point(|y| y <= x)) as i64;
        net += below - above;
    }
    Ok(net as f64 / (a.len() * b.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MwuResult {
    /// `U` for the first sample: `#{a > b} + #{a = b} / 2`.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// Mann-Whitney U test. Exact permutation distribution of the mid-rank sum
/// when `|a| + |b| <= 20`; otherwise the tie-corrected normal approximation
/// with continuity correction. Two-sided p doubles the smaller tail, capped
/// at 1.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MwuResult> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid!("mann_whitney_u needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(invalid!("NaN input"));
    }
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let r = ranks(&pooled);
    // doubled ranks are integers
    let r2: Vec<u64> = r.iter().map(|x| (2.0 * x) as u64).collect();
    let ra2: u64 = r2[..n1].iter().sum();
    let base2 = (n1 * (n1 + 1)) as u64;
    let u = (ra2 - base2) as f64 / 2.0;
    let n = n1 + n2;
    if n <= MWU_EXACT_MAX {
        let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
        enumerate_rank_sums(&r2, n1, 0, 0, &mut |s| {
            total += 1;
            if s <= ra2 {
                le += 1;
            }
            if s >= ra2 {
                ge += 1;
            }
        });
        let tail = le.min(ge) as f64 / total as f64;
        return Ok(MwuResult {
            u,
            p: (2.0 * tail).min(1.0),
            exact: true,
        });
    }
    let (f1, f2, nf) = (n1 as f64, n2 as f64, n as f64);
    let mut ties = 0.0;
    let mut sorted = pooled.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let var = f1 * f2 / 12.0 * ((nf + 1.0) - ties / (nf * (nf - 1.0)));
    let mean = f1 * f2 / 2.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / sqrt(var);
        erfc(z / core::f64::consts::SQRT_2).min(1.0)
    };
    Ok(MwuResult { u, p, exact: false })
}

/// Calls `f` with the rank sum of every `k`-subset of `ranks[start..]`
/// added to `acc`.
fn enumerate_rank_sums(ranks: &[u64], k: usize, start: usize, acc: u64, f: &mut impl FnMut(u64)) {
    if k == 0 {
        f(acc);
        return;
    }
    for i in start..=ranks.len() - k {
        enumerate_rank_sums(ranks, k - 1, i + 1, acc + ranks[i], f);
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// `(mean a - mean b) / s_pooled` with `n - 1` denominators.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid!("cohens_d needs at least 2 values per group"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = sqrt(((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0));
    if pooled == 0.0 {
        return Err(Error::UndefinedEffect);
    }
    Ok((ma - mb) / pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemSample {
    pub d1: f64,
    pub dk: f64,
    /// `d1 / dk`; 0 when `dk = 0`.
    pub ratio: f64,
    pub memorized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub f_mem: f64,
    pub tau_gap: f64,
    pub k_mem: usize,
    pub samples: Vec<MemSample>,
}

/// Share of generated samples whose gap ratio `d1 / d_{k_mem}` to the
/// training set is strictly below `tau_gap`.
pub fn f_mem(
    generated: &[f64],
    train: &[f64],
    dim: usize,
    tau_gap: f64,
    k_mem: usize,
) -> Result<MemorizationReport> {
    let m = check_rows(generated, dim)?;
    let n = check_rows(train, dim)?;
    if m == 0 {
        return Err(invalid!("no generated samples"));
    }
    if k_mem < 2 || k_mem > n {
        return Err(invalid!("k_mem = {k_mem} outside [2, {n}]"));
    }
    if tau_gap.is_nan() || tau_gap <= 0.0 {
        return Err(invalid!("tau_gap must be > 0"));
    }
    let samples: Vec<MemSample> = generated
        .chunks_exact(dim)
        .map(|g| {
            let d = sorted_distances(train, dim, g);
            let (d1, dk) = (d[0], d[k_mem - 1]);
            let ratio = if dk == 0.0 { 0.0 } else { d1 / dk };
            MemSample {
                d1,
                dk,
                ratio,
                memorized: ratio < tau_gap,
            }
        })
        .collect();
    let hits = samples.iter().filter(|s| s.memorized).count();
    Ok(MemorizationReport {
        f_mem: hits as f64 / m as f64,
        tau_gap,
        k_mem,
        samples,
    })
}

/// Minimum-cost perfect assignment for a square cost matrix (row-major),
/// by shortest augmenting paths with potentials, `O(n^3)`. Returns the
/// column assigned to each row.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(invalid!("cost matrix is not {n} x {n}"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(invalid!("non-finite cost"));
    }
    // 1-based columns; column 0 is a virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    Ok(col_of)
}

/// Exact W2 between two equal-size empirical measures.
pub fn exact_w2(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    let n = check_rows(a, dim)?;
    let m = check_rows(b, dim)?;
    if n != m {
        return Err(invalid!("size mismatch {n} vs {m}"));
    }
    if n == 0 || n > MAX_W2_POINTS {
        return Err(invalid!("W2 needs 1 to {MAX_W2_POINTS} points, got {n}"));
    }
    let cost: Vec<f64> = a
        .chunks_exact(dim)
        .flat_map(|p| b.chunks_exact(dim).map(move |q| dist_sq(p, q)))
        .collect();
    let assign = min_cost_assignment(&cost, n)?;
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(sqrt(total / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityParams {
    pub k: usize,
    pub bandwidth: f64,
}

impl Default for DensityParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_KNN_K,
            bandwidth: KdeEstimator::DEFAULT_BANDWIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpeDensityReport {
    pub n: usize,
    pub rho_knn: f64,
    pub rho_kde: f64,
    /// Sparse-stratum KPE versus dense-stratum KPE.
    pub cliffs_delta: f64,
    pub mwu: MwuResult,
    pub n_sparse: usize,
    pub n_dense: usize,
    pub mean_kpe_sparse: f64,
    pub mean_kpe_dense: f64,
    pub log_knn: Vec<f64>,
    pub log_kde: Vec<f64>,
    /// Stratum of each endpoint's nearest training point.
    pub strata: Vec<Stratum>,
    pub params: DensityParams,
}

/// Relates per-trajectory KPE to the training density at each endpoint.
pub fn kpe_density_stats(
    kpe: &[f64],
    endpoints: &[Point2],
    data: &LabeledDataset,
    params: DensityParams,
) -> Result<KpeDensityReport> {
    let n = kpe.len();
    if endpoints.len() != n {
        return Err(invalid!("{n} KPE values for {} endpoints", endpoints.len()));
    }
    if n < MIN_REPORT_TRAJECTORIES {
        return Err(invalid!(
            "need at least {MIN_REPORT_TRAJECTORIES} trajectories, got {n}"
        ));
    }
    let train = data.flat();
    let kde = KdeEstimator::new(data.points.clone(), params.bandwidth)?;
    let mut log_knn = Vec::with_capacity(n);
    let mut log_kde = Vec::with_capacity(n);
    let mut strata = Vec::with_capacity(n);
    for e in endpoints {
        log_knn.push(log_density(knn_density(&train, 2, &e.as_array(), params.k)?));
        log_kde.push(log_density(kde.density(e)));
        let i = data.nearest(e).ok_or_else(|| invalid!("empty training set"))?;
        strata.push(data.strata[i]);
    }
    let rho_knn = spearman(kpe, &log_knn)?;
    let rho_kde = spearman(kpe, &log_kde)?;
    let (mut sparse, mut dense) = (Vec::new(), Vec::new());
    for (k, s) in kpe.iter().zip(&strata) {
        if s.is_dense() {
            dense.push(*k);
        } else {
            sparse.push(*k);
        }
    }
    if sparse.is_empty() || dense.is_empty() {
        return Err(invalid!(
            "endpoints fall in one density class only ({} sparse, {} dense)",
            sparse.len(),
            dense.len()
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(KpeDensityReport {
        n,
        rho_knn,
        rho_kde,
        cliffs_delta: cliffs_delta(&sparse, &dense)?,
        mwu: mann_whitney_u(&sparse, &dense)?,
        n_sparse: sparse.len(),
        n_dense: dense.len(),
        mean_kpe_sparse: mean(&sparse),
        mean_kpe_dense: mean(&dense),
        log_knn,
        log_kde,
        strata,
        params,
    })
}

/// [`kpe_density_stats`] over integrated 2D trajectories.
pub fn kpe_density_report(
    trajectories: &[Trajectory],
    data: &LabeledDataset,
    params: DensityParams,
) -> Result<KpeDensityReport> {
    if trajectories.iter().any(|t| t.dim != 2) {
        return Err(invalid!("density report needs 2D trajectories"));
    }
    let kpe: Vec<f64> = trajectories.iter().map(|t| t.kpe).collect();
    let ends: Vec<Point2> = trajectories
        .iter()
        .map(|t| Point2::new(t.endpoint()[0], t.endpoint()[1]))
        .collect();
    kpe_density_stats(&kpe, &ends, data, params)
}
