//! Density-stratified 2D toy datasets and a Gaussian KDE.
//!
//! Each dataset is a fixed partition of `n` into strata; each stratum (or
//! cluster group) draws from its own RNG stream, see [`crate::rng`].
//! Counts are `floor(fraction * n)` per group in listed order and any
//! remainder goes to the first group.

use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{cos, exp, sin};
use crate::rng::{self, StreamRng};

pub const MIN_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist_sq(&self, other: &Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(a: [f64; 2]) -> Self {
        Self::new(a[0], a[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    DenseCore,
    SparseRing,
    SparseCenter,
    DenseCluster,
    DenseBand,
    SparseBand,
}

impl Stratum {
    pub const ALL: [Stratum; 6] = [
        Stratum::DenseCore,
        Stratum::SparseRing,
        Stratum::SparseCenter,
        Stratum::DenseCluster,
        Stratum::DenseBand,
        Stratum::SparseBand,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stratum::DenseCore => "dense_core",
            Stratum::SparseRing => "sparse_ring",
            Stratum::SparseCenter => "sparse_center",
            Stratum::DenseCluster => "dense_cluster",
            Stratum::DenseBand => "dense_band",
            Stratum::SparseBand => "sparse_band",
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(
            self,
            Stratum::DenseCore | Stratum::DenseCluster | Stratum::DenseBand
        )
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stratum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stratum::ALL
            .iter()
            .copied()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| invalid!("unknown stratum label {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    DenseSparse,
    MultiscaleClusters,
    Sandwich,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 3] = [
        DatasetKind::DenseSparse,
        DatasetKind::MultiscaleClusters,
        DatasetKind::Sandwich,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::DenseSparse => "dense_sparse",
            DatasetKind::MultiscaleClusters => "multiscale_clusters",
            DatasetKind::Sandwich => "sandwich",
        }
    }

    pub fn allows(&self, stratum: Stratum) -> bool {
        use Stratum::*;
        match self {
            DatasetKind::DenseSparse => matches!(stratum, DenseCore | SparseRing),
            DatasetKind::MultiscaleClusters => matches!(stratum, SparseCenter | DenseCluster),
            DatasetKind::Sandwich => matches!(stratum, DenseBand | SparseBand),
        }
    }

    /// Group fractions in tenths, in generation order.
    fn tenths(&self) -> &'static [usize] {
        match self {
            DatasetKind::DenseSparse => &[6, 4],
            DatasetKind::MultiscaleClusters => &[2, 2, 2, 2, 2],
            DatasetKind::Sandwich => &[6, 2, 2],
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid!("unknown dataset kind {s:?}"))
    }
}

/// Per-group point counts for `kind` at size `n`.
///
/// Defined for any `n` (the generators additionally require
/// `n >= MIN_POINTS`).
pub fn group_counts(kind: DatasetKind, n: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = kind.tenths().iter().map(|t| n * t / 10).collect();
    let assigned: usize = counts.iter().sum();
    counts[0] += n - assigned;
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub kind: DatasetKind,
    pub seed: u64,
    pub points: Vec<Point2>,
    pub strata: Vec<Stratum>,
}

impl LabeledDataset {
    /// Builds a dataset from already-labelled points (e.g. read from disk),
    /// checking the labelling invariants.
    pub fn from_parts(
        kind: DatasetKind,
        seed: u64,
        points: Vec<Point2>,
        strata: Vec<Stratum>,
    ) -> Result<Self> {
        if points.len() != strata.len() {
            return Err(invalid!(
                "{} points but {} stratum labels",
                points.len(),
                strata.len()
            ));
        }
        if let Some(bad) = strata.iter().find(|s| !kind.allows(**s)) {
            return Err(invalid!("label {bad} is not legal for dataset {kind}"));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(invalid!("point {i} is not finite"));
        }
        Ok(Self {
            kind,
            seed,
            points,
            strata,
        })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count(&self, stratum: Stratum) -> usize {
        self.strata.iter().filter(|s| **s == stratum).count()
    }

    /// Points as a flat row-major `n x 2` buffer.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    /// Index of the nearest training point to `q` (lowest index on ties).
    pub fn nearest(&self, q: &Point2) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.points.iter().enumerate() {
            let d = p.dist_sq(q);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }
}

pub fn generate(kind: DatasetKind, n: usize, seed: u64) -> Result<LabeledDataset> {
    match kind {
        DatasetKind::DenseSparse => gen_dense_sparse(n, seed),
        DatasetKind::MultiscaleClusters => gen_multiscale_clusters(n, seed),
        DatasetKind::Sandwich => gen_sandwich(n, seed),
    }
}

fn check_n(n: usize) -> Result<()> {
    if n < MIN_POINTS {
        return Err(invalid!("dataset size {n} is below the minimum {MIN_POINTS}"));
    }
    Ok(())
}

fn gaussian(rng: &mut StreamRng, center: Point2, sigma: f64) -> Point2 {
    let zx: f64 = rng.sample(StandardNormal);
    let zy: f64 = rng.sample(StandardNormal);
    Point2::new(center.x + sigma * zx, center.y + sigma * zy)
}

fn uniform(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

struct Builder {
    points: Vec<Point2>,
    strata: Vec<Stratum>,
}

impl Builder {
    fn with_capacity(n: usize) -> Self {
        Self {
            points: Vec::with_capacity(n),
            strata: Vec::with_capacity(n),
        }
    }

    fn push_group(
        &mut self,
        seed: u64,
        group: usize,
        count: usize,
        stratum: Stratum,
        mut draw: impl FnMut(&mut StreamRng) -> Point2,
    ) {
        let mut rng = rng::stream(seed, group as u64);
        for _ in 0..count {
            self.points.push(draw(&mut rng));
            self.strata.push(stratum);
        }
    }

    fn finish(self, kind: DatasetKind, seed: u64) -> LabeledDataset {
        LabeledDataset {
            kind,
            seed,
            points: self.points,
            strata: self.strata,
        }
    }
}

/// Dense Gaussian core (60%, sigma 0.15) plus a sparse ring (40%): radius
/// uniform on `[2.3, 2.7]`, angle uniform, then `N(0, 0.5^2 I)` jitter.
pub fn gen_dense_sparse(n: usize, seed: u64) -> Result<LabeledDataset> {
    check_n(n)?;
    let counts = group_counts(DatasetKind::DenseSparse, n);
    let mut b = Builder::with_capacity(n);
    b.push_group(seed, 0, counts[0], Stratum::DenseCore, |rng| {
        gaussian(rng, Point2::default(), 0.15)
    });
    b.push_group(seed, 1, counts[1], Stratum::SparseRing, |rng| {
        let r = uniform(rng, 2.3, 2.7);
        let theta = uniform(rng, 0.0, 2.0 * PI);
        gaussian(rng, Point2::new(r * cos(theta), r * sin(theta)), 0.5)
    });
    Ok(b.finish(DatasetKind::DenseSparse, seed))
}

pub const CLUSTER_CENTERS: [Point2; 4] = [
    Point2::new(2.0, 0.0),
    Point2::new(0.0, 2.0),
    Point2::new(-2.0, 0.0),
    Point2::new(0.0, -2.0),
];

/// Sparse central Gaussian (20%, sigma 0.6) plus four tight clusters (20%
/// each, sigma 0.08) at `(+-2, 0)`, `(0, +-2)`.
pub fn gen_multiscale_clusters(n: usize, seed: u64) -> Result<LabeledDataset> {
    check_n(n)?;
    let counts = group_counts(DatasetKind::MultiscaleClusters, n);
    let mut b = Builder::with_capacity(n);
    b.push_group(seed, 0, counts[0], Stratum::SparseCenter, |rng| {
        gaussian(rng, Point2::default(), 0.6)
    });
    for (g, center) in CLUSTER_CENTERS.iter().enumerate() {
        b.push_group(seed, g + 1, counts[g + 1], Stratum::DenseCluster, |rng| {
            gaussian(rng, *center, 0.08)
        });
    }
    Ok(b.finish(DatasetKind::MultiscaleClusters, seed))
}

/// Dense middle band (60%) and two sparse outer bands (20% each, top then
/// bottom), all uniform boxes with Gaussian jitter.
pub fn gen_sandwich(n: usize, seed: u64) -> Result<LabeledDataset> {
    check_n(n)?;
    let counts = group_counts(DatasetKind::Sandwich, n);
    let mut b = Builder::with_capacity(n);
    let band = |y_lo: f64, y_hi: f64, sigma: f64| {
        move |rng: &mut StreamRng| {
            let x = uniform(rng, -3.0, 3.0);
            let y = uniform(rng, y_lo, y_hi);
            gaussian(rng, Point2::new(x, y), sigma)
        }
    };
    b.push_group(seed, 0, counts[0], Stratum::DenseBand, band(-0.3, 0.3, 0.1));
    b.push_group(seed, 1, counts[1], Stratum::SparseBand, band(1.5, 2.5, 0.3));
    b.push_group(seed, 2, counts[2], Stratum::SparseBand, band(-2.5, -1.5, 0.3));
    Ok(b.finish(DatasetKind::Sandwich, seed))
}

/// Gaussian-kernel density estimate over a fixed reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeEstimator {
    reference: Vec<Point2>,
    bandwidth: f64,
}

impl KdeEstimator {
    pub const DEFAULT_BANDWIDTH: f64 = 0.1;

    pub fn new(reference: Vec<Point2>, bandwidth: f64) -> Result<Self> {
        if reference.is_empty() {
            return Err(invalid!("KDE reference set is empty"));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(invalid!("KDE bandwidth must be positive, got {bandwidth}"));
        }
        Ok(Self {
            reference,
            bandwidth,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// `(1 / (n 2 pi h^2)) sum_i exp(-|q - p_i|^2 / (2 h^2))`.
    ///
    /// Underflows to 0 only for queries hundreds of bandwidths away from
    /// every reference point.
    pub fn density(&self, q: &Point2) -> f64 {
        let h2 = self.bandwidth * self.bandwidth;
        let sum: f64 = self
            .reference
            .iter()
            .map(|p| exp(-p.dist_sq(q) / (2.0 * h2)))
            .sum();
        sum / (self.reference.len() as f64 * 2.0 * PI * h2)
    }
}

pub fn kde_density(est: &KdeEstimator, q: &Point2) -> f64 {
    est.density(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_std(pts: &[Point2]) -> (Point2, f64) {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.x).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.y).sum::<f64>() / n;
        let var = pts
            .iter()
            .map(|p| (p.x - mx) * (p.x - mx) + (p.y - my) * (p.y - my))
            .sum::<f64>()
            / (2.0 * (n - 1.0));
        (Point2::new(mx, my), var.sqrt())
    }

    #[test]
    fn dense_sparse_proportions() {
        let d = gen_dense_sparse(1000, 7).unwrap();
        assert_eq!(d.count(Stratum::DenseCore), 600);
        assert_eq!(d.count(Stratum::SparseRing), 400);
        let small = gen_dense_sparse(10, 123).unwrap();
        assert_eq!(small.count(Stratum::DenseCore), 6);
        assert_eq!(small.count(Stratum::SparseRing), 4);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        for kind in DatasetKind::ALL {
            let a = generate(kind, 1000, 7).unwrap();
            let b = generate(kind, 1000, 7).unwrap();
            assert_eq!(a, b);
            let c = generate(kind, 1000, 8).unwrap();
            assert_ne!(a.points, c.points);
        }
    }

    #[test]
    fn too_small_is_rejected() {
        for kind in DatasetKind::ALL {
            assert!(matches!(generate(kind, 9, 0), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn partition_rule_puts_remainder_first() {
        assert_eq!(group_counts(DatasetKind::MultiscaleClusters, 5), [1, 1, 1, 1, 1]);
        assert_eq!(group_counts(DatasetKind::MultiscaleClusters, 13), [5, 2, 2, 2, 2]);
        assert_eq!(group_counts(DatasetKind::Sandwich, 1000), [600, 200, 200]);
        assert_eq!(group_counts(DatasetKind::DenseSparse, 11), [7, 4]);
    }

    #[test]
    fn multiscale_cluster_statistics() {
        let d = gen_multiscale_clusters(1000, 7).unwrap();
        assert_eq!(d.count(Stratum::SparseCenter), 200);
        assert_eq!(d.count(Stratum::DenseCluster), 800);
        // groups are laid out contiguously after the 200 center points
        for (g, c) in CLUSTER_CENTERS.iter().enumerate() {
            let start = 200 + 200 * g;
            let (mean, std) = mean_std(&d.points[start..start + 200]);
            let tol = 3.0 * 0.08 / 200f64.sqrt();
            assert!((mean.x - c.x).abs() < tol && (mean.y - c.y).abs() < tol, "{mean:?}");
            assert!((std - 0.08).abs() < 0.2 * 0.08, "cluster std {std}");
        }
    }

    #[test]
    fn sandwich_split_and_band_center() {
        let d = gen_sandwich(1000, 7).unwrap();
        assert_eq!(d.count(Stratum::DenseBand), 600);
        assert_eq!(d.count(Stratum::SparseBand), 400);
        let dense: Vec<_> = d
            .points
            .iter()
            .zip(&d.strata)
            .filter(|(_, s)| **s == Stratum::DenseBand)
            .map(|(p, _)| *p)
            .collect();
        let my = dense.iter().map(|p| p.y).sum::<f64>() / dense.len() as f64;
        assert!(my.abs() < 0.05, "dense band mean y {my}");
        let top = &d.points[600..800];
        assert!(top.iter().map(|p| p.y).sum::<f64>() / 200.0 > 1.5);
        let bottom = &d.points[800..];
        assert!(bottom.iter().map(|p| p.y).sum::<f64>() / 200.0 < -1.5);
    }

    #[test]
    fn labels_are_legal() {
        for kind in DatasetKind::ALL {
            let d = generate(kind, 57, 3).unwrap();
            assert_eq!(d.points.len(), d.strata.len());
            assert!(d.strata.iter().all(|s| kind.allows(*s)));
        }
    }

    #[test]
    fn from_parts_rejects_foreign_labels() {
        let err = LabeledDataset::from_parts(
            DatasetKind::Sandwich,
            0,
            alloc::vec![Point2::default()],
            alloc::vec![Stratum::DenseCore],
        );
        assert!(err.is_err());
    }

    #[test]
    fn kde_single_reference_peak() {
        let est = KdeEstimator::new(alloc::vec![Point2::default()], 0.1).unwrap();
        let v = est.density(&Point2::default());
        assert!((v - 1.0 / (2.0 * PI * 0.01)).abs() < 1e-12);
        assert!((v - 15.915_494_309_189_533).abs() < 1e-9);
    }

    #[test]
    fn kde_decays_monotonically_far_out() {
        let est = KdeEstimator::new(
            alloc::vec![Point2::new(0.0, 0.0), Point2::new(0.2, 0.1)],
            0.1,
        )
        .unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..40 {
            let v = est.density(&Point2::new(0.3 + 0.05 * k as f64, 0.0));
            assert!(v < prev && v >= 0.0);
            prev = v;
        }
    }

    #[test]
    fn kde_symmetric_pair_equals_single_at_same_distance() {
        let pair = KdeEstimator::new(
            alloc::vec![Point2::new(-0.1, 0.0), Point2::new(0.1, 0.0)],
            0.1,
        )
        .unwrap();
        let single = KdeEstimator::new(alloc::vec![Point2::new(0.1, 0.0)], 0.1).unwrap();
        let q = Point2::default();
        assert!((pair.density(&q) - single.density(&q)).abs() < 1e-14);
    }

    #[test]
    fn kde_rejects_bad_construction() {
        assert!(KdeEstimator::new(alloc::vec![], 0.1).is_err());
        assert!(KdeEstimator::new(alloc::vec![Point2::default()], 0.0).is_err());
    }

    #[test]
    fn kde_integrates_to_one() {
        // Stratified Monte-Carlo over a box that holds essentially all mass:
        // one uniform draw per grid cell.
        use rand::Rng;
        let d = gen_dense_sparse(1000, 7).unwrap();
        let est = KdeEstimator::new(d.points.clone(), 0.1).unwrap();
        let mut rng = rng::stream(99, 0);
        let (lo, hi, cells) = (-5.5, 5.5, 400usize);
        let w = (hi - lo) / cells as f64;
        let mut acc = 0.0;
        for i in 0..cells {
            for j in 0..cells {
                let q = Point2::new(
                    lo + w * (i as f64 + rng.random::<f64>()),
                    lo + w * (j as f64 + rng.random::<f64>()),
                );
                acc += est.density(&q);
            }
        }
        let integral = acc * w * w;
        assert!((integral - 1.0).abs() < 0.02, "integral {integral}");
    }

    #[test]
    fn dense_core_is_much_denser_than_ring() {
        let d = gen_dense_sparse(1000, 7).unwrap();
        let est = KdeEstimator::new(d.points.clone(), 0.1).unwrap();
        let mean = |s: Stratum| {
            let v: Vec<f64> = d
                .points
                .iter()
                .zip(&d.strata)
                .filter(|(_, st)| **st == s)
                .map(|(p, _)| est.density(p))
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let ratio = mean(Stratum::DenseCore) / mean(Stratum::SparseRing);
        assert!(ratio > 5.0, "density ratio {ratio}");
    }
}
