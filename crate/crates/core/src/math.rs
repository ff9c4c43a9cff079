//! Float helpers over `libm` so the crate stays `no_std`.

pub use libm::{ceil, cos, erfc, exp, log as ln, pow, sin, sqrt};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Numerically stable `ln(sum(exp(v)))`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|&v| exp(v - max)).sum();
    max + ln(sum)
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

#[inline]
pub fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    sqrt(norm_sq(v))
}

#[inline]
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / core::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_naive_on_small_inputs() {
        let v = [0.1, -2.0, 3.5];
        let naive = ln(v.iter().map(|&x| exp(x)).sum::<f64>());
        assert!((log_sum_exp(&v) - naive).abs() < 1e-14);
    }

    #[test]
    fn lse_survives_huge_negative_exponents() {
        let v = [-1e6, -1e6 - 1.0];
        let got = log_sum_exp(&v);
        assert!(got.is_finite());
        assert!((got - (-1e6 + ln(1.0 + exp(-1.0)))).abs() < 1e-9);
    }

    #[test]
    fn compensated_sum_recovers_cancelled_terms() {
        assert_eq!(compensated_sum([1.0, 1e100, 1.0, -1e100]), 2.0);
        let tenth = compensated_sum(core::iter::repeat_n(0.1, 10));
        assert_eq!(tenth, 1.0);
    }

    #[test]
    fn ln_2pi_constant() {
        assert!((LN_2PI - ln(2.0 * core::f64::consts::PI)).abs() < 1e-15);
    }
}
