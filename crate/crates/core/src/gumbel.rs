//! Gumbel primitives: standard, located and truncated draws, Gumbel-max
//! sampling and a Kolmogorov-Smirnov distance for distribution checks.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::rng::{uniform_open, RngKey};

/// A located draw together with the bound it was truncated to, if any.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelSample {
    pub value: f64,
    pub location: f64,
    pub truncation: Option<f64>,
}

/// `-ln(-ln u)`.
#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Gumbel(phi, 1) conditioned on `<= threshold`, driven by a fixed uniform.
///
/// Evaluates `phi - ln(exp(phi - T) - ln u)` as `T - softplus(ln(-ln u) + T - phi)`.
/// The two are equal algebraically; the second never overflows and, since
/// softplus is non-negative in floating point too, never exceeds `T`.
#[inline]
pub fn gumbel_trunc_from_uniform(phi: f64, threshold: f64, u: f64) -> f64 {
    let log_b = (-u.ln()).ln();
    threshold - softplus(log_b + threshold - phi)
}

pub fn gumbel_standard(key: RngKey) -> f64 {
    gumbel_from_uniform(uniform_open(key))
}

pub fn gumbel_located(phi: f64, key: RngKey) -> Result<f64> {
    if !phi.is_finite() {
        return Err(Error::input(format!("gumbel location must be finite, got {phi}")));
    }
    Ok(phi + gumbel_standard(key))
}

pub fn gumbel_trunc(phi: f64, threshold: f64, key: RngKey) -> Result<f64> {
    if !phi.is_finite() || !threshold.is_finite() {
        return Err(Error::input(format!(
            "truncated gumbel needs finite location and threshold, got ({phi}, {threshold})"
        )));
    }
    Ok(gumbel_trunc_from_uniform(phi, threshold, uniform_open(key)))
}

impl GumbelSample {
    pub fn located(phi: f64, key: RngKey) -> Result<Self> {
        Ok(GumbelSample {
            value: gumbel_located(phi, key)?,
            location: phi,
            truncation: None,
        })
    }

    pub fn truncated(phi: f64, threshold: f64, key: RngKey) -> Result<Self> {
        Ok(GumbelSample {
            value: gumbel_trunc(phi, threshold, key)?,
            location: phi,
            truncation: Some(threshold),
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Gumbel-max categorical sample. Class `j` draws its noise from
/// `key.with_channel(j)`.
pub fn gumbel_argmax_sample(logits: &[f64], key: RngKey) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::input("gumbel-max sampling over an empty logit row"));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::input(format!("non-finite logit {bad}")));
    }
    let perturbed: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, &p)| p + gumbel_standard(key.with_channel(j as u32)))
        .collect();
    Ok(argmax(&perturbed).expect("non-empty"))
}

/// Reference distributions for [`ks_statistic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceCdf {
    Uniform,
    StandardGumbel,
    StandardNormal,
    /// Gumbel(location, 1) conditioned on `<= threshold`.
    TruncatedGumbel { location: f64, threshold: f64 },
}

impl ReferenceCdf {
    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            ReferenceCdf::Uniform => x.clamp(0.0, 1.0),
            ReferenceCdf::StandardGumbel => (-(-x).exp()).exp(),
            ReferenceCdf::StandardNormal => 0.5 * erfc(-x / std::f64::consts::SQRT_2),
            ReferenceCdf::TruncatedGumbel { location, threshold } => {
                if x >= threshold {
                    1.0
                } else {
                    let log_cdf = |z: f64| -(-(z - location)).exp();
                    (log_cdf(x) - log_cdf(threshold)).exp()
                }
            }
        }
    }
}

/// Sup-distance between the empirical CDF of `samples` and `reference`.
pub fn ks_statistic(samples: &[f64], reference: ReferenceCdf) -> Result<f64> {
    ks_statistic_with(samples, |x| reference.cdf(x))
}

pub fn ks_statistic_with(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::input("KS statistic of an empty sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(d.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use proptest::prelude::*;

    const E_INV: f64 = 0.367_879_441_171_442_33;
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    fn keys(seed: u64, n: u64) -> impl Iterator<Item = RngKey> {
        (0..n).map(move |i| RngKey::new(seed, Purpose::AUX).nth(i))
    }

    #[test]
    fn standard_at_inverse_e_is_zero() {
        assert!(gumbel_from_uniform(E_INV).abs() < 1e-15);
    }

    #[test]
    fn trunc_analytic_value() {
        let v = gumbel_trunc_from_uniform(0.0, 0.0, E_INV);
        assert!((v + std::f64::consts::LN_2).abs() < 1e-12, "{v}");
    }

    #[test]
    fn trunc_matches_printed_formula_in_safe_range() {
        for &(phi, t, u) in &[(0.3f64, 1.2f64, 0.2f64), (-2.0, 0.5, 0.9), (1.0, -1.0, 0.01), (4.0, 4.5, 0.5)] {
            let direct = phi - ((phi - t).exp() - f64::ln(u)).ln();
            assert!((gumbel_trunc_from_uniform(phi, t, u) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn trunc_extreme_gaps_stay_finite() {
        for &(phi, t) in &[(0.0, -1e4), (0.0, 1e4), (1e6, -1e6), (-1e6, 1e6)] {
            for u in [1e-300, E_INV, 1.0 - 1e-16] {
                let v = gumbel_trunc_from_uniform(phi, t, u);
                assert!(v.is_finite() && v <= t, "phi={phi} t={t} u={u} -> {v}");
            }
        }
    }

    #[test]
    fn located_shift_and_errors() {
        let key = RngKey::new(1, Purpose::AUX);
        assert_eq!(gumbel_located(5.0, key).unwrap(), 5.0 + gumbel_standard(key));
        assert!(gumbel_located(f64::NAN, key).is_err());
        assert!(gumbel_trunc(0.0, f64::INFINITY, key).is_err());
        let s = GumbelSample::truncated(0.5, -1.0, key).unwrap();
        assert!(s.value <= -1.0 && s.truncation == Some(-1.0));
    }

    #[test]
    fn standard_mean_is_euler_gamma() {
        let n = 1_000_000u64;
        let mean = keys(11, n).map(gumbel_standard).sum::<f64>() / n as f64;
        assert!((mean - EULER_GAMMA).abs() < 0.01, "{mean}");
    }

    #[test]
    fn standard_ks() {
        let xs: Vec<f64> = keys(12, 100_000).map(gumbel_standard).collect();
        assert!(ks_statistic(&xs, ReferenceCdf::StandardGumbel).unwrap() <= 0.01);
    }

    #[test]
    fn located_median() {
        let mut xs: Vec<f64> = keys(13, 100_000).map(|k| gumbel_located(2.0, k).unwrap()).collect();
        xs.sort_by(f64::total_cmp);
        let median = xs[xs.len() / 2];
        let expected = 2.0 - std::f64::consts::LN_2.ln();
        assert!((median - expected).abs() < 0.02, "{median} vs {expected}");
    }

    #[test]
    fn trunc_conditional_cdf() {
        let xs: Vec<f64> = keys(14, 100_000).map(|k| gumbel_trunc(0.0, 0.0, k).unwrap()).collect();
        assert!(xs.iter().all(|&x| x <= 0.0));
        let reference = ReferenceCdf::TruncatedGumbel { location: 0.0, threshold: 0.0 };
        assert!(ks_statistic(&xs, reference).unwrap() <= 0.01);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn argmax_sample_cases() {
        let key = RngKey::new(3, Purpose::AUX);
        assert!(gumbel_argmax_sample(&[], key).is_err());
        for i in 0..10_000u32 {
            assert_eq!(gumbel_argmax_sample(&[0.7], key.at(0, i, 0)).unwrap(), 0);
            assert_eq!(gumbel_argmax_sample(&[100.0, 0.0, 0.0], key.at(1, i, 0)).unwrap(), 0);
        }
    }

    #[test]
    fn argmax_sample_uniform_frequencies() {
        let mut counts = [0usize; 3];
        let n = 100_000u32;
        for i in 0..n {
            let key = RngKey::new(4, Purpose::AUX).at(0, i, 0);
            counts[gumbel_argmax_sample(&[0.0; 3], key).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn argmax_sample_converges_to_softmax() {
        let logits = [0.5, -1.0, 2.0, 0.0, 1.2, -0.3, 0.9, -2.0];
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        let n = 100_000u32;
        let mut counts = [0f64; 8];
        for i in 0..n {
            let key = RngKey::new(5, Purpose::AUX).at(0, i, 0);
            counts[gumbel_argmax_sample(&logits, key).unwrap()] += 1.0;
        }
        // Pearson chi-square, 7 degrees of freedom; 24.3 is the 0.999 quantile.
        let chi2: f64 = logits
            .iter()
            .zip(counts)
            .map(|(l, c)| {
                let e = n as f64 * l.exp() / z;
                (c - e) * (c - e) / e
            })
            .sum();
        assert!(chi2 < 24.3, "chi2 = {chi2}");
    }

    #[test]
    fn ks_edge_cases() {
        assert!(ks_statistic(&[], ReferenceCdf::Uniform).is_err());
        let median = -std::f64::consts::LN_2.ln();
        let d = ks_statistic(&[median; 10], ReferenceCdf::StandardGumbel).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ks_detects_mismatch() {
        let xs: Vec<f64> = keys(15, 100_000).map(uniform_open).collect();
        assert!(ks_statistic(&xs, ReferenceCdf::Uniform).unwrap() <= 0.01);
        assert!(ks_statistic(&xs, ReferenceCdf::StandardGumbel).unwrap() >= 0.3);
    }

    #[test]
    fn normal_cdf_reference_points() {
        let c = ReferenceCdf::StandardNormal;
        assert!((c.cdf(0.0) - 0.5).abs() < 1e-12, "{}", c.cdf(0.0));
        assert!((c.cdf(1.96) - 0.975_002_104_851_780).abs() < 1e-10, "{}", c.cdf(1.96));
    }

    proptest! {
        #[test]
        fn trunc_never_exceeds_threshold(phi in -1e6f64..1e6, t in -1e6f64..1e6, seed: u64, idx: u64) {
            let v = gumbel_trunc(phi, t, RngKey::new(seed, Purpose::AUX).nth(idx)).unwrap();
            prop_assert!(v <= t);
        }

        #[test]
        fn location_equivariance(phi in -1e3f64..1e3, seed: u64) {
            let key = RngKey::new(seed, Purpose::AUX);
            prop_assert_eq!(gumbel_located(phi, key).unwrap(), phi + gumbel_standard(key));
        }
    }
}
