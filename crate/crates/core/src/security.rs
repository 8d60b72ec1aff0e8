// SPDX-License-Identifier: Apache-2.0

//! Binomial parameterisation of multi-trace attestation.
//!
//! With single-trace pass probabilities `p_alpha` (impostor) and `p_beta`
//! (honest), a batch of `n` independent traces is accepted when at least
//! `x_th` pass. The cheat probability is the upper binomial tail at
//! `p_alpha` and the honest acceptance probability the same tail at
//! `p_beta`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// Largest `n` tried by [`min_traces_for_level`] unless overridden.
pub const DEFAULT_N_CAP: u64 = 1_000_000;

/// Single-trace rates measured on hardware for the worst template/impostor
/// pair (82 of 1000 impostor traces passing) and the honest pass rate used
/// for parameterisation.
pub const REFERENCE_P_ALPHA: f64 = 0.082;
pub const REFERENCE_P_BETA: f64 = 0.69;

/// Security levels tabulated by [`security_table`].
pub const TABLE_LEVELS: [u32; 4] = [32, 64, 128, 256];

#[derive(Debug, Error, PartialEq)]
pub enum SecurityError {
    #[error("need 0 <= p_alpha < p_beta <= 1, got p_alpha={p_alpha}, p_beta={p_beta}")]
    InvalidProbabilities { p_alpha: f64, p_beta: f64 },
    #[error("x_th={x_th} for n={n} leaves x_th/n outside ({p_alpha}, {p_beta})")]
    ThresholdOutOfBand { n: u64, x_th: u64, p_alpha: f64, p_beta: f64 },
    #[error("binomial arguments out of domain: n={n}, k={k}, p={p}")]
    DomainError { n: u64, k: u64, p: f64 },
    #[error("no n up to {cap} reaches {level_bits} bits")]
    NoSolutionBelowCap { cap: u64, level_bits: u32 },
    #[error("weight {0} is outside [0, 1]")]
    BadWeight(f64),
    #[error("level must be at least one bit")]
    BadLevel,
}

fn check_probabilities(p_alpha: f64, p_beta: f64) -> Result<(), SecurityError> {
    if !(0.0..1.0).contains(&p_alpha) || !(p_beta > p_alpha && p_beta <= 1.0) {
        return Err(SecurityError::InvalidProbabilities { p_alpha, p_beta });
    }
    Ok(())
}

/// `ceil(n * (w * p_alpha + (1 - w) * p_beta))`, checked against the band
/// `p_alpha < x_th / n < p_beta`.
///
/// Products within a few ulps of an integer are treated as that integer, so
/// `10 * 0.5` gives 5 rather than risking 6. When `p_beta == 1` the upper
/// bound is inclusive: every threshold up to `n` accepts honest batches with
/// certainty.
pub fn threshold_traces_weighted(n: u64, p_alpha: f64, p_beta: f64, w: f64) -> Result<u64, SecurityError> {
    check_probabilities(p_alpha, p_beta)?;
    if !(0.0..=1.0).contains(&w) {
        return Err(SecurityError::BadWeight(w));
    }
    let target = n as f64 * (w * p_alpha + (1.0 - w) * p_beta);
    let nearest = target.round();
    let x_th = if (target - nearest).abs() <= 4.0 * f64::EPSILON * target.abs().max(1.0) {
        nearest
    } else {
        target.ceil()
    } as u64;
    let ratio = x_th as f64 / n as f64;
    let above = ratio > p_alpha;
    let below = ratio < p_beta || (p_beta == 1.0 && x_th <= n);
    if n == 0 || !above || !below {
        return Err(SecurityError::ThresholdOutOfBand { n, x_th, p_alpha, p_beta });
    }
    Ok(x_th)
}

/// Midpoint threshold `ceil(n * (p_alpha + p_beta) / 2)`.
///
/// ```
/// use power_attest::security::threshold_traces;
///
/// assert_eq!(threshold_traces(243, 0.082, 0.69).unwrap(), 94);
/// assert_eq!(threshold_traces(10, 0.0, 1.0).unwrap(), 5);
/// ```
pub fn threshold_traces(n: u64, p_alpha: f64, p_beta: f64) -> Result<u64, SecurityError> {
    threshold_traces_weighted(n, p_alpha, p_beta, 0.5)
}

/// Both tails of `X ~ Binomial(n, p)` split at `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tails {
    /// `P(X >= k)`.
    pub upper: f64,
    /// `P(X < k)`.
    pub lower: f64,
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn ln_pmf(n: u64, x: u64, p: f64) -> f64 {
    ln_choose(n, x) + x as f64 * p.ln() + (n - x) as f64 * (-p).ln_1p()
}

/// Sums pmf terms moving away from the mode, starting at `x`, relative to
/// the first term. `step` is +1 (upward) or -1 (downward).
fn relative_sum(n: u64, x: u64, p: f64, upward: bool) -> f64 {
    let odds = p / (1.0 - p);
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut x = x;
    loop {
        let ratio = if upward {
            if x == n {
                break;
            }
            (n - x) as f64 / (x + 1) as f64 * odds
        } else {
            if x == 0 {
                break;
            }
            x as f64 / (n - x + 1) as f64 / odds
        };
        term *= ratio;
        sum += term;
        x = if upward { x + 1 } else { x - 1 };
        // Terms shrink geometrically past the first one below the mode, so
        // the remainder is bounded by term * ratio / (1 - ratio).
        if ratio < 1.0 && term * ratio / (1.0 - ratio) < 1e-18 * sum {
            break;
        }
    }
    sum
}

/// Upper and lower binomial tails at `k`, each accurate to relative 1e-12
/// on the side that is small.
pub fn binom_tails(n: u64, k: u64, p: f64) -> Result<Tails, SecurityError> {
    if k > n || !(0.0..=1.0).contains(&p) {
        return Err(SecurityError::DomainError { n, k, p });
    }
    if k == 0 {
        return Ok(Tails { upper: 1.0, lower: 0.0 });
    }
    if p == 0.0 {
        return Ok(Tails { upper: 0.0, lower: 1.0 });
    }
    if p == 1.0 {
        return Ok(Tails { upper: 1.0, lower: 0.0 });
    }
    let mean = n as f64 * p;
    if k as f64 > mean {
        let upper = (ln_pmf(n, k, p)).exp() * relative_sum(n, k, p, true);
        Ok(Tails { upper, lower: 1.0 - upper })
    } else {
        let lower = (ln_pmf(n, k - 1, p)).exp() * relative_sum(n, k - 1, p, false);
        Ok(Tails { upper: 1.0 - lower, lower })
    }
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`, evaluated in log space.
///
/// ```
/// use power_attest::security::binom_tail;
///
/// let p = binom_tail(243, 94, 0.082).unwrap();
/// assert!((p / 3.72e-39 - 1.0).abs() < 1e-2);
/// assert_eq!(binom_tail(20, 0, 0.3).unwrap(), 1.0);
/// ```
pub fn binom_tail(n: u64, k: u64, p: f64) -> Result<f64, SecurityError> {
    Ok(binom_tails(n, k, p)?.upper)
}

/// Honest acceptance probability `P(beta)` and its complement.
pub fn honest_pass_prob(n: u64, x_th: u64, p_beta: f64) -> Result<Tails, SecurityError> {
    binom_tails(n, x_th, p_beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityParams {
    pub p_alpha: f64,
    pub p_beta: f64,
    pub n: u64,
    pub x_th: u64,
    /// `P(alpha) = P(x >= x_th | p_alpha)`.
    pub p_cheat: f64,
    /// `P(beta) = P(x >= x_th | p_beta)`.
    pub p_honest: f64,
    /// `1 - P(beta)`, computed directly.
    pub honest_failure: f64,
}

impl SecurityParams {
    /// Parameters for a given batch size with the midpoint threshold.
    pub fn for_batch(n: u64, p_alpha: f64, p_beta: f64) -> Result<Self, SecurityError> {
        let x_th = threshold_traces(n, p_alpha, p_beta)?;
        Self::with_threshold(n, x_th, p_alpha, p_beta)
    }

    /// Parameters for an explicit `(n, x_th)`; no band check.
    pub fn with_threshold(n: u64, x_th: u64, p_alpha: f64, p_beta: f64) -> Result<Self, SecurityError> {
        check_probabilities(p_alpha, p_beta)?;
        let cheat = binom_tails(n, x_th, p_alpha)?;
        let honest = binom_tails(n, x_th, p_beta)?;
        Ok(Self {
            p_alpha,
            p_beta,
            n,
            x_th,
            p_cheat: cheat.upper,
            p_honest: honest.upper,
            honest_failure: honest.lower,
        })
    }

    /// `-log2 P(alpha)`; infinite when cheating is impossible.
    pub fn security_bits(&self) -> f64 {
        -self.p_cheat.log2()
    }
}

/// How a cheat probability is compared with a `k`-bit level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelRule {
    /// `P(alpha) <= 2^-k`.
    #[default]
    Strict,
    /// `-log2 P(alpha)` rounds to at least `k`, i.e. `P(alpha) ≈ 2^-k` or
    /// better.
    NearestBit,
}

impl LevelRule {
    pub fn reaches(self, p_cheat: f64, level_bits: u32) -> bool {
        match self {
            LevelRule::Strict => p_cheat <= (-(level_bits as f64)).exp2(),
            LevelRule::NearestBit => (-p_cheat.log2()).round() >= level_bits as f64,
        }
    }
}

/// Smallest `n` whose midpoint threshold reaches `level_bits` bits under
/// the strict rule.
///
/// ```
/// use power_attest::security::min_traces_for_level;
///
/// let p = min_traces_for_level(0.0, 1.0, 64).unwrap();
/// assert_eq!((p.n, p.x_th, p.p_cheat, p.p_honest), (1, 1, 0.0, 1.0));
/// ```
pub fn min_traces_for_level(p_alpha: f64, p_beta: f64, level_bits: u32) -> Result<SecurityParams, SecurityError> {
    min_traces_with(p_alpha, p_beta, level_bits, LevelRule::Strict, DEFAULT_N_CAP)
}

/// Linear scan from `n = 1`, skipping sizes whose threshold leaves the band.
/// Cheat probability along the midpoint family is not monotone in `n`, so
/// there is no bisection shortcut.
pub fn min_traces_with(
    p_alpha: f64,
    p_beta: f64,
    level_bits: u32,
    rule: LevelRule,
    cap: u64,
) -> Result<SecurityParams, SecurityError> {
    check_probabilities(p_alpha, p_beta)?;
    if level_bits == 0 {
        return Err(SecurityError::BadLevel);
    }
    for n in 1..=cap {
        let x_th = match threshold_traces(n, p_alpha, p_beta) {
            Ok(x) => x,
            Err(SecurityError::ThresholdOutOfBand { .. }) => continue,
            Err(e) => return Err(e),
        };
        let p_cheat = binom_tail(n, x_th, p_alpha)?;
        if rule.reaches(p_cheat, level_bits) {
            return SecurityParams::with_threshold(n, x_th, p_alpha, p_beta);
        }
    }
    Err(SecurityError::NoSolutionBelowCap { cap, level_bits })
}

/// One row per level, found with `rule`.
pub fn security_table(p_alpha: f64, p_beta: f64, levels: &[u32], rule: LevelRule) -> Result<Vec<(u32, SecurityParams)>, SecurityError> {
    levels
        .iter()
        .map(|&k| Ok((k, min_traces_with(p_alpha, p_beta, k, rule, DEFAULT_N_CAP)?)))
        .collect()
}

/// Empirical pass rate with a Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub passes: u64,
    pub trials: u64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RateEstimate {
    pub fn new(passes: u64, trials: u64, confidence: f64) -> Self {
        let (ci_low, ci_high) = wilson_interval(passes, trials, confidence);
        Self {
            passes,
            trials,
            rate: if trials == 0 { 0.0 } else { passes as f64 / trials as f64 },
            ci_low,
            ci_high,
        }
    }

    pub fn contains(&self, p: f64) -> bool {
        (self.ci_low..=self.ci_high).contains(&p)
    }
}

/// Two-sided Wilson score interval for `passes` successes in `trials`.
pub fn wilson_interval(passes: u64, trials: u64, confidence: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = Normal::standard().inverse_cdf(0.5 + confidence / 2.0);
    let n = trials as f64;
    let p = passes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub cheat: RateEstimate,
    pub honest: RateEstimate,
}

/// Confidence level of the intervals reported by [`simulate_multi_attest`].
pub const SIMULATION_CONFIDENCE: f64 = 0.99;

/// Monte-Carlo acceptance rates for impostor and honest batches.
///
/// The pass count of a batch of `n` Bernoulli trials is drawn directly from
/// its binomial law; the batch is accepted when the count reaches `x_th`.
pub fn simulate_multi_attest(params: &SecurityParams, batches: u64, seed: u64) -> SimulationResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = |p: f64| {
        let draw = Binomial::new(params.n, p).expect("probabilities validated");
        let passes = (0..batches).filter(|_| draw.sample(&mut rng) >= params.x_th).count() as u64;
        RateEstimate::new(passes, batches, SIMULATION_CONFIDENCE)
    };
    let cheat = run(params.p_alpha);
    let honest = run(params.p_beta);
    SimulationResult { cheat, honest }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, ToPrimitive, Zero};

    fn rational(p: f64) -> BigRational {
        BigRational::from_float(p).unwrap()
    }

    // Exact upper tail from rational term-by-term summation.
    fn exact_tail(n: u64, k: u64, p: f64) -> f64 {
        let p = rational(p);
        let q = BigRational::one() - &p;
        let mut total = BigRational::zero();
        for x in k..=n {
            let mut c = BigInt::one();
            for i in 0..x {
                c = c * BigInt::from(n - i) / BigInt::from(i + 1);
            }
            let mut term = BigRational::from_integer(c);
            for _ in 0..x {
                term *= &p;
            }
            for _ in 0..n - x {
                term *= &q;
            }
            total += term;
        }
        total.to_f64().unwrap()
    }

    #[test]
    fn worked_threshold_and_table_thresholds() {
        assert_eq!(threshold_traces(243, 0.082, 0.69).unwrap(), 94);
        for (n, x) in [(52, 21), (114, 45), (494, 191)] {
            assert_eq!(threshold_traces(n, 0.082, 0.69).unwrap(), x);
        }
        assert_eq!(threshold_traces(10, 0.0, 1.0).unwrap(), 5);
    }

    #[test]
    fn threshold_errors() {
        assert!(matches!(threshold_traces(10, 0.7, 0.3), Err(SecurityError::InvalidProbabilities { .. })));
        // n = 1: ceil(0.386) = 1 is not below p_beta.
        assert!(matches!(threshold_traces(1, 0.082, 0.69), Err(SecurityError::ThresholdOutOfBand { .. })));
        assert_eq!(threshold_traces_weighted(100, 0.1, 0.9, 1.0).unwrap_err(), SecurityError::ThresholdOutOfBand { n: 100, x_th: 10, p_alpha: 0.1, p_beta: 0.9 });
        assert_eq!(threshold_traces_weighted(100, 0.1, 0.9, 0.75).unwrap(), 30);
    }

    #[test]
    fn small_tail_matches_exact_sum() {
        let got = binom_tail(12, 7, 0.3).unwrap();
        let exact = exact_tail(12, 7, 0.3);
        assert!((got - exact).abs() < 1e-12);
        assert!(((got - exact) / exact).abs() < 1e-12);
    }

    #[test]
    fn reference_values() {
        // Cross-checked with 80-digit arithmetic.
        let cases = [
            (52, 21, 2.395e-10, 5.428e-6),
            (114, 45, 5.179e-20, 2.221e-11),
            (243, 94, 3.724e-39, 6.273e-23),
            (494, 191, 1.144e-77, 2.561e-44),
        ];
        for (n, k, cheat, fail) in cases {
            let c = binom_tail(n, k, 0.082).unwrap();
            let h = honest_pass_prob(n, k, 0.69).unwrap();
            assert!((c / cheat - 1.0).abs() < 1e-3, "P(alpha) at {n}: {c:e}");
            assert!((h.lower / fail - 1.0).abs() < 1e-3, "1-P(beta) at {n}: {:e}", h.lower);
        }
    }

    #[test]
    fn degenerate_tails() {
        assert_eq!(binom_tail(5, 5, 1.0).unwrap(), 1.0);
        assert_eq!(binom_tail(5, 0, 0.0).unwrap(), 1.0);
        assert_eq!(binom_tail(5, 1, 0.0).unwrap(), 0.0);
        assert!(binom_tail(5, 6, 0.5).is_err());
        assert!(binom_tail(5, 2, 1.5).is_err());
    }

    #[test]
    fn strict_and_nearest_bit_scans() {
        let strict: Vec<(u64, u64)> = TABLE_LEVELS
            .iter()
            .map(|&k| {
                let p = min_traces_for_level(0.082, 0.69, k).unwrap();
                (p.n, p.x_th)
            })
            .collect();
        assert_eq!(strict, [(55, 22), (114, 45), (241, 94), (493, 191)]);
        let nearest: Vec<u64> = security_table(0.082, 0.69, &TABLE_LEVELS, LevelRule::NearestBit)
            .unwrap()
            .into_iter()
            .map(|(_, p)| p.n)
            .collect();
        assert_eq!(nearest, [52, 114, 241, 493]);
    }

    #[test]
    fn scan_result_is_minimal() {
        for k in [8, 16, 32, 40] {
            let p = min_traces_for_level(0.082, 0.69, k).unwrap();
            for n in 1..p.n {
                match threshold_traces(n, 0.082, 0.69) {
                    Err(_) => {}
                    Ok(x) => assert!(binom_tail(n, x, 0.082).unwrap() > (-(k as f64)).exp2()),
                }
            }
        }
    }

    #[test]
    fn perfect_separation() {
        let p = min_traces_for_level(0.0, 1.0, 256).unwrap();
        assert_eq!((p.n, p.x_th, p.p_cheat, p.p_honest), (1, 1, 0.0, 1.0));
    }

    #[test]
    fn wilson_reference() {
        // 95% interval for 10/100: (0.0552, 0.1744).
        let (lo, hi) = wilson_interval(10, 100, 0.95);
        assert!((lo - 0.05523).abs() < 1e-4 && (hi - 0.17437).abs() < 1e-4);
    }

    #[test]
    fn simulation_without_impostor_passes() {
        let params = SecurityParams::with_threshold(52, 21, 0.0, 0.69).unwrap();
        let r = simulate_multi_attest(&params, 10_000, 1);
        assert_eq!(r.cheat.passes, 0);
        assert!(r.honest.rate > 0.999);
    }

    proptest::proptest! {
        #[test]
        fn tails_sum_to_one_and_are_monotone(n in 1u64..60, k in 0u64..60, p in 0.0f64..1.0) {
            proptest::prop_assume!(k <= n);
            let t = binom_tails(n, k, p).unwrap();
            proptest::prop_assert!((t.upper + t.lower - 1.0).abs() < 1e-9);
            if k < n {
                proptest::prop_assert!(binom_tail(n, k + 1, p).unwrap() <= t.upper * (1.0 + 1e-12));
            }
            let p2 = (p + 0.05).min(1.0);
            proptest::prop_assert!(binom_tail(n, k, p2).unwrap() >= t.upper * (1.0 - 1e-12));
        }
    }
}
