//! Convergence and inference post-processing from per-chain accumulators and
//! retained thinned series.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::stats::MomentAccumulator;

/// R̂ at or above this is flagged.
pub const RHAT_THRESHOLD: f64 = 1.1;

/// Relative tolerance for `meansq - mean²` dipping below zero through rounding.
pub const VARIANCE_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiagnosticError {
    #[error("need at least {needed} chains, got {got}")]
    TooFewChains { needed: usize, got: usize },
    #[error("chains have different lengths")]
    UnequalChains,
    #[error("series too short ({len} draws)")]
    TooShort { len: usize },
    #[error("within-chain variance is zero")]
    DegenerateVariance,
    #[error("accumulator corrupted: mean of squares {meansq} below squared mean {mean}²")]
    CorruptAccumulator { mean: f64, meansq: f64 },
    #[error("alpha must lie in (0, 1), got {0}")]
    BadLevel(f64),
}

/// Pass/warn classification of a potential scale reduction factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhatFlag {
    Pass,
    Warn,
    Degenerate,
}

impl RhatFlag {
    pub fn classify(rhat: &Result<f64, DiagnosticError>) -> Self {
        match rhat {
            Ok(r) if *r < RHAT_THRESHOLD => RhatFlag::Pass,
            Ok(_) => RhatFlag::Warn,
            Err(_) => RhatFlag::Degenerate,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RhatFlag::Pass => "pass",
            RhatFlag::Warn => "warn",
            RhatFlag::Degenerate => "degenerate",
        }
    }
}

/// Per-parameter accumulators of every chain, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChainMoments {
    params: BTreeMap<String, Vec<MomentAccumulator>>,
}

impl ChainMoments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, chains: Vec<MomentAccumulator>) {
        self.params.insert(name.into(), chains);
    }

    pub fn get(&self, name: &str) -> Option<&[MomentAccumulator]> {
        self.params.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// R̂ for `name`; `None` when the parameter is unknown.
    pub fn rhat(&self, name: &str) -> Option<Result<f64, DiagnosticError>> {
        self.get(name).map(gelman_rhat)
    }
}

/// Gelman-Rubin potential scale reduction factor from per-chain means and mean squares.
///
/// With C chains of M draws: B = M/(C−1) Σ (θ̄_c − θ̄)², S_c² = M/(M−1)(θ²̄_c − θ̄_c²),
/// W = mean S_c², and R̂ = √(1 + (B/W − 1)/M).
pub fn gelman_rhat(chains: &[MomentAccumulator]) -> Result<f64, DiagnosticError> {
    let c = chains.len();
    if c < 2 {
        return Err(DiagnosticError::TooFewChains { needed: 2, got: c });
    }
    let m = chains[0].count;
    if chains.iter().any(|a| a.count != m) {
        return Err(DiagnosticError::UnequalChains);
    }
    if m < 2 {
        return Err(DiagnosticError::TooShort { len: m as usize });
    }
    let mf = m as f64;
    let cf = c as f64;
    let grand = chains.iter().map(|a| a.mean).sum::<f64>() / cf;
    let b = mf / (cf - 1.0) * chains.iter().map(|a| (a.mean - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .map(|a| mf / (mf - 1.0) * (a.meansq - a.mean * a.mean))
        .sum::<f64>()
        / cf;
    let slack = VARIANCE_SLACK * chains.iter().map(|a| a.meansq.abs()).fold(1.0, f64::max);
    if !(w > slack) {
        return Err(DiagnosticError::DegenerateVariance);
    }
    Ok((1.0 + (b / w - 1.0) / mf).sqrt())
}

/// R̂ straight from full per-chain series.
pub fn gelman_rhat_from_series(series: &[Vec<f64>]) -> Result<f64, DiagnosticError> {
    let acc: Vec<MomentAccumulator> = series
        .iter()
        .map(|s| MomentAccumulator::from_values(s))
        .collect();
    gelman_rhat(&acc)
}

/// Approximate equal-tail interval `mean ± z_{α/2} √(meansq − mean²)`.
pub fn credible_interval(
    mean: f64,
    meansq: f64,
    alpha: f64,
) -> Result<(f64, f64), DiagnosticError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DiagnosticError::BadLevel(alpha));
    }
    let var = meansq - mean * mean;
    if var < -VARIANCE_SLACK * meansq.abs().max(1.0) {
        return Err(DiagnosticError::CorruptAccumulator { mean, meansq });
    }
    let half = normal_quantile(1.0 - alpha / 2.0) * var.max(0.0).sqrt();
    Ok((mean - half, mean + half))
}

/// Standard normal quantile.
///
/// Acklam's rational approximation (relative error about 1e−9) refined by Halley steps
/// against `erfc`, which brings the result to near machine precision.
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    // Halley refinement; work in the lower tail to keep the residual accurate.
    let (x, sign, p) = if p > 0.5 {
        (-x, -1.0, 1.0 - p)
    } else {
        (x, 1.0, p)
    };
    // One step suffices in the body; the far tail needs a few more.
    let mut x = x;
    for _ in 0..4 {
        let e = 0.5 * erfc(-x / std::f64::consts::SQRT_2) - p;
        let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let u = e / density;
        let step = u / (1.0 + 0.5 * x * u);
        x -= step;
        if step.abs() <= 1e-14 * x.abs().max(1.0) {
            break;
        }
    }
    sign * x
}

/// Effective sample size of several equal-length chains.
///
/// Autocovariances are computed per chain, averaged across chains and normalised by the
/// averaged lag-0 variance. Sums of adjacent pairs of autocorrelations are accumulated
/// while positive and forced to be non-increasing (initial monotone sequence), giving
/// ESS = C·n / (1 + 2 Σ_t ρ_t), capped at C·n.
pub fn effective_sample_size(series: &[Vec<f64>]) -> Result<f64, DiagnosticError> {
    let c = series.len();
    if c == 0 {
        return Err(DiagnosticError::TooFewChains { needed: 1, got: 0 });
    }
    let n = series[0].len();
    if series.iter().any(|s| s.len() != n) {
        return Err(DiagnosticError::UnequalChains);
    }
    if n < 4 || (c < 2 && n < 50) {
        return Err(DiagnosticError::TooShort { len: n });
    }
    let centred: Vec<Vec<f64>> = series
        .iter()
        .map(|s| {
            let m = s.iter().sum::<f64>() / n as f64;
            s.iter().map(|v| v - m).collect()
        })
        .collect();
    let autocov = |lag: usize| -> f64 {
        centred
            .iter()
            .map(|x| {
                x[..n - lag]
                    .iter()
                    .zip(&x[lag..])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / n as f64
            })
            .sum::<f64>()
            / c as f64
    };
    let var0 = autocov(0);
    let scale = series
        .iter()
        .flatten()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    if !(var0 > 1e-24 * scale * scale) {
        return Err(DiagnosticError::DegenerateVariance);
    }
    let rho = |lag: usize| if lag < n { autocov(lag) / var0 } else { 0.0 };

    let mut sum_pairs = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k < n {
        let mut pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        pair = pair.min(prev);
        sum_pairs += pair;
        prev = pair;
        k += 1;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / (c * n) as f64);
    let total = (c * n) as f64;
    Ok((total / tau).min(total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn acc(values: &[f64]) -> MomentAccumulator {
        MomentAccumulator::from_values(values)
    }

    #[test]
    fn rhat_hand_case() {
        let r = gelman_rhat(&[acc(&[0.0, 2.0]), acc(&[1.0, 3.0])]).unwrap();
        assert!((r - 0.75f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rhat_identical_chains() {
        let v: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = gelman_rhat(&[acc(&v), acc(&v), acc(&v)]).unwrap();
        assert!((r - (1.0f64 - 0.01).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rhat_iid_chains_near_one() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let chains: Vec<Vec<f64>> = (0..4)
                .map(|_| {
                    (0..10_000)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect()
                })
                .collect();
            let r = gelman_rhat_from_series(&chains).unwrap();
            assert!(r > 0.99 && r < 1.01, "{r}");
        }
    }

    #[test]
    fn rhat_degenerate_and_invalid() {
        let flat = acc(&[1.0, 1.0, 1.0]);
        assert_eq!(
            gelman_rhat(&[flat, flat]),
            Err(DiagnosticError::DegenerateVariance)
        );
        assert!(matches!(
            gelman_rhat(&[flat]),
            Err(DiagnosticError::TooFewChains { .. })
        ));
        assert_eq!(
            gelman_rhat(&[acc(&[1.0, 2.0]), acc(&[1.0, 2.0, 3.0])]),
            Err(DiagnosticError::UnequalChains)
        );
        assert_eq!(
            RhatFlag::classify(&Err(DiagnosticError::DegenerateVariance)),
            RhatFlag::Degenerate
        );
        assert_eq!(RhatFlag::classify(&Ok(1.05)), RhatFlag::Pass);
        assert_eq!(RhatFlag::classify(&Ok(1.1)), RhatFlag::Warn);
    }

    #[test]
    fn rhat_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let chains: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                (0..500)
                    .map(|_| {
                        c as f64 * 0.1 + Distribution::<f64>::sample(&StandardNormal, &mut rng)
                    })
                    .collect()
            })
            .collect();
        let base = gelman_rhat_from_series(&chains).unwrap();
        for (a, b) in [(2.0, 5.0), (-0.5, 100.0), (1e3, -1.0)] {
            let t: Vec<Vec<f64>> = chains
                .iter()
                .map(|s| s.iter().map(|v| a * v + b).collect())
                .collect();
            let r = gelman_rhat_from_series(&t).unwrap();
            assert!((r - base).abs() < 1e-9, "{r} vs {base}");
        }
    }

    #[test]
    fn interval_examples() {
        assert_eq!(credible_interval(3.0, 9.0, 0.05).unwrap(), (3.0, 3.0));
        let (lo, hi) = credible_interval(0.0, 1.0, 0.05).unwrap();
        assert!((lo + 1.959_963_984_540_054).abs() < 1e-9);
        assert!((hi - 1.959_963_984_540_054).abs() < 1e-9);
        let (lo, hi) = credible_interval(2.0, 5.0, 0.32).unwrap();
        assert!((lo - 1.005_542_116_790_246_8).abs() < 1e-9);
        assert!((hi - 2.994_457_883_209_753).abs() < 1e-9);
        assert!(matches!(
            credible_interval(2.0, 3.0, 0.05),
            Err(DiagnosticError::CorruptAccumulator { .. })
        ));
        assert!(credible_interval(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn interval_widens_as_alpha_shrinks() {
        let mut prev = 0.0;
        for alpha in [0.5, 0.3, 0.1, 0.05, 0.01, 1e-4, 1e-8] {
            let (lo, hi) = credible_interval(1.0, 5.0, alpha).unwrap();
            assert!(hi - lo > prev);
            prev = hi - lo;
        }
    }

    #[test]
    fn quantile_matches_high_precision_values() {
        // Reference values from 60-digit root finding on the normal CDF.
        let cases = [
            (1e-300, -37.047_096_299_361_199),
            (1e-100, -21.273_453_560_965_324),
            (1e-20, -9.262_340_089_798_407_6),
            (1e-10, -6.361_340_902_404_056_2),
            (1e-5, -4.264_890_793_922_824_6),
            (0.001, -3.090_232_306_167_813_5),
            (0.02425, -1.972_961_051_311_884_9),
            (0.1, -1.281_551_565_544_600_5),
            (0.3, -0.524_400_512_708_040_78),
            (0.5, 0.0),
            (0.7, 0.524_400_512_708_040_78),
            (0.9, 1.281_551_565_544_600_5),
            (0.975, 1.959_963_984_540_054_2),
            (0.97575, 1.972_961_051_311_884_9),
            (0.999, 3.090_232_306_167_813_5),
            (0.99999, 4.264_890_793_922_824_6),
        ];
        for (p, q) in cases {
            let got = normal_quantile(p);
            assert!((got - q).abs() < 1e-9, "p={p}: {got} vs {q}");
        }
        assert_eq!(normal_quantile(0.0), f64::NEG_INFINITY);
        assert_eq!(normal_quantile(1.0), f64::INFINITY);
        assert!(normal_quantile(1.5).is_nan());
    }

    fn ar1(phi: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x: f64 = StandardNormal.sample(rng);
        x /= (1.0 - phi * phi).sqrt();
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                x = phi * x + z;
                x
            })
            .collect()
    }

    #[test]
    fn ess_iid_close_to_nominal() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let chains: Vec<Vec<f64>> = (0..4).map(|_| ar1(0.0, 5000, &mut rng)).collect();
        let ess = effective_sample_size(&chains).unwrap();
        assert!((ess - 20_000.0).abs() / 20_000.0 < 0.15, "{ess}");
    }

    #[test]
    fn ess_ar1_close_to_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let chains: Vec<Vec<f64>> = (0..4).map(|_| ar1(0.9, 5000, &mut rng)).collect();
        let ess = effective_sample_size(&chains).unwrap();
        let expect = 20_000.0 * 0.1 / 1.9;
        assert!((ess - expect).abs() / expect < 0.30, "{ess} vs {expect}");
    }

    #[test]
    fn ess_flags() {
        assert_eq!(
            effective_sample_size(&[vec![2.0; 100], vec![2.0; 100]]),
            Err(DiagnosticError::DegenerateVariance)
        );
        assert!(matches!(
            effective_sample_size(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]),
            Err(DiagnosticError::TooShort { .. })
        ));
        assert!(matches!(
            effective_sample_size(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]),
            Err(DiagnosticError::TooShort { .. })
        ));
    }

    #[test]
    fn ess_affine_invariant_and_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let chains: Vec<Vec<f64>> = (0..2).map(|_| ar1(0.5, 800, &mut rng)).collect();
        let base = effective_sample_size(&chains).unwrap();
        let t: Vec<Vec<f64>> = chains
            .iter()
            .map(|s| s.iter().map(|v| -3.0 * v + 7.0).collect())
            .collect();
        let other = effective_sample_size(&t).unwrap();
        assert!((base - other).abs() / base < 1e-9);
        // strongly anticorrelated series would exceed the nominal count
        let alt: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                (0..400)
                    .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        assert!(effective_sample_size(&alt).unwrap() <= 800.0);
    }
}
