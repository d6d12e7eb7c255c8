//! Hierarchical Poisson-lognormal model for a genes × samples count table.
//!
//! ```text
//! y_gn | ε_gn, β_g  ~ Poisson(exp(h_n + ε_gn + X_n β_g))
//! ε_gn | γ_g        ~ Normal(0, γ_g)
//! γ_g  | ν, τ       ~ Inverse-Gamma(ν/2, ντ/2)
//! ν                 ~ Uniform(0, d)
//! τ                 ~ Gamma(a, rate = b)
//! β_gℓ | θ_ℓ, σ_ℓ   ~ Normal(θ_ℓ, σ_ℓ²)
//! θ_ℓ               ~ Normal(0, c_ℓ²)
//! σ_ℓ               ~ Uniform(0, s_ℓ)
//! ```
//!
//! Everything here is a pure function of its arguments. The log full conditionals
//! are returned up to an additive constant that does not depend on the sampled value.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::slice::SliceVar;

/// Largest argument passed to `exp` in likelihood terms.
pub const EXP_CLAMP: f64 = 700.0;

/// `exp(min(x, EXP_CLAMP))`, plus whether the clamp was hit.
#[inline]
pub fn clamp_exp(x: f64) -> (f64, bool) {
    if x > EXP_CLAMP {
        (EXP_CLAMP.exp(), true)
    } else {
        (x.exp(), false)
    }
}

/// `clamp_exp(a + d) - clamp_exp(a)`, free of cancellation when neither side is clamped.
/// The flag reports whether `a + d` hit the clamp.
#[inline]
pub fn clamp_exp_diff(a: f64, d: f64) -> (f64, bool) {
    let x = a + d;
    if x > EXP_CLAMP || a > EXP_CLAMP {
        let (e, hit) = clamp_exp(x);
        return (e - clamp_exp(a).0, hit);
    }
    (a.exp() * d.exp_m1(), false)
}

/// Genes × samples table of nonnegative integer counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMatrix {
    genes: Vec<String>,
    samples: Vec<String>,
    counts: Array2<u64>,
}

impl CountMatrix {
    pub fn new(genes: Vec<String>, samples: Vec<String>, counts: Array2<u64>) -> Result<Self> {
        let (g, n) = counts.dim();
        if g == 0 || n == 0 {
            return Err(Error::InvalidCounts(format!(
                "need at least one gene and one sample, got {g}×{n}"
            )));
        }
        if genes.len() != g {
            return Err(Error::InvalidCounts(format!(
                "{} gene labels for {g} rows",
                genes.len()
            )));
        }
        if samples.len() != n {
            return Err(Error::InvalidCounts(format!(
                "{} sample labels for {n} columns",
                samples.len()
            )));
        }
        Ok(Self {
            genes,
            samples,
            counts,
        })
    }

    /// Unlabelled matrix; genes and samples get 1-based default names.
    pub fn from_counts(counts: Array2<u64>) -> Result<Self> {
        let (g, n) = counts.dim();
        let genes = (1..=g).map(|i| format!("gene{i}")).collect();
        let samples = (1..=n).map(|i| format!("sample{i}")).collect();
        Self::new(genes, samples, counts)
    }

    pub fn genes(&self) -> &[String] {
        &self.genes
    }

    pub fn samples(&self) -> &[String] {
        &self.samples
    }

    pub fn counts(&self) -> ArrayView2<'_, u64> {
        self.counts.view()
    }

    pub fn n_genes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.counts.ncols()
    }

    /// Gene identifiers that occur more than once (normal for resampled tables).
    pub fn duplicate_genes(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        let mut dups = std::collections::BTreeSet::new();
        for g in &self.genes {
            if !seen.insert(g.as_str()) {
                dups.insert(g.as_str());
            }
        }
        dups.into_iter().collect()
    }
}

/// Fixed prior constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Gamma shape for τ.
    pub a: f64,
    /// Gamma rate for τ.
    pub b: f64,
    /// Upper bound of the uniform prior on ν.
    pub d: f64,
    /// Prior sd of each θ_ℓ.
    pub c: Vec<f64>,
    /// Upper bound of the uniform prior on each σ_ℓ.
    pub s: Vec<f64>,
}

impl PriorConfig {
    pub const DEFAULT_A: f64 = 1.0;
    pub const DEFAULT_B: f64 = 1.0;
    pub const DEFAULT_D: f64 = 1000.0;
    pub const DEFAULT_C: f64 = 10.0;
    pub const DEFAULT_S: f64 = 100.0;

    /// Diffuse defaults for a model with `l` coefficient columns.
    pub fn diffuse(l: usize) -> Self {
        Self {
            a: Self::DEFAULT_A,
            b: Self::DEFAULT_B,
            d: Self::DEFAULT_D,
            c: vec![Self::DEFAULT_C; l],
            s: vec![Self::DEFAULT_S; l],
        }
    }

    pub fn validate(&self, l: usize) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidModel(format!(
                    "prior constant {name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("a", self.a)?;
        positive("b", self.b)?;
        positive("d", self.d)?;
        if self.c.len() != l || self.s.len() != l {
            return Err(Error::InvalidModel(format!(
                "prior vectors c and s need {l} entries, got {} and {}",
                self.c.len(),
                self.s.len()
            )));
        }
        for (i, (&c, &s)) in self.c.iter().zip(&self.s).enumerate() {
            positive(&format!("c[{}]", i + 1), c)?;
            positive(&format!("s[{}]", i + 1), s)?;
        }
        Ok(())
    }
}

/// Model matrix, per-sample log offsets and prior constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    design: Array2<f64>,
    offsets: Array1<f64>,
    priors: PriorConfig,
}

impl ModelSpec {
    pub fn new(design: Array2<f64>, offsets: Array1<f64>, priors: PriorConfig) -> Result<Self> {
        let (n, l) = design.dim();
        if n == 0 || l == 0 {
            return Err(Error::InvalidModel(format!(
                "model matrix must be non-empty, got {n}×{l}"
            )));
        }
        if offsets.len() != n {
            return Err(Error::InvalidModel(format!(
                "{} offsets for a model matrix with {n} rows",
                offsets.len()
            )));
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel(
                "model matrix has non-finite entries".into(),
            ));
        }
        if offsets.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("offsets must be finite".into()));
        }
        let rank = column_rank(design.view());
        if rank < l {
            return Err(Error::InvalidModel(format!(
                "model matrix is rank deficient: rank {rank} with {l} columns"
            )));
        }
        priors.validate(l)?;
        Ok(Self {
            design,
            offsets,
            priors,
        })
    }

    pub fn design(&self) -> ArrayView2<'_, f64> {
        self.design.view()
    }

    pub fn offsets(&self) -> ArrayView1<'_, f64> {
        self.offsets.view()
    }

    pub fn priors(&self) -> &PriorConfig {
        &self.priors
    }

    pub fn n_samples(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_coefficients(&self) -> usize {
        self.design.ncols()
    }
}

/// Numerical column rank by modified Gram-Schmidt with a relative tolerance.
pub fn column_rank(x: ArrayView2<'_, f64>) -> usize {
    let (n, l) = x.dim();
    let scale = x.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    let tol = 1e-10 * scale * (n.max(l) as f64);
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for j in 0..l {
        let mut v = x.column(j).to_owned();
        for q in &basis {
            let proj = q.dot(&v);
            v.scaled_add(-proj, q);
        }
        let norm = v.dot(&v).sqrt();
        if norm > tol {
            basis.push(v / norm);
        }
    }
    basis.len()
}

/// One iteration's parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    /// ε_gn, genes × samples.
    pub eps: Array2<f64>,
    /// γ_g, variance of ε_g·.
    pub gamma: Array1<f64>,
    /// β_gℓ, genes × coefficients.
    pub beta: Array2<f64>,
    pub theta: Array1<f64>,
    pub sigma: Array1<f64>,
    pub nu: f64,
    pub tau: f64,
}

impl ChainState {
    pub fn n_genes(&self) -> usize {
        self.gamma.len()
    }

    /// Checks the support constraints and finiteness of every entry.
    pub fn validate(&self, priors: &PriorConfig) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidModel(format!("chain state: {what}")));
        let finite = self.eps.iter().all(|v| v.is_finite())
            && self.gamma.iter().all(|v| v.is_finite())
            && self.beta.iter().all(|v| v.is_finite())
            && self.theta.iter().all(|v| v.is_finite())
            && self.sigma.iter().all(|v| v.is_finite())
            && self.nu.is_finite()
            && self.tau.is_finite();
        if !finite {
            return bad("non-finite entry");
        }
        if self.gamma.iter().any(|&g| g <= 0.0) {
            return bad("gamma must be positive");
        }
        if self.tau <= 0.0 {
            return bad("tau must be positive");
        }
        if !(self.nu > 0.0 && self.nu < priors.d) {
            return bad("nu outside (0, d)");
        }
        for (l, (&sig, &s)) in self.sigma.iter().zip(&priors.s).enumerate() {
            if !(sig > 0.0 && sig < s) {
                return bad(&format!("sigma[{}] outside (0, s)", l + 1));
            }
        }
        Ok(())
    }

    /// Number of f64 slots held by this state.
    pub fn storage_len(&self) -> usize {
        self.eps.len()
            + self.gamma.len()
            + self.beta.len()
            + self.theta.len()
            + self.sigma.len()
            + 2
    }
}

/// Slice-sampler widths, one per slice-sampled scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningState {
    pub eps: Array2<SliceVar>,
    pub gamma: Array1<SliceVar>,
    pub beta: Array2<SliceVar>,
    pub sigma: Array1<SliceVar>,
    pub nu: SliceVar,
    pub tau: SliceVar,
}

impl TuningState {
    pub fn new(genes: usize, samples: usize, coefficients: usize, initial_width: f64) -> Self {
        let v = SliceVar::new(initial_width);
        Self {
            eps: Array2::from_elem((genes, samples), v),
            gamma: Array1::from_elem(genes, v),
            beta: Array2::from_elem((genes, coefficients), v),
            sigma: Array1::from_elem(coefficients, v),
            nu: v,
            tau: v,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &SliceVar> {
        self.eps
            .iter()
            .chain(self.gamma.iter())
            .chain(self.beta.iter())
            .chain(self.sigma.iter())
            .chain([&self.nu, &self.tau])
    }

    /// Number of f64 slots held (two per slice variable).
    pub fn storage_len(&self) -> usize {
        2 * (self.eps.len() + self.gamma.len() + self.beta.len() + self.sigma.len() + 2)
    }
}

/// Median-of-ratios log size factors, recentred to sum to zero.
///
/// Only genes with positive counts in every sample enter the reference. Each sample's
/// size factor is the median over those genes of count / geometric mean of the gene.
pub fn estimate_offsets(counts: &CountMatrix) -> Result<Array1<f64>> {
    let y = counts.counts();
    let n = counts.n_samples();
    let mut ratios: Vec<Vec<f64>> = vec![Vec::new(); n];
    for row in y.rows() {
        if row.iter().any(|&c| c == 0) {
            continue;
        }
        let log_geo = row.iter().map(|&c| (c as f64).ln()).sum::<f64>() / n as f64;
        for (j, &c) in row.iter().enumerate() {
            ratios[j].push(((c as f64).ln() - log_geo).exp());
        }
    }
    if ratios[0].is_empty() {
        return Err(Error::Normalization);
    }
    let mut h: Array1<f64> = ratios.into_iter().map(|r| median(r).ln()).collect();
    let centre = h.mean().unwrap_or(0.0);
    h.mapv_inplace(|v| v - centre);
    Ok(h)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Log full conditional of ε_gn, where `eta` = X_n β_g.
#[inline]
pub fn log_fc_epsilon(y: f64, h: f64, eta: f64, gamma: f64, eps: f64) -> f64 {
    y * eps - clamp_exp(h + eta + eps).0 - eps * eps / (2.0 * gamma)
}

/// Inverse-gamma full conditional of γ_g as `(shape, scale)`.
pub fn gamma_fc_params(nu: f64, tau: f64, eps_row: ArrayView1<'_, f64>) -> (f64, f64) {
    let n = eps_row.len() as f64;
    let ss: f64 = eps_row.iter().map(|e| e * e).sum();
    ((nu + n) / 2.0, (nu * tau + ss) / 2.0)
}

/// Log full conditional of ν given the reductions Σ log γ_g and Σ 1/γ_g.
///
/// This is the density implied by the inverse-gamma prior on γ_g; the coupling term
/// is τ/γ_g (not ν/γ_g).
pub fn log_fc_nu(
    nu: f64,
    genes: usize,
    tau: f64,
    sum_log_gamma: f64,
    sum_inv_gamma: f64,
    d: f64,
) -> f64 {
    if !(nu > 0.0 && nu < d) {
        return f64::NEG_INFINITY;
    }
    let g = genes as f64;
    let half = nu / 2.0;
    -g * ln_gamma(half) + g * half * (half * tau).ln()
        - half * (sum_log_gamma + tau * sum_inv_gamma)
}

/// Gamma full conditional of τ as `(shape, rate)`.
pub fn tau_fc_params(a: f64, b: f64, genes: usize, nu: f64, sum_inv_gamma: f64) -> (f64, f64) {
    (a + genes as f64 * nu / 2.0, b + nu / 2.0 * sum_inv_gamma)
}

/// Log full conditional of β_gℓ evaluated at `beta_val`.
///
/// `beta_row` holds the current coefficients of gene g; its ℓ-th entry is replaced by
/// `beta_val`.
#[allow(clippy::too_many_arguments)]
pub fn log_fc_beta(
    ell: usize,
    beta_val: f64,
    y_row: ArrayView1<'_, f64>,
    h: ArrayView1<'_, f64>,
    eps_row: ArrayView1<'_, f64>,
    x: ArrayView2<'_, f64>,
    beta_row: ArrayView1<'_, f64>,
    theta: f64,
    sigma: f64,
) -> f64 {
    let mut ll = 0.0;
    for (n, xn) in x.rows().into_iter().enumerate() {
        let xnl = xn[ell];
        if xnl == 0.0 {
            continue;
        }
        let eta: f64 = xn
            .iter()
            .zip(beta_row)
            .enumerate()
            .map(|(k, (&xk, &bk))| if k == ell { xk * beta_val } else { xk * bk })
            .sum();
        ll += y_row[n] * xnl * beta_val - clamp_exp(h[n] + eps_row[n] + eta).0;
    }
    let z = beta_val - theta;
    ll - z * z / (2.0 * sigma * sigma)
}

/// Normal full conditional of θ_ℓ as `(mean, sd)`.
pub fn theta_fc_params(sum_beta: f64, genes: usize, sigma: f64, c: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    let var = 1.0 / (1.0 / (c * c) + genes as f64 / s2);
    (var * sum_beta / s2, var.sqrt())
}

/// Log full conditional of σ_ℓ on the σ scale, given ss = Σ_g (β_gℓ − θ_ℓ)².
pub fn log_fc_sigma(sigma: f64, genes: usize, ss: f64, s_bound: f64) -> f64 {
    if !(sigma > 0.0 && sigma < s_bound) {
        return f64::NEG_INFINITY;
    }
    -(genes as f64) * sigma.ln() - ss / (2.0 * sigma * sigma)
}

/// Unnormalized inverse-gamma log density (slice target for γ_g).
#[inline]
pub fn log_inv_gamma_kernel(x: f64, shape: f64, scale: f64) -> f64 {
    if x > 0.0 {
        -(shape + 1.0) * x.ln() - scale / x
    } else {
        f64::NEG_INFINITY
    }
}

/// Unnormalized gamma log density with a rate parameter (slice target for τ).
#[inline]
pub fn log_gamma_kernel(x: f64, shape: f64, rate: f64) -> f64 {
    if x > 0.0 {
        (shape - 1.0) * x.ln() - rate * x
    } else {
        f64::NEG_INFINITY
    }
}
