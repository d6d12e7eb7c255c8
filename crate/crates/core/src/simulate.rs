//! Synthetic data: ancestral sampling from the model and resampling-based inflation of
//! an existing count table.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CountMatrix, EXP_CLAMP};
use crate::rng::{Site, StreamKey, INIT_ITERATION, RUN_LEVEL_CHAIN};

/// Fixed hyperparameters of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub nu: f64,
    pub tau: f64,
    pub theta: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub genes: usize,
    pub design: Array2<f64>,
    /// Log-scale sample offsets; zero when absent.
    pub offsets: Option<Array1<f64>>,
    pub truth: Hyperparameters,
    /// Overrides every γ_g instead of drawing it.
    pub fixed_gamma: Option<f64>,
    pub seed: u64,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Simulation(m));
        let (n, l) = self.design.dim();
        if self.genes == 0 || n == 0 || l == 0 {
            return fail(format!(
                "empty dimensions: {} genes, design {n}x{l}",
                self.genes
            ));
        }
        if self.truth.theta.len() != l || self.truth.sigma.len() != l {
            return fail(format!(
                "design has {l} columns but theta has {} and sigma has {} entries",
                self.truth.theta.len(),
                self.truth.sigma.len()
            ));
        }
        if let Some(h) = &self.offsets {
            if h.len() != n {
                return fail(format!("{} offsets for {n} samples", h.len()));
            }
        }
        let t = &self.truth;
        if !(t.nu > 0.0 && t.tau > 0.0) || t.nu.is_infinite() || t.tau.is_infinite() {
            return fail(format!(
                "nu and tau must be positive and finite (nu={}, tau={})",
                t.nu, t.tau
            ));
        }
        if t.sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite()))
            || t.theta.iter().any(|v| !v.is_finite())
        {
            return fail("theta must be finite and sigma non-negative".into());
        }
        if let Some(g) = self.fixed_gamma {
            if !(g > 0.0 && g.is_finite()) {
                return fail(format!("fixed gamma must be positive, got {g}"));
            }
        }
        if self.design.iter().any(|v| !v.is_finite()) {
            return fail("design has non-finite entries".into());
        }
        Ok(())
    }
}

/// Every parameter value used to generate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub hyper: Hyperparameters,
    pub offsets: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array2<f64>,
    pub eps: Array2<f64>,
}

struct GeneDraw {
    gamma: f64,
    beta: Vec<f64>,
    eps: Vec<f64>,
    counts: Vec<u64>,
}

/// Draws β, γ, ε and counts gene by gene; each gene has its own substream.
pub fn generate(spec: &SimSpec) -> Result<(CountMatrix, SimTruth)> {
    spec.validate()?;
    let (n, l) = spec.design.dim();
    let h = spec.offsets.clone().unwrap_or_else(|| Array1::zeros(n));
    let key = StreamKey::new(spec.seed, RUN_LEVEL_CHAIN);
    let t = &spec.truth;
    let gamma_dist = Gamma::new(t.nu / 2.0, 2.0 / (t.nu * t.tau)).map_err(|e| {
        Error::Simulation(format!(
            "invalid gamma prior (nu={}, tau={}): {e}",
            t.nu, t.tau
        ))
    })?;

    let draws: Vec<Result<GeneDraw>> = (0..spec.genes)
        .into_par_iter()
        .map(|g| {
            let mut rng = key.stream(INIT_ITERATION, Site::Simulate { gene: g });
            let beta: Vec<f64> = (0..l)
                .map(|k| t.theta[k] + t.sigma[k] * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let gamma = match spec.fixed_gamma {
                Some(v) => v,
                None => 1.0 / gamma_dist.sample(&mut rng),
            };
            let sd = gamma.sqrt();
            let eps: Vec<f64> = (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
            let mut counts = Vec::with_capacity(n);
            for j in 0..n {
                let eta: f64 = (0..l).map(|k| spec.design[[j, k]] * beta[k]).sum();
                let log_mean = h[j] + eps[j] + eta;
                let reject = |why: String| {
                    Error::Simulation(format!(
                        "gene {}, sample {}: log mean {log_mean:.3} (h={:.3}, eps={:.3}, x.beta={eta:.3}, gamma={gamma:.3e}) {why}",
                        g + 1,
                        j + 1,
                        h[j],
                        eps[j],
                    ))
                };
                if !(log_mean <= EXP_CLAMP) {
                    return Err(reject(format!("exceeds the clamp {EXP_CLAMP}")));
                }
                let mean = log_mean.exp();
                let y = if mean == 0.0 {
                    0.0
                } else {
                    Poisson::new(mean).map_err(|e| reject(e.to_string()))?.sample(&mut rng)
                };
                counts.push(y as u64);
            }
            Ok(GeneDraw {
                gamma,
                beta,
                eps,
                counts,
            })
        })
        .collect();

    let mut gamma = Array1::zeros(spec.genes);
    let mut beta = Array2::zeros((spec.genes, l));
    let mut eps = Array2::zeros((spec.genes, n));
    let mut counts = Array2::zeros((spec.genes, n));
    for (g, d) in draws.into_iter().enumerate() {
        let d = d?;
        gamma[g] = d.gamma;
        beta.row_mut(g).assign(&Array1::from(d.beta));
        eps.row_mut(g).assign(&Array1::from(d.eps));
        counts.row_mut(g).assign(&Array1::from(d.counts));
    }
    let data = CountMatrix::from_counts(counts)?;
    Ok((
        data,
        SimTruth {
            hyper: t.clone(),
            offsets: h,
            gamma,
            beta,
            eps,
        },
    ))
}

/// Concatenates whole copies of `base` side by side until there are `samples` columns.
pub fn duplicate_columns(base: &CountMatrix, samples: usize) -> Result<CountMatrix> {
    let n = base.n_samples();
    if samples == 0 || samples % n != 0 {
        return Err(Error::Simulation(format!(
            "target sample count {samples} is not a positive multiple of the base sample count {n}"
        )));
    }
    let copies = samples / n;
    let views: Vec<_> = (0..copies).map(|_| base.counts()).collect();
    let counts = concatenate(Axis(1), &views).expect("equal row counts");
    let names = (0..copies)
        .flat_map(|k| {
            base.samples().iter().map(move |s| {
                if k == 0 {
                    s.clone()
                } else {
                    format!("{s}.{}", k + 1)
                }
            })
        })
        .collect();
    CountMatrix::new(base.genes().to_vec(), names, counts)
}

/// Inflates a dataset: duplicates columns to `samples`, then draws `genes` rows with
/// replacement. Gene identifiers are carried over, so duplicates are expected.
pub fn resample(
    base: &CountMatrix,
    genes: usize,
    samples: usize,
    seed: u64,
) -> Result<CountMatrix> {
    if genes == 0 {
        return Err(Error::Simulation(
            "target gene count must be positive".into(),
        ));
    }
    let wide = duplicate_columns(base, samples)?;
    let mut rng = StreamKey::new(seed, RUN_LEVEL_CHAIN).stream(INIT_ITERATION, Site::Resample);
    let rows: Vec<usize> = (0..genes)
        .map(|_| rng.random_range(0..wide.n_genes()))
        .collect();
    let counts = wide.counts().select(Axis(0), &rows);
    let names = rows.iter().map(|&r| wide.genes()[r].clone()).collect();
    CountMatrix::new(names, wide.samples().to_vec(), counts)
}
