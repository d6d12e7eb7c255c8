//! Slice-within-Gibbs sweep over the hierarchical count model.
//!
//! Each iteration runs seven steps in a fixed order. Steps over conditionally
//! independent parameters (ε, γ and each β column) are parallel maps over genes with
//! disjoint output slots; hyperparameter steps (ν, τ, θ, σ) first reduce gene-level
//! quantities with a fixed-shape tree and then update a handful of scalars. There is
//! a barrier between steps. β columns are visited one after another because two
//! coefficients of the same gene share every count with a nonzero design entry in both
//! columns; no attempt is made to detect orthogonal columns.
//!
//! Randomness for every draw comes from its own substream keyed by
//! `(seed, chain, iteration, site)`, so a run is bit-identical for any worker count.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1, Zip};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SliceError};
use crate::model::{
    clamp_exp_diff, gamma_fc_params, log_fc_nu, log_fc_sigma, log_gamma_kernel,
    log_inv_gamma_kernel, tau_fc_params, theta_fc_params, ChainState, CountMatrix, ModelSpec,
    TuningState,
};
use crate::reduce::ReductionPlan;
use crate::rng::{Site, StreamKey, INIT_ITERATION, RUN_LEVEL_CHAIN};
use crate::slice::{slice_step, SliceConfig, SliceVar};
use crate::stats::{ContrastAccumulator, ContrastSpec, MomentAccumulator};

/// How the γ and τ full conditionals are sampled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// Slice sampling for every non-normal full conditional.
    #[default]
    SliceFaithful,
    /// Direct inverse-gamma and gamma draws for γ and τ.
    ConjugateDirect,
}

impl std::str::FromStr for SamplerMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "slice-faithful" => Ok(SamplerMode::SliceFaithful),
            "conjugate-direct" => Ok(SamplerMode::ConjugateDirect),
            other => Err(format!(
                "unknown sampler mode `{other}` (expected slice-faithful or conjugate-direct)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub chains: usize,
    /// Monitored iterations per chain, after burn-in.
    pub iterations: u64,
    pub burnin: u64,
    pub thin: u64,
    pub seed: u64,
    /// Iterations at the start of burn-in during which slice widths are not tuned.
    pub tune_cutoff: u64,
    pub max_step_out: usize,
    pub initial_width: f64,
    pub max_shrink: usize,
    /// Number of genes whose γ and β draws are kept as thinned samples.
    pub save_genes: usize,
    pub workers: usize,
    pub sampler_mode: SamplerMode,
    /// After each β column update, also shift β_gℓ and ε_g· jointly along the direction
    /// that leaves the likelihood unchanged. Off gives the plain one-at-a-time sweep.
    pub ridge_moves: bool,
    /// Run chains side by side instead of one after another.
    pub concurrent_chains: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let burnin = 100_000;
        Self {
            chains: 4,
            iterations: 100_000,
            burnin,
            thin: 20,
            seed: 1,
            tune_cutoff: SliceConfig::default_tune_cutoff(burnin),
            max_step_out: SliceConfig::DEFAULT_MAX_STEPS,
            initial_width: SliceConfig::DEFAULT_INITIAL_WIDTH,
            max_shrink: SliceConfig::DEFAULT_MAX_SHRINK,
            save_genes: 10,
            workers: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            sampler_mode: SamplerMode::SliceFaithful,
            ridge_moves: true,
            concurrent_chains: false,
        }
    }
}

impl RunConfig {
    /// Short run with the given sizes and the default tuning cutoff for that burn-in.
    pub fn quick(chains: usize, burnin: u64, iterations: u64, thin: u64, seed: u64) -> Self {
        Self {
            chains,
            burnin,
            iterations,
            thin,
            seed,
            tune_cutoff: SliceConfig::default_tune_cutoff(burnin),
            ..Self::default()
        }
    }

    pub fn slice(&self) -> SliceConfig {
        SliceConfig {
            max_steps: self.max_step_out,
            burnin: self.burnin,
            tune_cutoff: self.tune_cutoff,
            initial_width: self.initial_width,
            max_shrink: self.max_shrink,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.chains == 0 {
            return fail("chains must be at least 1".into());
        }
        if self.iterations == 0 {
            return fail("iterations must be at least 1".into());
        }
        if self.thin == 0 {
            return fail("thin must be at least 1".into());
        }
        if self.workers == 0 {
            return fail("workers must be at least 1".into());
        }
        self.slice().validate().map_err(Error::Config)
    }

    /// Saved sample rows per chain.
    pub fn saved_rows(&self) -> u64 {
        self.iterations / self.thin
    }
}

/// Whether a step is a parallel map over genes or a reduction feeding a few scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepClass {
    ParallelMap,
    Reduction,
}

/// The seven steps of one sweep; `Beta` carries the 0-based coefficient column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Step {
    Epsilon,
    Gamma,
    Nu,
    Tau,
    Beta(usize),
    Theta,
    Sigma,
}

impl Step {
    pub const NAMES: [&'static str; 7] =
        ["epsilon", "gamma", "nu", "tau", "beta", "theta", "sigma"];

    pub fn class(self) -> StepClass {
        match self {
            Step::Epsilon | Step::Gamma | Step::Beta(_) => StepClass::ParallelMap,
            Step::Nu | Step::Tau | Step::Theta | Step::Sigma => StepClass::Reduction,
        }
    }

    /// Position among [`Step::NAMES`]; all β columns share one slot.
    pub fn kind_index(self) -> usize {
        match self {
            Step::Epsilon => 0,
            Step::Gamma => 1,
            Step::Nu => 2,
            Step::Tau => 3,
            Step::Beta(_) => 4,
            Step::Theta => 5,
            Step::Sigma => 6,
        }
    }
}

/// Hooks into the scheduler, used for tracing and tests.
pub trait StepObserver: Sync {
    fn step_started(&self, _step: Step) {}
    fn step_finished(&self, _step: Step) {}
    /// A worker is about to update gene `gene` within `step`.
    fn gene_started(&self, _step: Step, _gene: usize) {}
    fn gene_finished(&self, _step: Step, _gene: usize) {}
}

/// Wall-clock seconds spent per step kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTimings(pub [f64; 7]);

impl StepTimings {
    fn add(&mut self, step: Step, d: Duration) {
        self.0[step.kind_index()] += d.as_secs_f64();
    }

    pub fn merge(&mut self, other: &StepTimings) {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            *a += b;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        Step::NAMES.iter().copied().zip(self.0.iter().copied())
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Bookkeeping returned by one sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IterationStats {
    /// Likelihood evaluations whose exponent hit [`EXP_CLAMP`](crate::model::EXP_CLAMP).
    pub clamps: u64,
    pub timings: StepTimings,
}

/// Progress notification emitted by [`ChainRunner`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub chain: usize,
    pub iteration: u64,
    pub total: u64,
    pub burnin: bool,
    pub elapsed: Duration,
}

/// Per-chain accumulators for every scalar parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainAccumulators {
    pub nu: MomentAccumulator,
    pub tau: MomentAccumulator,
    pub theta: Array1<MomentAccumulator>,
    pub sigma: Array1<MomentAccumulator>,
    pub gamma: Array1<MomentAccumulator>,
    pub beta: Array2<MomentAccumulator>,
    pub eps: Array2<MomentAccumulator>,
}

impl ChainAccumulators {
    fn new(genes: usize, samples: usize, coefs: usize) -> Self {
        let z = MomentAccumulator::new();
        Self {
            nu: z,
            tau: z,
            theta: Array1::from_elem(coefs, z),
            sigma: Array1::from_elem(coefs, z),
            gamma: Array1::from_elem(genes, z),
            beta: Array2::from_elem((genes, coefs), z),
            eps: Array2::from_elem((genes, samples), z),
        }
    }

    fn update(&mut self, s: &ChainState) {
        self.nu.update(s.nu);
        self.tau.update(s.tau);
        Zip::from(&mut self.theta)
            .and(&s.theta)
            .for_each(|a, &v| a.update(v));
        Zip::from(&mut self.sigma)
            .and(&s.sigma)
            .for_each(|a, &v| a.update(v));
        Zip::from(&mut self.gamma)
            .and(&s.gamma)
            .par_for_each(|a, &v| a.update(v));
        Zip::from(&mut self.beta)
            .and(&s.beta)
            .par_for_each(|a, &v| a.update(v));
        Zip::from(&mut self.eps)
            .and(&s.eps)
            .par_for_each(|a, &v| a.update(v));
    }

    /// Hyperparameter accumulators in sample-column order.
    pub fn hyper(&self) -> Vec<(String, MomentAccumulator)> {
        let mut out = vec![("nu".to_string(), self.nu), ("tau".to_string(), self.tau)];
        out.extend(
            self.theta
                .iter()
                .enumerate()
                .map(|(l, a)| (format!("theta[{}]", l + 1), *a)),
        );
        out.extend(
            self.sigma
                .iter()
                .enumerate()
                .map(|(l, a)| (format!("sigma[{}]", l + 1), *a)),
        );
        out
    }
}

/// Thinned draws of the hyperparameters and of the retained genes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTable {
    pub columns: Vec<String>,
    /// Monitored iteration index (1-based, counted after burn-in) of each row.
    pub iterations: Vec<u64>,
    pub rows: Vec<Vec<f64>>,
}

impl SampleTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Everything a chain hands back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub chain: usize,
    pub accumulators: ChainAccumulators,
    pub contrasts: Vec<ContrastAccumulator>,
    pub samples: SampleTable,
    /// 0-based indices of the retained genes.
    pub saved_genes: Vec<usize>,
    pub clamps: u64,
    pub timings: StepTimings,
    /// f64 slots of parameter and tuning state held while the chain ran.
    pub state_slots: usize,
    pub final_state: ChainState,
    pub final_tuning: TuningState,
}

/// Column names of the retained-sample table.
pub fn sample_columns(coefs: usize, saved_genes: &[usize]) -> Vec<String> {
    let mut cols = vec!["nu".to_string(), "tau".to_string()];
    cols.extend((1..=coefs).map(|l| format!("theta[{l}]")));
    cols.extend((1..=coefs).map(|l| format!("sigma[{l}]")));
    for &g in saved_genes {
        cols.push(format!("gamma[{}]", g + 1));
        cols.extend((1..=coefs).map(|l| format!("beta[{},{l}]", g + 1)));
    }
    cols
}

/// Retained gene subset, identical for every chain of a run.
pub fn choose_saved_genes(seed: u64, genes: usize, count: usize) -> Vec<usize> {
    let mut rng = StreamKey::new(seed, RUN_LEVEL_CHAIN).stream(INIT_ITERATION, Site::SaveGenes);
    let mut picked = rand::seq::index::sample(&mut rng, genes, count.min(genes)).into_vec();
    picked.sort_unstable();
    picked
}

/// Sweep machinery bound to one dataset, model and chain.
pub struct Sampler<'a> {
    spec: &'a ModelSpec,
    cfg: &'a RunConfig,
    slice: SliceConfig,
    chain: usize,
    key: StreamKey,
    counts: Array2<f64>,
    plan: ReductionPlan,
    /// Rows with a nonzero entry in each design column.
    active_rows: Vec<Vec<usize>>,
    /// Σ_n y_gn X_nℓ, genes × coefficients.
    count_design: Array2<f64>,
    observer: Option<&'a dyn StepObserver>,
}

impl<'a> Sampler<'a> {
    pub fn new(
        data: &CountMatrix,
        spec: &'a ModelSpec,
        cfg: &'a RunConfig,
        chain: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.n_samples() != spec.n_samples() {
            return Err(Error::InvalidModel(format!(
                "count table has {} samples but the model matrix has {} rows",
                data.n_samples(),
                spec.n_samples()
            )));
        }
        let counts = data.counts().mapv(|c| c as f64);
        let x = spec.design();
        let active_rows = (0..spec.n_coefficients())
            .map(|l| {
                (0..spec.n_samples())
                    .filter(|&n| x[[n, l]] != 0.0)
                    .collect()
            })
            .collect();
        let count_design = counts.dot(&x);
        Ok(Self {
            spec,
            cfg,
            slice: cfg.slice(),
            chain,
            key: StreamKey::new(cfg.seed, chain as u64),
            counts,
            plan: ReductionPlan::new(data.n_genes()),
            active_rows,
            count_design,
            observer: None,
        })
    }

    pub fn with_observer(mut self, observer: &'a dyn StepObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    fn genes(&self) -> usize {
        self.counts.nrows()
    }

    /// Starting values; chains after the first are jittered for overdispersed starts.
    pub fn initial_state(&self) -> ChainState {
        let (g, n) = self.counts.dim();
        let l = self.spec.n_coefficients();
        let priors = self.spec.priors();
        let h_mean = self.spec.offsets().mean().unwrap_or(0.0);
        let mut beta = Array2::zeros((g, l));
        for (gi, row) in self.counts.rows().into_iter().enumerate() {
            beta[[gi, 0]] = (row.mean().unwrap_or(0.0) + 1.0).ln() - h_mean;
        }
        let theta = beta.mean_axis(ndarray::Axis(0)).expect("at least one gene");
        let mut state = ChainState {
            eps: Array2::zeros((g, n)),
            gamma: Array1::ones(g),
            beta,
            theta,
            sigma: priors
                .s
                .iter()
                .map(|&s| if s > 1.0 { 1.0 } else { s / 2.0 })
                .collect(),
            nu: if priors.d > 2.0 { 2.0 } else { priors.d / 2.0 },
            tau: 1.0,
        };
        if self.chain > 0 {
            self.jitter(&mut state);
        }
        state
    }

    fn jitter(&self, s: &mut ChainState) {
        const SCALE: f64 = 0.5;
        let priors = self.spec.priors();
        let block = |b: u8| self.key.stream(INIT_ITERATION, Site::Init { block: b });
        let z = |rng: &mut rand_chacha::ChaCha8Rng| SCALE * rng.sample::<f64, _>(StandardNormal);
        let inside = |x: f64, lo: f64, hi: f64| {
            let margin = (0.25 * (hi - lo)).min(0.05);
            x.clamp(lo + margin, hi - margin)
        };

        let mut r = block(0);
        s.eps.iter_mut().for_each(|v| *v += z(&mut r));
        let mut r = block(1);
        s.gamma
            .iter_mut()
            .for_each(|v| *v = inside(*v + z(&mut r), 0.0, f64::INFINITY));
        let mut r = block(2);
        s.beta.iter_mut().for_each(|v| *v += z(&mut r));
        let mut r = block(3);
        s.theta.iter_mut().for_each(|v| *v += z(&mut r));
        let mut r = block(4);
        for (v, &hi) in s.sigma.iter_mut().zip(&priors.s) {
            *v = inside(*v + z(&mut r), 0.0, hi);
        }
        let mut r = block(5);
        s.nu = inside(s.nu + z(&mut r), 0.0, priors.d);
        let mut r = block(6);
        s.tau = inside(s.tau + z(&mut r), 0.0, f64::INFINITY);
    }

    pub fn initial_tuning(&self) -> TuningState {
        let (g, n) = self.counts.dim();
        TuningState::new(g, n, self.spec.n_coefficients(), self.cfg.initial_width)
    }

    /// One full sweep at (1-based) iteration `m`.
    pub fn iterate(
        &self,
        state: &mut ChainState,
        tuning: &mut TuningState,
        m: u64,
    ) -> Result<IterationStats> {
        let mut stats = IterationStats::default();
        let timed = |step: Step,
                     stats: &mut IterationStats,
                     f: &mut dyn FnMut() -> Result<u64>|
         -> Result<()> {
            if let Some(o) = self.observer {
                o.step_started(step);
            }
            let t = Instant::now();
            let clamps = f()?;
            stats.timings.add(step, t.elapsed());
            stats.clamps += clamps;
            if let Some(o) = self.observer {
                o.step_finished(step);
            }
            Ok(())
        };

        timed(Step::Epsilon, &mut stats, &mut || {
            self.step_epsilon(state, tuning, m)
        })?;
        timed(Step::Gamma, &mut stats, &mut || {
            self.step_gamma(state, tuning, m)
        })?;
        // γ does not change between the ν and τ updates, so both reuse one reduction.
        let [sum_log_gamma, sum_inv_gamma] = self.plan.sum_many(|g| {
            let v = state.gamma[g];
            [v.ln(), 1.0 / v]
        });
        timed(Step::Nu, &mut stats, &mut || {
            self.step_nu(state, tuning, m, sum_log_gamma, sum_inv_gamma)
                .map(|_| 0)
        })?;
        timed(Step::Tau, &mut stats, &mut || {
            self.step_tau(state, tuning, m, sum_inv_gamma).map(|_| 0)
        })?;
        for l in 0..self.spec.n_coefficients() {
            timed(Step::Beta(l), &mut stats, &mut || {
                self.step_beta(state, tuning, m, l)
            })?;
        }
        timed(Step::Theta, &mut stats, &mut || {
            self.step_theta(state, m);
            Ok(0)
        })?;
        timed(Step::Sigma, &mut stats, &mut || {
            self.step_sigma(state, tuning, m).map(|_| 0)
        })?;
        Ok(stats)
    }

    fn stall(step: Step, site: String, source: SliceError) -> Error {
        Error::Stall { step, site, source }
    }

    fn observe<T>(&self, step: Step, gene: usize, f: impl FnOnce() -> T) -> T {
        match self.observer {
            None => f(),
            Some(o) => {
                o.gene_started(step, gene);
                let out = f();
                o.gene_finished(step, gene);
                out
            }
        }
    }

    /// First error in gene order, or the total clamp count.
    fn gather(results: Array1<Result<u64>>) -> Result<u64> {
        let mut total = 0;
        for r in results {
            total += r?;
        }
        Ok(total)
    }

    /// Updates ε_g· for one gene.
    pub fn epsilon_gene(
        &self,
        gene: usize,
        mut eps_row: ArrayViewMut1<'_, f64>,
        mut tune_row: ArrayViewMut1<'_, SliceVar>,
        beta_row: ArrayView1<'_, f64>,
        gamma: f64,
        m: u64,
    ) -> Result<u64> {
        let x = self.spec.design();
        let h = self.spec.offsets();
        let samples = eps_row.len();
        let mut clamps = 0u64;
        for n in 0..samples {
            let y = self.counts[[gene, n]];
            let base = h[n] + x.row(n).dot(&beta_row);
            let e0 = eps_row[n];
            let inv_two_var = 1.0 / (2.0 * gamma);
            // Relative to the current value, so that huge counts do not swamp the slice height.
            let logf = |e: f64| {
                let d = e - e0;
                let (dmu, hit) = clamp_exp_diff(base + e0, d);
                clamps += hit as u64;
                y * d - dmu - d * (e + e0) * inv_two_var
            };
            let mut rng = self.key.stream(
                m,
                Site::Epsilon {
                    gene,
                    sample: n,
                    samples,
                },
            );
            eps_row[n] = slice_step(logf, eps_row[n], &mut tune_row[n], &self.slice, m, &mut rng)
                .map_err(|e| {
                Self::stall(
                    Step::Epsilon,
                    format!("gene {}, sample {}", gene + 1, n + 1),
                    e,
                )
            })?;
        }
        Ok(clamps)
    }

    fn step_epsilon(
        &self,
        state: &mut ChainState,
        tuning: &mut TuningState,
        m: u64,
    ) -> Result<u64> {
        let ChainState {
            eps, beta, gamma, ..
        } = state;
        let results = Zip::indexed(eps.rows_mut())
            .and(tuning.eps.rows_mut())
            .and(beta.rows())
            .and(&*gamma)
            .par_map_collect(|g, e, t, b, &gam| {
                self.observe(Step::Epsilon, g, || self.epsilon_gene(g, e, t, b, gam, m))
            });
        Self::gather(results)
    }

    /// Draws γ_g for one gene from its inverse-gamma full conditional.
    pub fn gamma_gene(
        &self,
        gene: usize,
        gamma: &mut f64,
        tune: &mut SliceVar,
        eps_row: ArrayView1<'_, f64>,
        nu: f64,
        tau: f64,
        m: u64,
    ) -> Result<u64> {
        let (shape, scale) = gamma_fc_params(nu, tau, eps_row);
        let mut rng = self.key.stream(m, Site::Gamma { gene });
        *gamma = match self.cfg.sampler_mode {
            SamplerMode::SliceFaithful => slice_step(
                |v| log_inv_gamma_kernel(v, shape, scale),
                *gamma,
                tune,
                &self.slice,
                m,
                &mut rng,
            )
            .map_err(|e| Self::stall(Step::Gamma, format!("gene {}", gene + 1), e))?,
            SamplerMode::ConjugateDirect => {
                let draw: f64 = Gamma::new(shape, 1.0 / scale)
                    .expect("positive parameters")
                    .sample(&mut rng);
                1.0 / draw
            }
        };
        Ok(0)
    }

    fn step_gamma(&self, state: &mut ChainState, tuning: &mut TuningState, m: u64) -> Result<u64> {
        let ChainState {
            eps,
            gamma,
            nu,
            tau,
            ..
        } = state;
        let (nu, tau) = (*nu, *tau);
        let results = Zip::indexed(gamma)
            .and(&mut tuning.gamma)
            .and(eps.rows())
            .par_map_collect(|g, gam, t, e| {
                self.observe(Step::Gamma, g, || self.gamma_gene(g, gam, t, e, nu, tau, m))
            });
        Self::gather(results)
    }

    fn step_nu(
        &self,
        state: &mut ChainState,
        tuning: &mut TuningState,
        m: u64,
        sum_log: f64,
        sum_inv: f64,
    ) -> Result<()> {
        let genes = self.genes();
        let d = self.spec.priors().d;
        let tau = state.tau;
        let mut rng = self.key.stream(m, Site::Nu);
        state.nu = slice_step(
            |v| log_fc_nu(v, genes, tau, sum_log, sum_inv, d),
            state.nu,
            &mut tuning.nu,
            &self.slice,
            m,
            &mut rng,
        )
        .map_err(|e| Self::stall(Step::Nu, "nu".into(), e))?;
        Ok(())
    }

    fn step_tau(
        &self,
        state: &mut ChainState,
        tuning: &mut TuningState,
        m: u64,
        sum_inv: f64,
    ) -> Result<()> {
        let p = self.spec.priors();
        let (shape, rate) = tau_fc_params(p.a, p.b, self.genes(), state.nu, sum_inv);
        let mut rng = self.key.stream(m, Site::Tau);
        state.tau = match self.cfg.sampler_mode {
            SamplerMode::SliceFaithful => slice_step(
                |v| log_gamma_kernel(v, shape, rate),
                state.tau,
                &mut tuning.tau,
                &self.slice,
                m,
                &mut rng,
            )
            .map_err(|e| Self::stall(Step::Tau, "tau".into(), e))?,
            SamplerMode::ConjugateDirect => Gamma::new(shape, 1.0 / rate)
                .expect("positive parameters")
                .sample(&mut rng),
        };
        Ok(())
    }

    /// Log full conditional of β_gℓ as evaluated inside the sweep, relative to its value
    /// at the current β_gℓ (so it is 0 there). Terms with X_nℓ = 0 are dropped and
    /// Σ_n y_gn X_nℓ is precomputed.
    pub fn beta_conditional<'s>(
        &'s self,
        gene: usize,
        l: usize,
        beta_row: ArrayView1<'_, f64>,
        eps_row: ArrayView1<'_, f64>,
        theta: f64,
        sigma: f64,
    ) -> impl Fn(f64) -> (f64, u64) + 's {
        let x = self.spec.design();
        let h = self.spec.offsets();
        let rows = &self.active_rows[l];
        let b0 = beta_row[l];
        let terms: Vec<(f64, f64)> = rows
            .iter()
            .map(|&n| {
                let xn = x.row(n);
                let others: f64 = xn
                    .iter()
                    .zip(beta_row)
                    .enumerate()
                    .filter(|&(k, _)| k != l)
                    .map(|(_, (&xk, &bk))| xk * bk)
                    .sum();
                (h[n] + eps_row[n] + others + xn[l] * b0, xn[l])
            })
            .collect();
        let linear = self.count_design[[gene, l]];
        let inv_two_var = 1.0 / (2.0 * sigma * sigma);
        move |b: f64| {
            let d = b - b0;
            let mut clamps = 0;
            let mut ll = linear * d;
            for &(eta0, xnl) in &terms {
                let (dmu, hit) = clamp_exp_diff(eta0, xnl * d);
                clamps += hit as u64;
                ll -= dmu;
            }
            (ll - d * (b + b0 - 2.0 * theta) * inv_two_var, clamps)
        }
    }

    /// Updates β_gℓ for one gene.
    #[allow(clippy::too_many_arguments)]
    pub fn beta_gene(
        &self,
        gene: usize,
        l: usize,
        mut beta_row: ArrayViewMut1<'_, f64>,
        tune: &mut SliceVar,
        eps_row: ArrayView1<'_, f64>,
        theta: f64,
        sigma: f64,
        m: u64,
    ) -> Result<u64> {
        let coefs = beta_row.len();
        let f = self.beta_conditional(gene, l, beta_row.view(), eps_row, theta, sigma);
        let mut clamps = 0;
        let logf = |b: f64| {
            let (v, c) = f(b);
            clamps += c;
            v
        };
        let mut rng = self.key.stream(
            m,
            Site::Beta {
                gene,
                coef: l,
                coefs,
            },
        );
        beta_row[l] =
            slice_step(logf, beta_row[l], tune, &self.slice, m, &mut rng).map_err(|e| {
                Self::stall(
                    Step::Beta(l),
                    format!("gene {}, coefficient {}", gene + 1, l + 1),
                    e,
                )
            })?;
        Ok(clamps)
    }

    /// Mean and precision of the shift δ in β_gℓ + δ, ε_g· − δ X_·ℓ.
    ///
    /// The likelihood only sees X_nβ_g + ε_gn, so δ is Gaussian under the two priors.
    pub fn ridge_params(
        &self,
        l: usize,
        beta: f64,
        eps_row: ArrayView1<'_, f64>,
        gamma: f64,
        theta: f64,
        sigma: f64,
    ) -> (f64, f64) {
        let design = self.spec.design();
        let x = design.column(l);
        let s2 = sigma * sigma;
        let (mut prec, mut lin) = (1.0 / s2, (theta - beta) / s2);
        for (&xn, &e) in x.iter().zip(eps_row) {
            prec += xn * xn / gamma;
            lin += e * xn / gamma;
        }
        (lin / prec, prec)
    }

    /// Exact draw of the ridge shift for one gene and coefficient.
    #[allow(clippy::too_many_arguments)]
    pub fn ridge_gene(
        &self,
        gene: usize,
        l: usize,
        mut beta_row: ArrayViewMut1<'_, f64>,
        mut eps_row: ArrayViewMut1<'_, f64>,
        gamma: f64,
        theta: f64,
        sigma: f64,
        m: u64,
    ) {
        let (mean, prec) = self.ridge_params(l, beta_row[l], eps_row.view(), gamma, theta, sigma);
        let coefs = beta_row.len();
        let mut rng = self.key.stream(
            m,
            Site::Ridge {
                gene,
                coef: l,
                coefs,
            },
        );
        let delta = mean + rng.sample::<f64, _>(StandardNormal) / prec.sqrt();
        beta_row[l] += delta;
        eps_row.scaled_add(-delta, &self.spec.design().column(l));
    }

    fn step_beta(
        &self,
        state: &mut ChainState,
        tuning: &mut TuningState,
        m: u64,
        l: usize,
    ) -> Result<u64> {
        let ChainState {
            eps,
            gamma,
            beta,
            theta,
            sigma,
            ..
        } = state;
        let (th, sg) = (theta[l], sigma[l]);
        let ridge = self.cfg.ridge_moves;
        let results = Zip::indexed(beta.rows_mut())
            .and(tuning.beta.column_mut(l))
            .and(eps.rows_mut())
            .and(&*gamma)
            .par_map_collect(|g, mut b, t, mut e, &gam| {
                self.observe(Step::Beta(l), g, || {
                    let clamps = self.beta_gene(g, l, b.view_mut(), t, e.view(), th, sg, m)?;
                    if ridge {
                        self.ridge_gene(g, l, b, e.view_mut(), gam, th, sg, m);
                    }
                    Ok(clamps)
                })
            });
        Self::gather(results)
    }

    fn step_theta(&self, state: &mut ChainState, m: u64) {
        let genes = self.genes();
        let c = &self.spec.priors().c;
        for l in 0..self.spec.n_coefficients() {
            let beta = &state.beta;
            let sum = self.plan.sum(|g| beta[[g, l]]);
            let (mean, sd) = theta_fc_params(sum, genes, state.sigma[l], c[l]);
            let mut rng = self.key.stream(m, Site::Theta { coef: l });
            let z: f64 = rng.sample(StandardNormal);
            state.theta[l] = mean + sd * z;
        }
    }

    fn step_sigma(&self, state: &mut ChainState, tuning: &mut TuningState, m: u64) -> Result<()> {
        let genes = self.genes();
        let s = &self.spec.priors().s;
        for l in 0..self.spec.n_coefficients() {
            let beta = &state.beta;
            let theta = state.theta[l];
            let ss = self.plan.sum(|g| {
                let d = beta[[g, l]] - theta;
                d * d
            });
            let bound = s[l];
            let mut rng = self.key.stream(m, Site::Sigma { coef: l });
            state.sigma[l] = slice_step(
                |v| log_fc_sigma(v, genes, ss, bound),
                state.sigma[l],
                &mut tuning.sigma[l],
                &self.slice,
                m,
                &mut rng,
            )
            .map_err(|e| Self::stall(Step::Sigma, format!("sigma[{}]", l + 1), e))?;
        }
        Ok(())
    }
}

/// One sweep for chain `chain` at iteration `m`, without a long-lived [`Sampler`].
pub fn iterate(
    state: &mut ChainState,
    tuning: &mut TuningState,
    data: &CountMatrix,
    spec: &ModelSpec,
    cfg: &RunConfig,
    chain: usize,
    m: u64,
) -> Result<IterationStats> {
    Sampler::new(data, spec, cfg, chain)?.iterate(state, tuning, m)
}

/// Runs whole chains: burn-in with tuning, then monitored iterations that feed the
/// accumulators every iteration and keep thinned samples of the hyperparameters and
/// retained genes. Only the current state is held in memory.
pub struct ChainRunner<'a> {
    data: &'a CountMatrix,
    spec: &'a ModelSpec,
    cfg: &'a RunConfig,
    contrasts: &'a [ContrastSpec],
    observer: Option<&'a dyn StepObserver>,
    progress: Option<&'a (dyn Fn(&Progress) + Sync)>,
}

impl<'a> ChainRunner<'a> {
    pub fn new(
        data: &'a CountMatrix,
        spec: &'a ModelSpec,
        cfg: &'a RunConfig,
        contrasts: &'a [ContrastSpec],
    ) -> Self {
        Self {
            data,
            spec,
            cfg,
            contrasts,
            observer: None,
            progress: None,
        }
    }

    pub fn observer(mut self, observer: &'a dyn StepObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn progress(mut self, progress: &'a (dyn Fn(&Progress) + Sync)) -> Self {
        self.progress = Some(progress);
        self
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", self.cfg.workers)))
    }

    /// Runs one chain on a pool of `cfg.workers` threads.
    pub fn run(&self, chain: usize) -> Result<ChainOutput> {
        self.pool()?.install(|| self.run_in_pool(chain))
    }

    /// Runs all `cfg.chains` chains, sequentially or side by side.
    pub fn run_all(&self) -> Result<Vec<ChainOutput>> {
        let pool = self.pool()?;
        pool.install(|| {
            if self.cfg.concurrent_chains {
                use rayon::prelude::*;
                (0..self.cfg.chains)
                    .into_par_iter()
                    .map(|c| self.run_in_pool(c))
                    .collect()
            } else {
                (0..self.cfg.chains).map(|c| self.run_in_pool(c)).collect()
            }
        })
    }

    fn run_in_pool(&self, chain: usize) -> Result<ChainOutput> {
        let mut sampler = Sampler::new(self.data, self.spec, self.cfg, chain)?;
        if let Some(o) = self.observer {
            sampler = sampler.with_observer(o);
        }
        let (g, n) = (self.data.n_genes(), self.data.n_samples());
        let l = self.spec.n_coefficients();
        let saved_genes = choose_saved_genes(self.cfg.seed, g, self.cfg.save_genes);
        let columns = sample_columns(l, &saved_genes);

        let mut state = sampler.initial_state();
        state.validate(self.spec.priors())?;
        let mut tuning = sampler.initial_tuning();
        let mut acc = ChainAccumulators::new(g, n, l);
        let mut contrast_acc: Vec<ContrastAccumulator> = self
            .contrasts
            .iter()
            .map(|c| ContrastAccumulator::new(c, g))
            .collect();
        let mut samples = SampleTable {
            columns,
            iterations: Vec::with_capacity(self.cfg.saved_rows() as usize),
            rows: Vec::with_capacity(self.cfg.saved_rows() as usize),
        };
        let mut clamps = 0;
        let mut timings = StepTimings::default();

        let total = self.cfg.burnin + self.cfg.iterations;
        let report_every = (total / 20).max(1);
        let start = Instant::now();
        for m in 1..=total {
            let stats = sampler.iterate(&mut state, &mut tuning, m)?;
            clamps += stats.clamps;
            timings.merge(&stats.timings);

            if m > self.cfg.burnin {
                let t = m - self.cfg.burnin;
                acc.update(&state);
                for (a, spec) in contrast_acc.iter_mut().zip(self.contrasts) {
                    a.update(spec, &state);
                }
                if t % self.cfg.thin == 0 {
                    samples.iterations.push(t);
                    samples.rows.push(retained_row(&state, &saved_genes));
                }
            }
            if let Some(p) = self.progress {
                if m % report_every == 0 || m == total {
                    p(&Progress {
                        chain,
                        iteration: m,
                        total,
                        burnin: m <= self.cfg.burnin,
                        elapsed: start.elapsed(),
                    });
                }
            }
        }
        if clamps > 0 {
            log::warn!("chain {}: exponent clamp hit {clamps} times", chain + 1);
        }
        Ok(ChainOutput {
            chain,
            accumulators: acc,
            contrasts: contrast_acc,
            samples,
            saved_genes,
            clamps,
            timings,
            state_slots: state.storage_len() + tuning.storage_len(),
            final_state: state,
            final_tuning: tuning,
        })
    }
}

fn retained_row(s: &ChainState, saved_genes: &[usize]) -> Vec<f64> {
    let l = s.theta.len();
    let mut row = Vec::with_capacity(2 + 2 * l + saved_genes.len() * (1 + l));
    row.push(s.nu);
    row.push(s.tau);
    row.extend(s.theta.iter());
    row.extend(s.sigma.iter());
    for &g in saved_genes {
        row.push(s.gamma[g]);
        row.extend(s.beta.row(g).iter());
    }
    row
}

/// Runs chain `chain` with default hooks.
pub fn run_chain(
    data: &CountMatrix,
    spec: &ModelSpec,
    cfg: &RunConfig,
    contrasts: &[ContrastSpec],
    chain: usize,
) -> Result<ChainOutput> {
    ChainRunner::new(data, spec, cfg, contrasts).run(chain)
}

/// Runs every chain of `cfg`.
pub fn run_chains(
    data: &CountMatrix,
    spec: &ModelSpec,
    cfg: &RunConfig,
    contrasts: &[ContrastSpec],
) -> Result<Vec<ChainOutput>> {
    ChainRunner::new(data, spec, cfg, contrasts).run_all()
}
