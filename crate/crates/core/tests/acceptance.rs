//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run everything with `cargo test -p plgibbs --test acceptance`, or a subset by number:
//! `cargo test -p plgibbs --test acceptance -- 1 4 7`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{array, concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal as NormalDist, StandardNormal};
use statrs::distribution::{ContinuousCDF, Gamma, InverseGamma, Normal};

use plgibbs::design::{heterosis_design, Heterosis};
use plgibbs::diagnostics::{credible_interval, effective_sample_size, gelman_rhat, RHAT_THRESHOLD};
use plgibbs::engine::{run_chains, ChainOutput, RunConfig, SamplerMode};
use plgibbs::io::{write_results, RunRecord};
use plgibbs::model::{estimate_offsets, log_gamma_kernel, log_inv_gamma_kernel};
use plgibbs::rng::{substream, Site};
use plgibbs::simulate::{generate, resample, Hyperparameters, SimSpec};
use plgibbs::slice::{slice_step, tune_update, SliceConfig, SliceVar};
use plgibbs::stats::{ContrastSpec, MomentAccumulator, ParamDims};
use plgibbs::{CountMatrix, ModelSpec, PriorConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [Criterion; 10] = [
        (1, "slice sampler KS", slice_sampler_ks),
        (2, "tuning recursion", tuning_recursion),
        (3, "streaming moments", streaming_moments),
        (4, "R-hat hand case", rhat_hand_case),
        (5, "conjugate cross-check", conjugate_cross_check),
        (6, "posterior recovery", posterior_recovery),
        (7, "determinism", determinism),
        (8, "scaling shape", scaling_shape),
        (9, "contrast consistency", contrast_consistency),
        (10, "ESS oracle", ess_oracle),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {n:>2} [{name}]: {} ({:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

/// Asymptotic Kolmogorov tail probability P(K > d√n).
fn ks_p_value(d: f64, n: usize) -> f64 {
    let x = d * (n as f64).sqrt();
    let s: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            let sign = if k as u64 % 2 == 1 { 1.0 } else { -1.0 };
            2.0 * sign * (-2.0 * k * k * x * x).exp()
        })
        .sum();
    s.clamp(0.0, 1.0)
}

fn ks_statistic(mut draws: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    draws
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// 10⁵ retained draws per target, taken every 25th slice update after a tuned burn-in
/// so that the retained draws are close to independent.
fn slice_sampler_ks() -> Outcome {
    const DRAWS: usize = 100_000;
    const THIN: u64 = 25;
    const BURNIN: u64 = 2000;
    type LogF = fn(f64) -> f64;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let gamma = Gamma::new(3.0, 2.0).unwrap();
    let inv_gamma = InverseGamma::new(2.0, 3.0).unwrap();
    let targets: [(&str, LogF, &dyn Fn(f64) -> f64, f64); 3] = [
        ("N(0,1)", |x| -0.5 * x * x, &|x| normal.cdf(x), 0.0),
        (
            "Gamma(3,rate 2)",
            |x| log_gamma_kernel(x, 3.0, 2.0),
            &|x| gamma.cdf(x),
            1.0,
        ),
        (
            "InvGamma(2,3)",
            |x| log_inv_gamma_kernel(x, 2.0, 3.0),
            &|x| inv_gamma.cdf(x),
            1.0,
        ),
    ];
    let cfg = SliceConfig {
        tune_cutoff: 200,
        ..SliceConfig::with_burnin(BURNIN)
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, (name, logf, cdf, x0)) in targets.into_iter().enumerate() {
        let start = Instant::now();
        let mut var = SliceVar::new(1.0);
        let mut x = x0;
        let mut draws = Vec::with_capacity(DRAWS);
        let total = BURNIN + THIN * DRAWS as u64;
        for m in 1..=total {
            let mut rng = substream(2024, k as u64, m, Site::Nu.id());
            x = slice_step(logf, x, &mut var, &cfg, m, &mut rng).expect("slice step");
            if m > BURNIN && (m - BURNIN) % THIN == 0 {
                draws.push(x);
            }
        }
        let secs = start.elapsed().as_secs_f64();
        let d = ks_statistic(draws, cdf);
        let p = ks_p_value(d, DRAWS);
        pass &= p >= 0.01 && secs < 10.0;
        parts.push(format!("{name}: D={d:.5} p={p:.3} {secs:.1}s"));
    }
    outcome(pass, parts.join("; "))
}

fn tuning_recursion() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for (burnin, cutoff) in [(1000u64, 100u64), (200, 20), (5000, 500), (50, 1)] {
        let cfg = SliceConfig {
            tune_cutoff: cutoff,
            ..SliceConfig::with_burnin(burnin)
        };
        for delta in [1e-3, 0.37, 1.0, 2.5, 1e3] {
            let mut var = SliceVar::new(1.0);
            for m in 1..=burnin {
                tune_update(&mut var, m, delta, &cfg);
                if m <= cutoff {
                    pass &= var.w == 1.0;
                }
            }
            let err = (var.w - delta).abs() / delta.max(1.0);
            worst = worst.max(err);
            let frozen = var;
            let mut rng = substream(7, 0, burnin + 1, Site::Nu.id());
            slice_step(|x| -0.5 * x * x, 0.0, &mut var, &cfg, burnin + 1, &mut rng)
                .expect("slice step");
            pass &= var == frozen;
        }
    }
    pass &= worst <= 1e-12;
    outcome(
        pass,
        format!("max |w - delta| / max(1, delta) = {worst:.2e}"),
    )
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        c += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + c
}

fn streaming_moments() -> Outcome {
    const LEN: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut stream =
        |d: &dyn Fn(&mut ChaCha8Rng) -> f64| (0..LEN).map(|_| d(&mut rng)).collect::<Vec<f64>>();
    let plain: Vec<(&str, Vec<f64>)> = vec![
        ("U(0,1)", stream(&|r| r.random::<f64>())),
        ("N(0,1)", stream(&|r| r.sample(StandardNormal))),
        (
            "N(100,1)",
            stream(&|r| NormalDist::new(100.0, 1.0).unwrap().sample(r)),
        ),
        ("Exp(1)", stream(&|r| Exp::new(1.0).unwrap().sample(r))),
        (
            "LogNormal(0,2)",
            stream(&|r| LogNormal::new(0.0, 2.0).unwrap().sample(r)),
        ),
    ];
    let offset: Vec<(&str, Vec<f64>)> = vec![
        ("1e9+U(0,1)", stream(&|r| 1e9 + r.random::<f64>())),
        (
            "1e9+N(0,1)",
            stream(&|r| 1e9 + r.sample::<f64, _>(StandardNormal)),
        ),
        (
            "-1e9+Exp(1)",
            stream(&|r| -1e9 + Exp::new(1.0).unwrap().sample(r)),
        ),
    ];
    let exact = |v: &[f64]| {
        let n = v.len() as f64;
        (
            compensated_sum(v.iter().copied()) / n,
            compensated_sum(v.iter().map(|x| x * x)) / n,
        )
    };
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let mut pass = true;
    let (mut worst_mean, mut worst_sq, mut worst_abs) = (0.0f64, 0.0f64, 0.0f64);
    for (_, v) in &plain {
        let acc = MomentAccumulator::from_values(v);
        let (m, s) = exact(v);
        worst_mean = worst_mean.max(rel(acc.mean, m));
        worst_sq = worst_sq.max(rel(acc.meansq, s));
    }
    pass &= worst_mean <= 1e-12 && worst_sq <= 1e-12;
    for (_, v) in &offset {
        let acc = MomentAccumulator::from_values(v);
        let (m, s) = exact(v);
        worst_abs = worst_abs.max((acc.mean - m).abs());
        worst_sq = worst_sq.max(rel(acc.meansq, s));
    }
    pass &= worst_abs <= 1e-6 && worst_sq <= 1e-12;
    outcome(
        pass,
        format!(
            "max rel err mean {worst_mean:.1e}, meansq {worst_sq:.1e}; offset streams max abs err mean {worst_abs:.1e}"
        ),
    )
}

fn rhat_hand_case() -> Outcome {
    let acc = MomentAccumulator::from_values;
    let r = gelman_rhat(&[acc(&[0.0, 2.0]), acc(&[1.0, 3.0])]).unwrap();
    let mut pass = (r - 0.75f64.sqrt()).abs() <= 1e-12;
    let mut worst: f64 = 0.0;
    for m in [2usize, 3, 10, 1000] {
        let v: Vec<f64> = (0..m)
            .map(|i| (i as f64 * 0.91).cos() + 0.1 * i as f64)
            .collect();
        let r = gelman_rhat(&[acc(&v), acc(&v), acc(&v)]).unwrap();
        worst = worst.max((r - (1.0 - 1.0 / m as f64).sqrt()).abs());
    }
    pass &= worst <= 1e-14;
    outcome(
        pass,
        format!("hand case {r:.12}; identical chains max err {worst:.1e}"),
    )
}

fn spec_for(design: Array2<f64>, offsets: Array1<f64>) -> ModelSpec {
    let l = design.ncols();
    ModelSpec::new(design, offsets, PriorConfig::diffuse(l)).unwrap()
}

fn pooled_series(outputs: &[ChainOutput], column: &str) -> Vec<Vec<f64>> {
    outputs
        .iter()
        .map(|o| o.samples.column(column).unwrap())
        .collect()
}

/// Posterior mean and its Monte Carlo standard error from full per-chain series.
fn mean_and_mcse(series: &[Vec<f64>]) -> (f64, f64) {
    let all: Vec<f64> = series.iter().flatten().copied().collect();
    let acc = MomentAccumulator::from_values(&all);
    let ess = effective_sample_size(series).unwrap();
    (acc.mean, (acc.variance().max(0.0) / ess).sqrt())
}

fn conjugate_cross_check() -> Outcome {
    let start = Instant::now();
    let design = array![[1.0, 1.0], [1.0, 1.0], [1.0, -1.0], [1.0, -1.0]];
    let (data, _) = generate(&SimSpec {
        genes: 200,
        design: design.clone(),
        offsets: None,
        truth: Hyperparameters {
            nu: 3.0,
            tau: 0.5,
            theta: vec![3.0, 0.0],
            sigma: vec![1.0, 0.5],
        },
        fixed_gamma: None,
        seed: 55,
    })
    .unwrap();
    let spec = spec_for(design, Array1::zeros(4));
    let base = RunConfig {
        save_genes: 20,
        workers: 1,
        ..RunConfig::quick(4, 2000, 10_000, 1, 8)
    };
    let slice = run_chains(&data, &spec, &base, &[]).unwrap();
    let direct = run_chains(
        &data,
        &spec,
        &RunConfig {
            sampler_mode: SamplerMode::ConjugateDirect,
            ..base.clone()
        },
        &[],
    )
    .unwrap();
    let mut columns = vec!["tau".to_string()];
    columns.extend(
        slice[0]
            .saved_genes
            .iter()
            .map(|g| format!("gamma[{}]", g + 1)),
    );
    let mut worst: f64 = 0.0;
    let mut tau_line = String::new();
    for c in &columns {
        let (m1, s1) = mean_and_mcse(&pooled_series(&slice, c));
        let (m2, s2) = mean_and_mcse(&pooled_series(&direct, c));
        let z = (m1 - m2).abs() / (s1 * s1 + s2 * s2).sqrt();
        worst = worst.max(z);
        if c == "tau" {
            tau_line = format!("tau {m1:.4} vs {m2:.4} (z={z:.2})");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 3.0 && secs < 300.0,
        format!(
            "{tau_line}; max |z| over tau and {} gammas = {worst:.2}",
            columns.len() - 1
        ),
    )
}

fn recovery_design() -> Array2<f64> {
    array![
        [1.0, 1.0, 1.0],
        [1.0, 1.0, 1.0],
        [1.0, 1.0, -1.0],
        [1.0, 1.0, -1.0],
        [1.0, -1.0, 1.0],
        [1.0, -1.0, 1.0],
        [1.0, -1.0, -1.0],
        [1.0, -1.0, -1.0]
    ]
}

fn posterior_recovery() -> Outcome {
    const REPLICATES: u64 = 10;
    let start = Instant::now();
    let truth = Hyperparameters {
        nu: 3.0,
        tau: 0.5,
        theta: vec![2.0, 0.0, 0.0],
        sigma: vec![1.0, 0.5, 0.5],
    };
    let true_values: Vec<f64> = [truth.nu, truth.tau]
        .into_iter()
        .chain(truth.theta.iter().copied())
        .chain(truth.sigma.iter().copied())
        .collect();
    let design = recovery_design();
    let mut covered = vec![0u32; true_values.len()];
    let mut names = Vec::new();
    let mut worst_rhat: f64 = 0.0;
    for rep in 0..REPLICATES {
        let (data, _) = generate(&SimSpec {
            genes: 500,
            design: design.clone(),
            offsets: None,
            truth: truth.clone(),
            fixed_gamma: None,
            seed: 1000 + rep,
        })
        .unwrap();
        let spec = spec_for(design.clone(), Array1::zeros(8));
        let cfg = RunConfig {
            workers: 1,
            ..RunConfig::quick(4, 2000, 4000, 20, 77 + rep)
        };
        let outputs = run_chains(&data, &spec, &cfg, &[]).unwrap();
        let hyper: Vec<_> = outputs.iter().map(|o| o.accumulators.hyper()).collect();
        names = hyper[0].iter().map(|(n, _)| n.clone()).collect();
        for (k, truth) in true_values.iter().enumerate() {
            let chains: Vec<MomentAccumulator> = hyper.iter().map(|h| h[k].1).collect();
            worst_rhat = worst_rhat.max(gelman_rhat(&chains).unwrap_or(f64::INFINITY));
            let pooled = MomentAccumulator::pooled(&chains);
            let (lo, hi) = credible_interval(pooled.mean, pooled.meansq, 0.05).unwrap();
            if lo <= *truth && *truth <= hi {
                covered[k] += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let min_cover = *covered.iter().min().unwrap();
    let summary: Vec<String> = names
        .iter()
        .zip(&covered)
        .map(|(n, c)| format!("{n} {c}/{REPLICATES}"))
        .collect();
    outcome(
        worst_rhat < RHAT_THRESHOLD && min_cover as f64 >= 0.8 * REPLICATES as f64 && secs < 1800.0,
        format!(
            "coverage: {}; max hyper R-hat {worst_rhat:.4}",
            summary.join(", ")
        ),
    )
}

fn heterosis_data(genes: usize, seed: u64) -> CountMatrix {
    generate(&SimSpec {
        genes,
        design: heterosis_design(),
        offsets: None,
        truth: Hyperparameters {
            nu: 3.0,
            tau: 0.1,
            theta: vec![4.0, 0.05, -0.05, 0.02, 0.0],
            sigma: vec![1.5, 0.3, 0.3, 0.2, 0.1],
        },
        fixed_gamma: None,
        seed,
    })
    .unwrap()
    .0
}

fn heterosis_contrasts(data: &CountMatrix) -> Vec<ContrastSpec> {
    let dims = ParamDims {
        genes: data.n_genes(),
        samples: data.n_samples(),
        coefs: 5,
    };
    Heterosis::ALL
        .iter()
        .map(|h| h.contrast(&dims).unwrap())
        .collect()
}

fn determinism() -> Outcome {
    let data = heterosis_data(1000, 31);
    let spec = spec_for(heterosis_design(), estimate_offsets(&data).unwrap());
    let contrasts = heterosis_contrasts(&data);
    let run = |workers: usize| {
        let cfg = RunConfig {
            workers,
            ..RunConfig::quick(2, 100, 100, 10, 99)
        };
        let mut outputs = run_chains(&data, &spec, &cfg, &contrasts).unwrap();
        let dir = tempfile::TempDir::new().unwrap();
        write_results(
            dir.path(),
            &RunRecord {
                data: &data,
                spec: &spec,
                config: &cfg,
                contrasts: &contrasts,
                outputs: &outputs,
                wall_seconds: 0.0,
            },
        )
        .unwrap();
        let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
        let files: Vec<Vec<u8>> = [
            "gene_estimates.csv",
            "hyper_estimates.csv",
            "diagnostics.csv",
            "samples/chain_1.csv",
            "samples/chain_2.csv",
        ]
        .iter()
        .map(|p| read(p))
        .collect();
        for o in &mut outputs {
            o.timings = Default::default();
        }
        (outputs, files)
    };
    let (one, one_files) = run(1);
    let mut pass = true;
    let mut parts = Vec::new();
    for w in [2, 8] {
        let (other, files) = run(w);
        let same = other == one && files == one_files;
        pass &= same;
        parts.push(format!(
            "workers {w}: {}",
            if same { "identical" } else { "DIFFERENT" }
        ));
    }
    outcome(
        pass,
        format!("G=1000 N=16 vs workers 1: {}", parts.join(", ")),
    )
}

fn scaling_shape() -> Outcome {
    let base = heterosis_data(2000, 41);
    let design16 = heterosis_design();
    let design32 = concatenate![Axis(0), design16, design16];
    let mut times = std::collections::BTreeMap::new();
    for n in [16usize, 32] {
        for g in [1024usize, 2048, 4096] {
            let data = resample(&base, g, n, 5).unwrap();
            let design = if n == 16 {
                design16.clone()
            } else {
                design32.clone()
            };
            let spec = spec_for(design, estimate_offsets(&data).unwrap());
            let cfg = RunConfig {
                workers: 1,
                ..RunConfig::quick(4, 500, 500, 20, 3)
            };
            let start = Instant::now();
            run_chains(&data, &spec, &cfg, &[]).unwrap();
            times.insert((g, n), start.elapsed().as_secs_f64());
        }
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [16, 32] {
        for (a, b) in [(1024, 2048), (2048, 4096)] {
            let r = times[&(b, n)] / times[&(a, n)];
            pass &= (1.5..=2.5).contains(&r);
            parts.push(format!("G {a}->{b} @N={n}: {r:.2}"));
        }
    }
    for g in [1024, 2048, 4096] {
        let r = times[&(g, 32)] / times[&(g, 16)];
        pass &= (1.3..=2.5).contains(&r);
        parts.push(format!("N 16->32 @G={g}: {r:.2}"));
    }
    let raw: Vec<String> = times
        .iter()
        .map(|((g, n), t)| format!("{g}x{n}={t:.1}s"))
        .collect();
    outcome(
        pass,
        format!("{}; times {}", parts.join(", "), raw.join(" ")),
    )
}

fn contrast_consistency() -> Outcome {
    let data = heterosis_data(40, 61);
    let spec = spec_for(heterosis_design(), estimate_offsets(&data).unwrap());
    let contrasts = heterosis_contrasts(&data);
    let cfg = RunConfig {
        workers: 1,
        save_genes: 10,
        ..RunConfig::quick(2, 1000, 20_000, 20, 12)
    };
    let outputs = run_chains(&data, &spec, &cfg, &contrasts).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut pass = true;
    for o in &outputs {
        let rows = o.samples.len() as f64;
        for &g in &o.saved_genes {
            let beta: Vec<Vec<f64>> = (1..=5)
                .map(|l| o.samples.column(&format!("beta[{},{l}]", g + 1)).unwrap())
                .collect();
            for (spec, acc) in contrasts.iter().zip(&o.contrasts) {
                let holds = (0..o.samples.len())
                    .filter(|&r| {
                        spec.terms().iter().all(|t| {
                            let v: f64 = t
                                .coefs
                                .iter()
                                .map(|(p, w)| {
                                    let l = match p {
                                        plgibbs::stats::ParamRef::Beta(_, l) => *l,
                                        other => panic!("unexpected {other}"),
                                    };
                                    w * beta[l][r]
                                })
                                .sum();
                            v > t.threshold
                        })
                    })
                    .count();
                let p_thin = holds as f64 / rows;
                let p = acc.prob[g];
                let tol = 3.0 * (p * (1.0 - p) / rows).sqrt();
                let diff = (p - p_thin).abs();
                pass &= diff <= tol;
                if tol > 0.0 {
                    worst = worst.max(diff / tol);
                }
                checked += 1;
            }
        }
    }
    outcome(
        pass,
        format!(
            "{checked} gene x contrast x chain comparisons; max |diff| / tolerance = {worst:.3}"
        ),
    )
}

fn ess_oracle() -> Outcome {
    let ar1 = |phi: f64, n: usize, rng: &mut ChaCha8Rng| {
        let mut x: f64 = rng.sample::<f64, _>(StandardNormal) / (1.0 - phi * phi).sqrt();
        (0..n)
            .map(|_| {
                x = phi * x + rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect::<Vec<f64>>()
    };
    let (chains, n) = (4, 5000);
    let nominal = (chains * n) as f64;
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let iid: Vec<Vec<f64>> = (0..chains).map(|_| ar1(0.0, n, &mut rng)).collect();
        let ess = effective_sample_size(&iid).unwrap();
        let e1 = (ess - nominal).abs() / nominal;
        let ar: Vec<Vec<f64>> = (0..chains).map(|_| ar1(0.9, n, &mut rng)).collect();
        let expect = nominal * 0.1 / 1.9;
        let ess_ar = effective_sample_size(&ar).unwrap();
        let e2 = (ess_ar - expect).abs() / expect;
        pass &= e1 < 0.15 && e2 < 0.30;
        parts.push(format!(
            "iid {ess:.0}/{nominal:.0}, AR(0.9) {ess_ar:.0}/{expect:.0}"
        ));
    }
    outcome(pass, parts.join("; "))
}
