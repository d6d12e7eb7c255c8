//! One-pass accumulators for posterior means, mean squares and contrast probabilities.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ChainState;

/// Running mean and mean of squares, both by the recursion `x_m = x_{m-1} + (v - x_{m-1}) / m`.
///
/// Each running value carries the rounding error of its last addition, so long streams
/// with a large common offset do not drift.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentAccumulator {
    pub count: u64,
    pub mean: f64,
    pub meansq: f64,
    #[serde(default, skip_serializing)]
    mean_carry: f64,
    #[serde(default, skip_serializing)]
    meansq_carry: f64,
}

/// Adds `inc` to `(hi, carry)`, keeping the rounding error in `carry`.
#[inline]
fn carried_add(hi: &mut f64, carry: &mut f64, inc: f64) {
    let t = *carry + inc;
    let s = *hi + t;
    let bp = s - *hi;
    *carry = (*hi - (s - bp)) + (t - bp);
    *hi = s;
}

impl MomentAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn update(&mut self, value: f64) {
        self.count += 1;
        let m = self.count as f64;
        let d = (value - self.mean - self.mean_carry) / m;
        carried_add(&mut self.mean, &mut self.mean_carry, d);
        let d = (value * value - self.meansq - self.meansq_carry) / m;
        carried_add(&mut self.meansq, &mut self.meansq_carry, d);
    }

    /// `meansq - mean²`, the plug-in posterior variance.
    pub fn variance(&self) -> f64 {
        self.meansq - self.mean * self.mean
    }

    /// Merges accumulators of separate streams, weighting each by its count.
    pub fn pooled(parts: &[MomentAccumulator]) -> Self {
        let count: u64 = parts.iter().map(|p| p.count).sum();
        if count == 0 {
            return Self::new();
        }
        let n = count as f64;
        let weight = |p: &MomentAccumulator| p.count as f64 / n;
        Self {
            count,
            mean: parts.iter().map(|p| weight(p) * p.mean).sum(),
            meansq: parts.iter().map(|p| weight(p) * p.meansq).sum(),
            ..Self::default()
        }
    }

    /// Accumulator over a whole slice.
    pub fn from_values(values: &[f64]) -> Self {
        let mut acc = Self::new();
        for &v in values {
            acc.update(v);
        }
        acc
    }
}

/// `moment_update(acc, value)` in functional form.
pub fn moment_update(mut acc: MomentAccumulator, value: f64) -> MomentAccumulator {
    acc.update(value);
    acc
}

/// Sizes a contrast is validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamDims {
    pub genes: usize,
    pub samples: usize,
    pub coefs: usize,
}

/// Which gene a gene-level parameter reference points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneIndex {
    /// Every gene in turn (per-gene contrasts).
    Each,
    /// A fixed gene, 0-based.
    At(usize),
}

/// A scalar model parameter, written `nu`, `tau`, `theta[l]`, `sigma[l]`, `gamma[g]`,
/// `beta[g,l]` or `eps[g,n]` with 1-based indices. Leaving the gene index empty
/// (`gamma[]`, `beta[,2]`, `eps[,1]`) refers to the current gene of a per-gene contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRef {
    Nu,
    Tau,
    Theta(usize),
    Sigma(usize),
    Gamma(GeneIndex),
    Beta(GeneIndex, usize),
    Eps(GeneIndex, usize),
}

impl ParamRef {
    pub fn is_per_gene(&self) -> bool {
        matches!(
            self,
            ParamRef::Gamma(GeneIndex::Each)
                | ParamRef::Beta(GeneIndex::Each, _)
                | ParamRef::Eps(GeneIndex::Each, _)
        )
    }

    fn check(&self, dims: &ParamDims) -> std::result::Result<(), String> {
        let gene_ok = |g: &GeneIndex| match g {
            GeneIndex::Each => true,
            GeneIndex::At(i) => *i < dims.genes,
        };
        let ok = match self {
            ParamRef::Nu | ParamRef::Tau => true,
            ParamRef::Theta(l) | ParamRef::Sigma(l) => *l < dims.coefs,
            ParamRef::Gamma(g) => gene_ok(g),
            ParamRef::Beta(g, l) => gene_ok(g) && *l < dims.coefs,
            ParamRef::Eps(g, n) => gene_ok(g) && *n < dims.samples,
        };
        if ok {
            Ok(())
        } else {
            Err(format!(
                "`{self}` is out of range for {} genes, {} samples, {} coefficients",
                dims.genes, dims.samples, dims.coefs
            ))
        }
    }

    /// Value in `state`; `gene` resolves [`GeneIndex::Each`].
    #[inline]
    pub fn value(&self, state: &ChainState, gene: usize) -> f64 {
        let g = |idx: &GeneIndex| match idx {
            GeneIndex::Each => gene,
            GeneIndex::At(i) => *i,
        };
        match self {
            ParamRef::Nu => state.nu,
            ParamRef::Tau => state.tau,
            ParamRef::Theta(l) => state.theta[*l],
            ParamRef::Sigma(l) => state.sigma[*l],
            ParamRef::Gamma(i) => state.gamma[g(i)],
            ParamRef::Beta(i, l) => state.beta[[g(i), *l]],
            ParamRef::Eps(i, n) => state.eps[[g(i), *n]],
        }
    }
}

impl fmt::Display for ParamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let gi = |g: &GeneIndex| match g {
            GeneIndex::Each => String::new(),
            GeneIndex::At(i) => (i + 1).to_string(),
        };
        match self {
            ParamRef::Nu => write!(f, "nu"),
            ParamRef::Tau => write!(f, "tau"),
            ParamRef::Theta(l) => write!(f, "theta[{}]", l + 1),
            ParamRef::Sigma(l) => write!(f, "sigma[{}]", l + 1),
            ParamRef::Gamma(g) => write!(f, "gamma[{}]", gi(g)),
            ParamRef::Beta(g, l) => write!(f, "beta[{},{}]", gi(g), l + 1),
            ParamRef::Eps(g, n) => write!(f, "eps[{},{}]", gi(g), n + 1),
        }
    }
}

impl FromStr for ParamRef {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || format!("cannot parse parameter name `{s}`");
        let (name, inside) = match s.find('[') {
            None => (s, None),
            Some(open) => {
                let inner = s[open + 1..].strip_suffix(']').ok_or_else(bad)?;
                (&s[..open], Some(inner))
            }
        };
        let index = |t: &str| -> std::result::Result<usize, String> {
            let v: usize = t.trim().parse().map_err(|_| bad())?;
            v.checked_sub(1)
                .ok_or_else(|| format!("indices are 1-based in `{s}`"))
        };
        let gene = |t: &str| -> std::result::Result<GeneIndex, String> {
            if t.trim().is_empty() {
                Ok(GeneIndex::Each)
            } else {
                index(t).map(GeneIndex::At)
            }
        };
        let parts: Vec<&str> = inside.map(|i| i.split(',').collect()).unwrap_or_default();
        match (name, parts.as_slice()) {
            ("nu", []) => Ok(ParamRef::Nu),
            ("tau", []) => Ok(ParamRef::Tau),
            ("theta", [l]) => Ok(ParamRef::Theta(index(l)?)),
            ("sigma", [l]) => Ok(ParamRef::Sigma(index(l)?)),
            ("gamma", [g]) => Ok(ParamRef::Gamma(gene(g)?)),
            ("beta", [g, l]) => Ok(ParamRef::Beta(gene(g)?, index(l)?)),
            ("eps", [g, n]) => Ok(ParamRef::Eps(gene(g)?, index(n)?)),
            _ => Err(bad()),
        }
    }
}

/// One conjunct `Σ coef·param > threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastTerm {
    pub coefs: Vec<(ParamRef, f64)>,
    pub threshold: f64,
}

impl ContrastTerm {
    #[inline]
    fn holds(&self, state: &ChainState, gene: usize) -> bool {
        let lin: f64 = self
            .coefs
            .iter()
            .map(|(p, c)| c * p.value(state, gene))
            .sum();
        lin > self.threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastScope {
    Global,
    PerGene,
}

/// Conjunction of strict linear inequalities whose posterior probability is tracked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastSpec {
    id: String,
    terms: Vec<ContrastTerm>,
    scope: ContrastScope,
}

impl ContrastSpec {
    /// Validates every parameter reference against `dims`. The scope is per-gene
    /// when any reference leaves its gene index open.
    pub fn new(id: impl Into<String>, terms: Vec<ContrastTerm>, dims: &ParamDims) -> Result<Self> {
        let id = id.into();
        let err = |reason: String| Error::Contrast {
            id: id.clone(),
            reason,
        };
        if terms.is_empty() {
            return Err(err("needs at least one term".into()));
        }
        for (k, t) in terms.iter().enumerate() {
            if t.coefs.is_empty() {
                return Err(err(format!("term {} has no coefficients", k + 1)));
            }
            if !t.threshold.is_finite() || t.coefs.iter().any(|(_, c)| !c.is_finite()) {
                return Err(err(format!(
                    "term {} has a non-finite coefficient or threshold",
                    k + 1
                )));
            }
            for (p, _) in &t.coefs {
                p.check(dims).map_err(err)?;
            }
        }
        let per_gene = terms
            .iter()
            .flat_map(|t| &t.coefs)
            .any(|(p, _)| p.is_per_gene());
        let scope = if per_gene {
            ContrastScope::PerGene
        } else {
            ContrastScope::Global
        };
        Ok(Self { id, terms, scope })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn terms(&self) -> &[ContrastTerm] {
        &self.terms
    }

    pub fn scope(&self) -> ContrastScope {
        self.scope
    }

    /// Conjunction indicator at `state` for `gene` (ignored for global scope).
    pub fn holds(&self, state: &ChainState, gene: usize) -> bool {
        self.terms.iter().all(|t| t.holds(state, gene))
    }
}

/// Running mean of a contrast indicator; one entry per gene for per-gene contrasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastAccumulator {
    pub count: u64,
    pub prob: Array1<f64>,
}

impl ContrastAccumulator {
    pub fn new(spec: &ContrastSpec, genes: usize) -> Self {
        let len = match spec.scope() {
            ContrastScope::Global => 1,
            ContrastScope::PerGene => genes,
        };
        Self {
            count: 0,
            prob: Array1::zeros(len),
        }
    }

    pub fn update(&mut self, spec: &ContrastSpec, state: &ChainState) {
        self.count += 1;
        let m = self.count as f64;
        let step = |g: usize, p: &mut f64| {
            let ind = if spec.holds(state, g) { 1.0 } else { 0.0 };
            *p += (ind - *p) / m;
        };
        match spec.scope() {
            ContrastScope::Global => step(0, &mut self.prob[0]),
            ContrastScope::PerGene => {
                let slice = self.prob.as_slice_mut().expect("contiguous");
                slice
                    .par_iter_mut()
                    .enumerate()
                    .with_min_len(256)
                    .for_each(|(g, p)| step(g, p));
            }
        }
    }
}

/// `contrast_update(acc, spec, state)` in functional form.
pub fn contrast_update(
    mut acc: ContrastAccumulator,
    spec: &ContrastSpec,
    state: &ChainState,
) -> ContrastAccumulator {
    acc.update(spec, state);
    acc
}

/// P(A or B) = P(A) + P(B) − P(A and B), clamped to [0, 1].
pub fn disjunction_combine(p1: f64, p2: f64, p12: f64) -> f64 {
    (p1 + p2 - p12).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn dims() -> ParamDims {
        ParamDims {
            genes: 3,
            samples: 2,
            coefs: 4,
        }
    }

    fn state_with_beta(beta: Array2<f64>) -> ChainState {
        let g = beta.nrows();
        let l = beta.ncols();
        ChainState {
            eps: Array2::zeros((g, 2)),
            gamma: Array1::ones(g),
            beta,
            theta: Array1::zeros(l),
            sigma: Array1::ones(l),
            nu: 2.0,
            tau: 1.0,
        }
    }

    /// Neumaier-compensated sum.
    fn compensated_sum(values: &[f64]) -> f64 {
        let mut sum = 0.0;
        let mut c = 0.0;
        for &v in values {
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

    #[test]
    fn constant_stream() {
        let acc = MomentAccumulator::from_values(&[2.5, 2.5, 2.5]);
        assert_eq!((acc.count, acc.mean, acc.meansq), (3, 2.5, 6.25));
    }

    #[test]
    fn small_stream_matches_two_pass() {
        let acc = MomentAccumulator::from_values(&[1.0, 2.0, 3.0]);
        assert!((acc.mean - 2.0).abs() < 1e-15);
        assert!((acc.meansq - 14.0 / 3.0).abs() < 1e-15);
        assert_eq!(moment_update(acc, 4.0).count, 4);
    }

    #[test]
    fn offset_stream_is_stable() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..1_000_000).map(|_| 1e9 + rng.random::<f64>()).collect();
        let acc = MomentAccumulator::from_values(&values);
        let exact = compensated_sum(&values) / values.len() as f64;
        assert!((acc.mean - exact).abs() < 1e-6, "{} vs {exact}", acc.mean);
    }

    #[test]
    fn parse_and_display_round_trip() {
        for s in [
            "nu",
            "tau",
            "theta[2]",
            "sigma[1]",
            "gamma[]",
            "gamma[7]",
            "beta[,2]",
            "beta[3,4]",
            "eps[,1]",
            "eps[2,2]",
        ] {
            let p: ParamRef = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert_eq!(
            "beta[,2]".parse::<ParamRef>().unwrap(),
            ParamRef::Beta(GeneIndex::Each, 1)
        );
        assert!("beta[0,1]".parse::<ParamRef>().is_err());
        assert!("alpha".parse::<ParamRef>().is_err());
        assert!("theta[1".parse::<ParamRef>().is_err());
        assert!("beta[1]".parse::<ParamRef>().is_err());
    }

    #[test]
    fn unknown_or_out_of_range_rejected_at_construction() {
        let term = |p: &str| ContrastTerm {
            coefs: vec![(p.parse().unwrap(), 1.0)],
            threshold: 0.0,
        };
        assert!(ContrastSpec::new("x", vec![term("beta[,5]")], &dims()).is_err());
        assert!(ContrastSpec::new("x", vec![term("gamma[4]")], &dims()).is_err());
        assert!(ContrastSpec::new("x", vec![term("eps[,3]")], &dims()).is_err());
        assert!(ContrastSpec::new("x", vec![], &dims()).is_err());
        let empty = ContrastTerm {
            coefs: vec![],
            threshold: 0.0,
        };
        assert!(ContrastSpec::new("x", vec![empty], &dims()).is_err());
        let ok = ContrastSpec::new("x", vec![term("beta[,4]")], &dims()).unwrap();
        assert_eq!(ok.scope(), ContrastScope::PerGene);
        let ok = ContrastSpec::new("x", vec![term("theta[4]")], &dims()).unwrap();
        assert_eq!(ok.scope(), ContrastScope::Global);
    }

    #[test]
    fn zero_coefficient_terms() {
        let spec = |b: f64| {
            ContrastSpec::new(
                "z",
                vec![ContrastTerm {
                    coefs: vec![
                        (ParamRef::Beta(GeneIndex::Each, 0), 0.0),
                        (ParamRef::Nu, 0.0),
                    ],
                    threshold: b,
                }],
                &dims(),
            )
            .unwrap()
        };
        let state = state_with_beta(array![
            [1.0, 2.0, 3.0, 4.0],
            [-1.0, 0.0, 0.0, 0.0],
            [5.0, 5.0, 5.0, 5.0]
        ]);
        let (always, never) = (spec(-1.0), spec(1.0));
        let mut a = ContrastAccumulator::new(&always, 3);
        let mut b = ContrastAccumulator::new(&never, 3);
        for _ in 0..4 {
            a.update(&always, &state);
            b.update(&never, &state);
        }
        assert!(a.prob.iter().all(|&p| p == 1.0));
        assert!(b.prob.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn heterosis_over_hand_enumerated_sequence() {
        let dims = ParamDims {
            genes: 1,
            samples: 2,
            coefs: 5,
        };
        let spec = ContrastSpec::new(
            "high_parent",
            vec![
                ContrastTerm {
                    coefs: vec![
                        ("beta[,2]".parse().unwrap(), 2.0),
                        ("beta[,4]".parse().unwrap(), 1.0),
                    ],
                    threshold: 0.0,
                },
                ContrastTerm {
                    coefs: vec![
                        ("beta[,3]".parse().unwrap(), 2.0),
                        ("beta[,4]".parse().unwrap(), 1.0),
                    ],
                    threshold: 0.0,
                },
            ],
            &dims,
        )
        .unwrap();
        // (β2, β3, β4) per iteration; both conjuncts hold at iterations 1, 3 and 5.
        let seq = [
            (0.5, 0.5, 0.1),
            (0.5, -0.5, 0.1),
            (0.1, 0.2, -0.1),
            (-0.2, 0.3, 0.0),
            (1.0, 1.0, 1.0),
        ];
        let mut acc = ContrastAccumulator::new(&spec, 1);
        for (b2, b3, b4) in seq {
            let s = state_with_beta(array![[0.0, b2, b3, b4, 0.0]]);
            acc = contrast_update(acc, &spec, &s);
        }
        assert_eq!(acc.count, 5);
        assert!((acc.prob[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn ties_count_as_failure() {
        let spec = ContrastSpec::new(
            "tie",
            vec![ContrastTerm {
                coefs: vec![(ParamRef::Tau, 1.0)],
                threshold: 1.0,
            }],
            &dims(),
        )
        .unwrap();
        let s = state_with_beta(Array2::zeros((3, 4)));
        assert!(!spec.holds(&s, 0));
    }

    #[test]
    fn disjunction_examples() {
        assert!((disjunction_combine(0.3, 0.4, 0.1) - 0.6).abs() < 1e-15);
        assert_eq!(disjunction_combine(0.25, 0.25, 0.25), 0.25);
        assert_eq!(disjunction_combine(1.0, 0.0, 0.0), 1.0);
        assert_eq!(disjunction_combine(0.9, 0.9, 0.7), 1.0);
    }

    proptest! {
        #[test]
        fn mean_matches_exact_mean(values in proptest::collection::vec(-1e3f64..1e3, 1..10_000)) {
            let acc = MomentAccumulator::from_values(&values);
            let n = values.len() as f64;
            let exact = compensated_sum(&values) / n;
            let scale = values.iter().map(|v| v.abs()).sum::<f64>() / n;
            prop_assert!((acc.mean - exact).abs() <= 1e-12 * scale.max(exact.abs()));
            let sq: Vec<f64> = values.iter().map(|v| v * v).collect();
            let exact_sq = compensated_sum(&sq) / n;
            prop_assert!((acc.meansq - exact_sq).abs() <= 1e-12 * exact_sq);
            prop_assert_eq!(acc.count, values.len() as u64);
            prop_assert!(acc.meansq >= acc.mean * acc.mean - 1e-12 * acc.meansq.max(1.0));
        }

        #[test]
        fn probabilities_stay_in_unit_interval(bits in proptest::collection::vec(any::<bool>(), 1..200)) {
            let spec = ContrastSpec::new(
                "p",
                vec![ContrastTerm { coefs: vec![(ParamRef::Tau, 1.0)], threshold: 1.0 }],
                &dims(),
            ).unwrap();
            let mut acc = ContrastAccumulator::new(&spec, 3);
            let mut s = state_with_beta(Array2::zeros((3, 4)));
            for &b in &bits {
                s.tau = if b { 2.0 } else { 0.5 };
                acc.update(&spec, &s);
                prop_assert!((0.0..=1.0).contains(&acc.prob[0]));
            }
            let expect = bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64;
            prop_assert!((acc.prob[0] - expect).abs() < 1e-12);
        }
    }
}
