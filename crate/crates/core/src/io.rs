//! File formats: count and design tables, the run manifest, and result files.
//!
//! Output layout of a fit:
//!
//! ```text
//! <output>/gene_estimates.csv   per gene: mean, sd and 95% interval of γ and each β, contrast probabilities
//! <output>/hyper_estimates.csv  the same for ν, τ, θ and σ
//! <output>/diagnostics.csv      R̂, flag and ESS per monitored parameter
//! <output>/contrasts.csv        global contrasts (only when some are defined)
//! <output>/samples/chain_<c>.csv thinned draws of hyperparameters and retained genes
//! <output>/run_report.json      seed, configuration, step timings, clamp counts, versions
//! ```
//!
//! Reals are written with 17 significant digits so they read back bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::design::{named_design, Heterosis};
use crate::diagnostics::{credible_interval, effective_sample_size, gelman_rhat, RhatFlag};
use crate::engine::{ChainOutput, RunConfig, SampleTable, SamplerMode};
use crate::error::{Error, Result};
use crate::model::{estimate_offsets, CountMatrix, ModelSpec, PriorConfig};
use crate::simulate::{Hyperparameters, SimSpec};
use crate::slice::SliceConfig;
use crate::stats::{ContrastScope, ContrastSpec, ContrastTerm, MomentAccumulator, ParamDims};

/// Design used when the manifest names none: a single intercept column.
pub const INTERCEPT_DESIGN: &str = "intercept";
/// Level of the reported credible intervals.
pub const INTERVAL_ALPHA: f64 = 0.05;

/// Real number with 17 significant digits.
pub fn format_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

fn parse_err(
    path: &Path,
    row: usize,
    column: impl Into<String>,
    reason: impl Into<String>,
) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.into(),
        reason: reason.into(),
    }
}

/// Reads a table whose first column holds row labels and whose remaining cells are
/// parsed by `cell`. Rows are numbered as lines of the file (header is row 1).
fn read_labelled<T>(
    path: &Path,
    mut cell: impl FnMut(&str) -> std::result::Result<T, String>,
) -> Result<(Vec<String>, Vec<String>, Vec<Vec<T>>)> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    if header.len() < 2 {
        return Err(parse_err(
            path,
            1,
            "",
            "header needs an id column and at least one data column",
        ));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::csv(path, e))?;
        if record.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                "",
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let label = record[0].to_string();
        let values = record
            .iter()
            .skip(1)
            .zip(&columns)
            .map(|(v, col)| {
                cell(v).map_err(|r| parse_err(path, line, col.clone(), format!("`{label}`: {r}")))
            })
            .collect::<Result<Vec<T>>>()?;
        labels.push(label);
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 2, "", "no data rows"));
    }
    Ok((labels, columns, rows))
}

fn to_array2<T: Clone>(rows: Vec<Vec<T>>) -> Array2<T> {
    let (r, c) = (rows.len(), rows[0].len());
    Array2::from_shape_vec((r, c), rows.into_iter().flatten().collect()).expect("rectangular rows")
}

/// Loads a genes × samples count table: header of sample names, first column gene ids.
pub fn load_counts(path: &Path) -> Result<CountMatrix> {
    let (genes, samples, rows) = read_labelled(path, |v| {
        if v.starts_with('-') && v[1..].parse::<u64>().is_ok() {
            return Err(format!("negative count {v}"));
        }
        v.parse::<u64>()
            .map_err(|_| format!("not a nonnegative integer: `{v}`"))
    })?;
    let data = CountMatrix::new(genes, samples, to_array2(rows))?;
    let dups = data.duplicate_genes();
    if !dups.is_empty() {
        log::warn!(
            "{}: {} duplicated gene identifiers",
            path.display(),
            dups.len()
        );
    }
    Ok(data)
}

pub fn write_counts(path: &Path, data: &CountMatrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = |e| Error::csv(path, e);
    w.write_record(std::iter::once("gene").chain(data.samples().iter().map(String::as_str)))
        .map_err(io)?;
    for (gene, row) in data.genes().iter().zip(data.counts().rows()) {
        let mut rec = vec![gene.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_real(v: &str) -> std::result::Result<f64, String> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| format!("not a finite number: `{v}`"))
}

/// Loads a samples × coefficients model matrix; the first column holds sample ids.
pub fn load_design(path: &Path) -> Result<(Vec<String>, Vec<String>, Array2<f64>)> {
    let (samples, columns, rows) = read_labelled(path, parse_real)?;
    Ok((samples, columns, to_array2(rows)))
}

/// Loads per-sample log offsets: `sample,offset` rows.
pub fn load_offsets(path: &Path) -> Result<(Vec<String>, Array1<f64>)> {
    let (samples, columns, rows) = read_labelled(path, parse_real)?;
    if columns.len() != 1 {
        return Err(parse_err(
            path,
            1,
            "",
            format!("expected one offset column, found {}", columns.len()),
        ));
    }
    Ok((samples, rows.into_iter().map(|r| r[0]).collect()))
}

/// A prior hyperparameter given once for all coefficients or once per coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerCoef {
    All(f64),
    Each(Vec<f64>),
}

impl PerCoef {
    fn resolve(&self, name: &str, l: usize) -> Result<Vec<f64>> {
        match self {
            PerCoef::All(v) => Ok(vec![*v; l]),
            PerCoef::Each(v) if v.len() == l => Ok(v.clone()),
            PerCoef::Each(v) => Err(Error::Config(format!(
                "priors.{name} has {} entries but the model has {l} coefficients",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorsEntry {
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub c: PerCoef,
    pub s: PerCoef,
}

impl Default for PriorsEntry {
    fn default() -> Self {
        Self {
            a: PriorConfig::DEFAULT_A,
            b: PriorConfig::DEFAULT_B,
            d: PriorConfig::DEFAULT_D,
            c: PerCoef::All(PriorConfig::DEFAULT_C),
            s: PerCoef::All(PriorConfig::DEFAULT_S),
        }
    }
}

impl PriorsEntry {
    pub fn resolve(&self, l: usize) -> Result<PriorConfig> {
        let p = PriorConfig {
            a: self.a,
            b: self.b,
            d: self.d,
            c: self.c.resolve("c", l)?,
            s: self.s.resolve("s", l)?,
        };
        p.validate(l)?;
        Ok(p)
    }
}

/// A model matrix by template name, CSV path or inline rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DesignSource {
    Named(String),
    Inline(Vec<Vec<f64>>),
}

impl Default for DesignSource {
    fn default() -> Self {
        DesignSource::Named(INTERCEPT_DESIGN.into())
    }
}

impl DesignSource {
    /// Resolves to a matrix for `samples` samples; relative paths start at `base`.
    /// Returns the sample ids of a CSV design as well.
    pub fn resolve(
        &self,
        base: &Path,
        samples: usize,
    ) -> Result<(Array2<f64>, Option<Vec<String>>)> {
        let x = match self {
            DesignSource::Inline(rows) => {
                let l = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != l) {
                    return Err(Error::InvalidModel(
                        "inline design rows differ in length".into(),
                    ));
                }
                (to_array2(rows.clone()), None)
            }
            DesignSource::Named(name) if name == INTERCEPT_DESIGN => {
                (Array2::ones((samples, 1)), None)
            }
            DesignSource::Named(name) => match named_design(name) {
                Some(x) => (x, None),
                None => {
                    let path = base.join(name);
                    if !path.exists() {
                        return Err(Error::Config(format!(
                            "design `{name}` is neither a built-in template nor an existing file"
                        )));
                    }
                    let (ids, _, x) = load_design(&path)?;
                    (x, Some(ids))
                }
            },
        };
        if x.0.nrows() != samples {
            return Err(Error::InvalidModel(format!(
                "model matrix has {} rows but there are {samples} samples",
                x.0.nrows()
            )));
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetEntry {
    pub preset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermEntry {
    /// Linear combination: parameter name to coefficient, e.g. `{"beta[,2]": 2.0}`.
    pub coef: BTreeMap<String, f64>,
    /// The combination must exceed this value.
    #[serde(default)]
    pub gt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomEntry {
    pub id: String,
    /// All terms must hold at once.
    pub terms: Vec<TermEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ContrastEntry {
    Preset(PresetEntry),
    Custom(CustomEntry),
}

impl ContrastEntry {
    pub fn build(&self, dims: &ParamDims) -> Result<ContrastSpec> {
        match self {
            ContrastEntry::Preset(p) => Heterosis::from_preset(&p.preset)
                .ok_or_else(|| Error::Contrast {
                    id: p.preset.clone(),
                    reason: "unknown preset".into(),
                })?
                .contrast(dims),
            ContrastEntry::Custom(c) => {
                let terms = c
                    .terms
                    .iter()
                    .map(|t| {
                        let coefs = t
                            .coef
                            .iter()
                            .map(|(name, &w)| {
                                name.parse().map(|p| (p, w)).map_err(|reason: String| {
                                    Error::Contrast {
                                        id: c.id.clone(),
                                        reason,
                                    }
                                })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok(ContrastTerm {
                            coefs,
                            threshold: t.gt,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                ContrastSpec::new(c.id.clone(), terms, dims)
            }
        }
    }
}

/// Everything a fit is configured by. Every field has a default, so `{}` is a valid
/// manifest apart from the missing counts path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunManifest {
    pub counts: Option<PathBuf>,
    /// `"intercept"`, `"paschold"`, a CSV path or inline rows.
    pub design: DesignSource,
    /// Per-sample log offsets; estimated from the counts when absent.
    pub offsets: Option<PathBuf>,
    pub output: PathBuf,
    pub priors: PriorsEntry,
    pub chains: usize,
    pub iterations: u64,
    pub burnin: u64,
    /// Defaults to min(500, burnin / 10).
    pub tune_cutoff: Option<u64>,
    pub thin: u64,
    pub seed: u64,
    pub max_step_out: usize,
    pub initial_width: f64,
    pub max_shrink: usize,
    pub save_genes: usize,
    /// Defaults to the available parallelism.
    pub workers: Option<usize>,
    pub sampler_mode: SamplerMode,
    pub ridge_moves: bool,
    pub concurrent_chains: bool,
    pub contrasts: Vec<ContrastEntry>,
}

impl Default for RunManifest {
    fn default() -> Self {
        let d = RunConfig::default();
        Self {
            counts: None,
            design: DesignSource::default(),
            offsets: None,
            output: PathBuf::from("results"),
            priors: PriorsEntry::default(),
            chains: d.chains,
            iterations: d.iterations,
            burnin: d.burnin,
            tune_cutoff: None,
            thin: d.thin,
            seed: d.seed,
            max_step_out: d.max_step_out,
            initial_width: d.initial_width,
            max_shrink: d.max_shrink,
            save_genes: d.save_genes,
            workers: None,
            sampler_mode: d.sampler_mode,
            ridge_moves: d.ridge_moves,
            concurrent_chains: d.concurrent_chains,
            contrasts: Vec::new(),
        }
    }
}

impl RunManifest {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Validated sampler settings.
    pub fn run_config(&self) -> Result<RunConfig> {
        let cfg = RunConfig {
            chains: self.chains,
            iterations: self.iterations,
            burnin: self.burnin,
            thin: self.thin,
            seed: self.seed,
            tune_cutoff: self
                .tune_cutoff
                .unwrap_or_else(|| SliceConfig::default_tune_cutoff(self.burnin)),
            max_step_out: self.max_step_out,
            initial_width: self.initial_width,
            max_shrink: self.max_shrink,
            save_genes: self.save_genes,
            workers: self.workers.unwrap_or_else(|| RunConfig::default().workers),
            sampler_mode: self.sampler_mode,
            ridge_moves: self.ridge_moves,
            concurrent_chains: self.concurrent_chains,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolves relative paths against `base`.
    fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.counts.as_mut() {
            join(p);
        }
        if let Some(p) = self.offsets.as_mut() {
            join(p);
        }
        join(&mut self.output);
    }
}

/// A manifest with its data loaded and every setting resolved.
#[derive(Debug, Clone)]
pub struct FitInputs {
    pub manifest: RunManifest,
    pub data: CountMatrix,
    pub spec: ModelSpec,
    pub config: RunConfig,
    pub contrasts: Vec<ContrastSpec>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn require_file(what: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} file {} does not exist",
            path.display()
        )))
    }
}

/// Reads a manifest, loads the referenced files and builds the model.
pub fn load_manifest(path: &Path) -> Result<FitInputs> {
    let mut manifest = RunManifest::from_json(&read_text(path)?).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    manifest.rebase(&base);
    let config = manifest.run_config()?;
    let counts_path = manifest
        .counts
        .clone()
        .ok_or_else(|| Error::Config("manifest does not name a `counts` file".into()))?;
    require_file("counts", &counts_path)?;
    if let Some(p) = &manifest.offsets {
        require_file("offsets", p)?;
    }
    let data = load_counts(&counts_path)?;
    let (design, design_ids) = manifest.design.resolve(&base, data.n_samples())?;
    if let Some(ids) = design_ids {
        if ids != data.samples() {
            return Err(Error::InvalidModel(
                "sample ids of the model matrix do not match the count table columns".into(),
            ));
        }
    }
    let offsets = match &manifest.offsets {
        Some(p) => {
            let (ids, h) = load_offsets(p)?;
            if ids != data.samples() {
                return Err(Error::InvalidModel(
                    "sample ids of the offsets file do not match the count table columns".into(),
                ));
            }
            h
        }
        None => estimate_offsets(&data)?,
    };
    let priors = manifest.priors.resolve(design.ncols())?;
    let spec = ModelSpec::new(design, offsets, priors)?;
    let dims = ParamDims {
        genes: data.n_genes(),
        samples: data.n_samples(),
        coefs: spec.n_coefficients(),
    };
    let contrasts = manifest
        .contrasts
        .iter()
        .map(|c| c.build(&dims))
        .collect::<Result<Vec<_>>>()?;
    let mut ids: Vec<&str> = contrasts.iter().map(ContrastSpec::id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Contrast {
            id: w[0].into(),
            reason: "defined twice".into(),
        });
    }
    Ok(FitInputs {
        manifest,
        data,
        spec,
        config,
        contrasts,
    })
}

/// Simulation settings file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimManifest {
    pub genes: usize,
    /// Sample count for the intercept design; ignored otherwise.
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub design: DesignSource,
    #[serde(default)]
    pub offsets: Option<Vec<f64>>,
    pub nu: f64,
    pub tau: f64,
    pub theta: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Fixes every γ_g instead of drawing it.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

pub fn load_sim_manifest(path: &Path) -> Result<SimSpec> {
    let m: SimManifest = serde_json::from_str(&read_text(path)?).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let samples = match (&m.design, m.samples) {
        (DesignSource::Named(n), Some(s)) if n == INTERCEPT_DESIGN => s,
        (DesignSource::Named(n), None) if n == INTERCEPT_DESIGN => {
            return Err(Error::Config("the intercept design needs `samples`".into()))
        }
        (DesignSource::Inline(rows), _) => rows.len(),
        (DesignSource::Named(n), _) => match named_design(n) {
            Some(x) => x.nrows(),
            None => load_design(&base.join(n))?.2.nrows(),
        },
    };
    let (design, _) = m.design.resolve(base, samples)?;
    Ok(SimSpec {
        genes: m.genes,
        design,
        offsets: m.offsets.map(Array1::from),
        truth: Hyperparameters {
            nu: m.nu,
            tau: m.tau,
            theta: m.theta,
            sigma: m.sigma,
        },
        fixed_gamma: m.gamma,
        seed: m.seed,
    })
}

/// Creates the output directory and checks it can be written, before any sampling.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    let samples = dir.join("samples");
    fs::create_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
    let probe = dir.join(".write_check");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Pooled posterior summary of one scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Estimate {
    pub fn from_chains(chains: &[MomentAccumulator]) -> Self {
        let p = MomentAccumulator::pooled(chains);
        let (lower, upper) =
            credible_interval(p.mean, p.meansq, INTERVAL_ALPHA).unwrap_or((f64::NAN, f64::NAN));
        Self {
            mean: p.mean,
            sd: p.variance().max(0.0).sqrt(),
            lower,
            upper,
        }
    }

    fn cells(&self) -> [String; 4] {
        [self.mean, self.sd, self.lower, self.upper].map(format_real)
    }
}

/// Convergence summary of one monitored parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub parameter: String,
    pub rhat: Option<f64>,
    pub flag: RhatFlag,
    /// Only for parameters with saved samples.
    pub ess: Option<f64>,
}

fn opt_real(v: Option<f64>) -> String {
    v.map(format_real).unwrap_or_default()
}

/// A finished run, ready to be written out.
pub struct RunRecord<'a> {
    pub data: &'a CountMatrix,
    pub spec: &'a ModelSpec,
    pub config: &'a RunConfig,
    pub contrasts: &'a [ContrastSpec],
    pub outputs: &'a [ChainOutput],
    pub wall_seconds: f64,
}

impl RunRecord<'_> {
    fn across<T>(&self, f: impl Fn(&ChainOutput) -> T) -> Vec<T> {
        self.outputs.iter().map(f).collect()
    }

    /// Pooled estimates of ν, τ, θ, σ in sample-column order.
    pub fn hyper_estimates(&self) -> Vec<(String, Estimate)> {
        let per_chain: Vec<_> = self.across(|o| o.accumulators.hyper());
        (0..per_chain[0].len())
            .map(|k| {
                let chains: Vec<_> = per_chain.iter().map(|h| h[k].1).collect();
                (per_chain[0][k].0.clone(), Estimate::from_chains(&chains))
            })
            .collect()
    }

    /// R̂ from the accumulators of every monitored parameter (hyperparameters, γ, β), with
    /// ESS wherever thinned samples exist.
    pub fn diagnostics(&self) -> Vec<DiagnosticRow> {
        let mut names_acc: Vec<(String, Vec<MomentAccumulator>)> = Vec::new();
        let per_chain: Vec<_> = self.across(|o| o.accumulators.hyper());
        for k in 0..per_chain[0].len() {
            names_acc.push((
                per_chain[0][k].0.clone(),
                per_chain.iter().map(|h| h[k].1).collect(),
            ));
        }
        let l = self.spec.n_coefficients();
        for g in 0..self.data.n_genes() {
            names_acc.push((
                format!("gamma[{}]", g + 1),
                self.across(|o| o.accumulators.gamma[g]),
            ));
            for k in 0..l {
                names_acc.push((
                    format!("beta[{},{}]", g + 1, k + 1),
                    self.across(|o| o.accumulators.beta[[g, k]]),
                ));
            }
        }
        let tables: Vec<&SampleTable> = self.outputs.iter().map(|o| &o.samples).collect();
        names_acc
            .into_iter()
            .map(|(parameter, chains)| {
                let rhat = gelman_rhat(&chains);
                let ess = series(&tables, &parameter).and_then(|s| effective_sample_size(&s).ok());
                DiagnosticRow {
                    flag: RhatFlag::classify(&rhat),
                    rhat: rhat.ok(),
                    parameter,
                    ess,
                }
            })
            .collect()
    }
}

/// Per-chain series of one sample column, if every table has it.
fn series(tables: &[&SampleTable], name: &str) -> Option<Vec<Vec<f64>>> {
    tables.iter().map(|t| t.column(name)).collect()
}

/// R̂ and ESS recomputed from saved sample tables alone.
pub fn diagnose_samples(tables: &[SampleTable]) -> Result<Vec<DiagnosticRow>> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Config("no sample tables to diagnose".into()))?;
    if tables.iter().any(|t| t.columns != first.columns) {
        return Err(Error::Config("sample tables have different columns".into()));
    }
    let refs: Vec<&SampleTable> = tables.iter().collect();
    Ok(first
        .columns
        .iter()
        .map(|name| {
            let s = series(&refs, name).expect("columns checked");
            let rhat = crate::diagnostics::gelman_rhat_from_series(&s);
            DiagnosticRow {
                parameter: name.clone(),
                flag: RhatFlag::classify(&rhat),
                rhat: rhat.ok(),
                ess: effective_sample_size(&s).ok(),
            }
        })
        .collect())
}

pub fn write_diagnostics(path: &Path, rows: &[DiagnosticRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = |e| Error::csv(path, e);
    w.write_record(["parameter", "rhat", "flag", "ess"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.parameter.clone(),
            opt_real(r.rhat),
            r.flag.as_str().into(),
            opt_real(r.ess),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_samples(path: &Path, table: &SampleTable) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = |e| Error::csv(path, e);
    w.write_record(std::iter::once("iteration").chain(table.columns.iter().map(String::as_str)))
        .map_err(io)?;
    for (t, row) in table.iterations.iter().zip(&table.rows) {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|&v| format_real(v)));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples(path: &Path) -> Result<SampleTable> {
    let (iters, columns, rows) = read_labelled(path, |v| {
        v.parse::<f64>().map_err(|_| format!("not a number: `{v}`"))
    })?;
    let iterations = iters
        .iter()
        .enumerate()
        .map(|(i, t)| {
            t.parse::<u64>()
                .map_err(|_| parse_err(path, i + 2, "iteration", format!("bad iteration `{t}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleTable {
        columns,
        iterations,
        rows,
    })
}

/// Reads `chain_<c>.csv` files of a samples directory in chain order.
pub fn read_sample_dir(dir: &Path) -> Result<Vec<SampleTable>> {
    let mut files: Vec<(u64, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let stem = p.file_stem()?.to_str()?;
            let c = stem.strip_prefix("chain_")?.parse().ok()?;
            (p.extension()? == "csv").then_some((c, p))
        })
        .collect();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no chain_<c>.csv files in {}",
            dir.display()
        )));
    }
    files.sort();
    files.iter().map(|(_, p)| read_samples(p)).collect()
}

#[derive(Debug, Clone, Serialize)]
struct ChainReport {
    chain: usize,
    clamps: u64,
    saved_rows: usize,
    step_seconds: BTreeMap<&'static str, f64>,
}

#[derive(Debug, Clone, Serialize)]
struct RunReport<'a> {
    seed: u64,
    version: &'static str,
    config: &'a RunConfig,
    genes: usize,
    samples: usize,
    coefficients: usize,
    duplicate_gene_ids: usize,
    saved_genes: Vec<&'a str>,
    contrasts: Vec<&'a str>,
    wall_seconds: f64,
    clamps: u64,
    step_seconds: BTreeMap<&'static str, f64>,
    rhat_below_threshold: f64,
    chains: Vec<ChainReport>,
}

fn step_map(t: &crate::engine::StepTimings) -> BTreeMap<&'static str, f64> {
    t.iter().collect()
}

/// Paths of the files written by [`write_results`].
#[derive(Debug, Clone, PartialEq)]
pub struct ResultFiles {
    pub gene_estimates: PathBuf,
    pub hyper_estimates: PathBuf,
    pub diagnostics: PathBuf,
    pub contrasts: Option<PathBuf>,
    pub samples: Vec<PathBuf>,
    pub run_report: PathBuf,
}

pub fn write_results(dir: &Path, run: &RunRecord<'_>) -> Result<ResultFiles> {
    prepare_output_dir(dir)?;
    let l = run.spec.n_coefficients();

    let gene_path = dir.join("gene_estimates.csv");
    {
        let mut w = csv_writer(&gene_path)?;
        let io = |e| Error::csv(&gene_path, e);
        let per_gene: Vec<(usize, &ContrastSpec)> = run
            .contrasts
            .iter()
            .enumerate()
            .filter(|(_, c)| c.scope() == ContrastScope::PerGene)
            .collect();
        let mut header = vec!["gene".to_string()];
        let stats = ["mean", "sd", "lower", "upper"];
        header.extend(stats.iter().map(|s| format!("gamma_{s}")));
        for k in 1..=l {
            header.extend(stats.iter().map(|s| format!("beta{k}_{s}")));
        }
        header.extend(per_gene.iter().map(|(_, c)| format!("prob_{}", c.id())));
        w.write_record(&header).map_err(io)?;
        for (g, gene) in run.data.genes().iter().enumerate() {
            let mut rec = vec![gene.clone()];
            rec.extend(Estimate::from_chains(&run.across(|o| o.accumulators.gamma[g])).cells());
            for k in 0..l {
                rec.extend(
                    Estimate::from_chains(&run.across(|o| o.accumulators.beta[[g, k]])).cells(),
                );
            }
            for &(i, _) in &per_gene {
                let p = run
                    .outputs
                    .iter()
                    .map(|o| o.contrasts[i].prob[g])
                    .sum::<f64>()
                    / run.outputs.len() as f64;
                rec.push(format_real(p));
            }
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(&gene_path, e))?;
    }

    let hyper_path = dir.join("hyper_estimates.csv");
    {
        let mut w = csv_writer(&hyper_path)?;
        let io = |e| Error::csv(&hyper_path, e);
        w.write_record(["parameter", "mean", "sd", "lower", "upper"])
            .map_err(io)?;
        for (name, est) in run.hyper_estimates() {
            let mut rec = vec![name];
            rec.extend(est.cells());
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(&hyper_path, e))?;
    }

    let diag_path = dir.join("diagnostics.csv");
    let diagnostics = run.diagnostics();
    write_diagnostics(&diag_path, &diagnostics)?;

    let global: Vec<(usize, &ContrastSpec)> = run
        .contrasts
        .iter()
        .enumerate()
        .filter(|(_, c)| c.scope() == ContrastScope::Global)
        .collect();
    let contrasts_path = if global.is_empty() {
        None
    } else {
        let path = dir.join("contrasts.csv");
        let mut w = csv_writer(&path)?;
        let io = |e| Error::csv(&path, e);
        let mut header = vec!["contrast".to_string(), "probability".to_string()];
        header.extend((1..=run.outputs.len()).map(|c| format!("chain_{c}")));
        w.write_record(&header).map_err(io)?;
        for (i, c) in global {
            let per: Vec<f64> = run.across(|o| o.contrasts[i].prob[0]);
            let mut rec = vec![
                c.id().to_string(),
                format_real(per.iter().sum::<f64>() / per.len() as f64),
            ];
            rec.extend(per.iter().map(|&p| format_real(p)));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Some(path)
    };

    let mut sample_paths = Vec::new();
    for o in run.outputs {
        let p = dir
            .join("samples")
            .join(format!("chain_{}.csv", o.chain + 1));
        write_samples(&p, &o.samples)?;
        sample_paths.push(p);
    }

    let mut total = crate::engine::StepTimings::default();
    for o in run.outputs {
        total.merge(&o.timings);
    }
    let with_rhat: Vec<f64> = diagnostics.iter().filter_map(|d| d.rhat).collect();
    let passing = with_rhat
        .iter()
        .filter(|&&r| r < crate::diagnostics::RHAT_THRESHOLD)
        .count();
    let report = RunReport {
        seed: run.config.seed,
        version: env!("CARGO_PKG_VERSION"),
        config: run.config,
        genes: run.data.n_genes(),
        samples: run.data.n_samples(),
        coefficients: l,
        duplicate_gene_ids: run.data.duplicate_genes().len(),
        saved_genes: run.outputs[0]
            .saved_genes
            .iter()
            .map(|&g| run.data.genes()[g].as_str())
            .collect(),
        contrasts: run.contrasts.iter().map(ContrastSpec::id).collect(),
        wall_seconds: run.wall_seconds,
        clamps: run.outputs.iter().map(|o| o.clamps).sum(),
        step_seconds: step_map(&total),
        rhat_below_threshold: if with_rhat.is_empty() {
            f64::NAN
        } else {
            passing as f64 / with_rhat.len() as f64
        },
        chains: run
            .outputs
            .iter()
            .map(|o| ChainReport {
                chain: o.chain + 1,
                clamps: o.clamps,
                saved_rows: o.samples.len(),
                step_seconds: step_map(&o.timings),
            })
            .collect(),
    };
    let report_path = dir.join("run_report.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Json {
        path: report_path.clone(),
        source: e,
    })?;
    fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;

    Ok(ResultFiles {
        gene_estimates: gene_path,
        hyper_estimates: hyper_path,
        diagnostics: diag_path,
        contrasts: contrasts_path,
        samples: sample_paths,
        run_report: report_path,
    })
}
