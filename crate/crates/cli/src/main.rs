//! `plgibbs`: fit, simulate, resample and diagnose from the command line.
//!
//! Progress and summaries go to standard output as one `key=value` record per line.
//! Exit status is 0 on success, 1 for invalid input or configuration and 2 when the
//! sampler fails at run time.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use clap::{Parser, Subcommand};
use plgibbs::engine::{ChainRunner, Progress};
use plgibbs::io::{self, RunRecord};
use plgibbs::simulate;
use plgibbs::Error;

#[derive(Debug, Parser)]
#[command(
    name = "plgibbs",
    version,
    about = "Slice-within-Gibbs sampler for RNA-seq count models"
)]
struct Cli {
    /// Worker threads per run (overrides the manifest).
    #[arg(long, global = true, env = "PLGIBBS_WORKERS")]
    workers: Option<usize>,

    /// Replaces the seed given in the manifest or simulation file.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Only print errors and the final summary.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model described by a JSON manifest.
    Fit { manifest: PathBuf },
    /// Draw a synthetic count table from a JSON simulation file.
    Simulate {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write every generating parameter as JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Inflate a count table by duplicating columns and resampling genes.
    Resample {
        counts: PathBuf,
        #[arg(long)]
        genes: usize,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute R̂ and ESS from saved sample files.
    Diagnose {
        /// A samples directory or a fit output directory containing one.
        dir: PathBuf,
        /// Write diagnostics as CSV here instead of printing records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn record(fields: &[(&str, String)]) -> String {
    fields
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn fit(cli: &Cli, manifest: &Path) -> Result<(), Error> {
    let mut run = io::load_manifest(manifest)?;
    if let Some(w) = cli.workers {
        run.config.workers = w;
    }
    if let Some(s) = cli.seed_override {
        run.config.seed = s;
    }
    run.config.validate()?;
    let out_dir = run.manifest.output.clone();
    io::prepare_output_dir(&out_dir)?;
    if !cli.quiet {
        println!(
            "{}",
            record(&[
                ("event", "start".into()),
                ("genes", run.data.n_genes().to_string()),
                ("samples", run.data.n_samples().to_string()),
                ("coefficients", run.spec.n_coefficients().to_string()),
                ("chains", run.config.chains.to_string()),
                ("burnin", run.config.burnin.to_string()),
                ("iterations", run.config.iterations.to_string()),
                ("workers", run.config.workers.to_string()),
                ("seed", run.config.seed.to_string()),
            ])
        );
    }

    let stdout = Mutex::new(());
    let progress = |p: &Progress| {
        let _guard = stdout.lock();
        println!(
            "{}",
            record(&[
                ("event", "progress".into()),
                ("chain", (p.chain + 1).to_string()),
                ("iteration", p.iteration.to_string()),
                ("total", p.total.to_string()),
                ("phase", if p.burnin { "burnin" } else { "sampling" }.into()),
                ("elapsed_s", format!("{:.3}", p.elapsed.as_secs_f64())),
            ])
        );
    };
    let start = Instant::now();
    let mut runner = ChainRunner::new(&run.data, &run.spec, &run.config, &run.contrasts);
    if !cli.quiet {
        runner = runner.progress(&progress);
    }
    let outputs = runner.run_all()?;
    let wall = start.elapsed().as_secs_f64();

    if !cli.quiet {
        for o in &outputs {
            let mut fields = vec![
                ("event", "chain_done".to_string()),
                ("chain", (o.chain + 1).to_string()),
                ("clamps", o.clamps.to_string()),
            ];
            let steps: Vec<(String, String)> = o
                .timings
                .iter()
                .map(|(k, v)| (format!("{k}_s"), format!("{v:.3}")))
                .collect();
            fields.extend(steps.iter().map(|(k, v)| (k.as_str(), v.clone())));
            println!("{}", record(&fields));
        }
    }
    let rec = RunRecord {
        data: &run.data,
        spec: &run.spec,
        config: &run.config,
        contrasts: &run.contrasts,
        outputs: &outputs,
        wall_seconds: wall,
    };
    let files = io::write_results(&out_dir, &rec)?;
    println!(
        "{}",
        record(&[
            ("event", "done".into()),
            ("output", out_dir.display().to_string()),
            ("report", files.run_report.display().to_string()),
            ("wall_s", format!("{wall:.3}")),
        ])
    );
    Ok(())
}

fn simulate_cmd(cli: &Cli, spec: &Path, out: &Path, truth: Option<&Path>) -> Result<(), Error> {
    let mut spec = io::load_sim_manifest(spec)?;
    if let Some(s) = cli.seed_override {
        spec.seed = s;
    }
    let (data, t) = simulate::generate(&spec)?;
    io::write_counts(out, &data)?;
    if let Some(p) = truth {
        let text = serde_json::to_string_pretty(&t).map_err(|e| Error::Json {
            path: p.to_path_buf(),
            source: e,
        })?;
        std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    println!(
        "{}",
        record(&[
            ("event", "simulated".into()),
            ("genes", data.n_genes().to_string()),
            ("samples", data.n_samples().to_string()),
            ("seed", spec.seed.to_string()),
            ("out", out.display().to_string()),
        ])
    );
    Ok(())
}

fn resample_cmd(
    cli: &Cli,
    counts: &Path,
    genes: usize,
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<(), Error> {
    let seed = cli.seed_override.unwrap_or(seed);
    let base = io::load_counts(counts)?;
    let data = simulate::resample(&base, genes, samples, seed)?;
    io::write_counts(out, &data)?;
    println!(
        "{}",
        record(&[
            ("event", "resampled".into()),
            ("genes", data.n_genes().to_string()),
            ("samples", data.n_samples().to_string()),
            ("seed", seed.to_string()),
            ("out", out.display().to_string()),
        ])
    );
    Ok(())
}

fn diagnose(dir: &Path, out: Option<&Path>) -> Result<(), Error> {
    let nested = dir.join("samples");
    let dir = if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    };
    let tables = io::read_sample_dir(&dir)?;
    let rows = io::diagnose_samples(&tables)?;
    match out {
        Some(p) => io::write_diagnostics(p, &rows)?,
        None => {
            let opt = |v: Option<f64>| v.map_or("NA".to_string(), io::format_real);
            for r in &rows {
                println!(
                    "{}",
                    record(&[
                        ("parameter", r.parameter.clone()),
                        ("rhat", opt(r.rhat)),
                        ("flag", r.flag.as_str().into()),
                        ("ess", opt(r.ess)),
                    ])
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    let result = match &cli.command {
        Command::Fit { manifest } => fit(&cli, manifest),
        Command::Simulate { spec, out, truth } => simulate_cmd(&cli, spec, out, truth.as_deref()),
        Command::Resample {
            counts,
            genes,
            samples,
            seed,
            out,
        } => resample_cmd(&cli, counts, *genes, *samples, *seed, out),
        Command::Diagnose { dir, out } => diagnose(dir, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_runtime() { 2 } else { 1 })
        }
    }
}
