//! Times one short chain on simulated data and prints the per-step cost.
//!
//! `cargo run --release -p plgibbs --example sweep_timing -- [genes] [workers]`

use std::time::Instant;

use ndarray::{array, Array1};
use plgibbs::engine::{run_chain, RunConfig};
use plgibbs::simulate::{generate, Hyperparameters, SimSpec};
use plgibbs::{ModelSpec, PriorConfig};

fn main() {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("integer argument"));
    let genes = args.next().unwrap_or(500);
    let workers = args.next().unwrap_or(1);

    let design = array![
        [1.0, 1.0, 1.0],
        [1.0, 1.0, 1.0],
        [1.0, 1.0, -1.0],
        [1.0, 1.0, -1.0],
        [1.0, -1.0, 1.0],
        [1.0, -1.0, 1.0],
        [1.0, -1.0, -1.0],
        [1.0, -1.0, -1.0]
    ];
    let (data, _) = generate(&SimSpec {
        genes,
        design: design.clone(),
        offsets: None,
        truth: Hyperparameters {
            nu: 3.0,
            tau: 0.5,
            theta: vec![2.0, 0.0, 0.0],
            sigma: vec![1.0, 0.5, 0.5],
        },
        fixed_gamma: None,
        seed: 1,
    })
    .expect("simulation");
    let spec = ModelSpec::new(design, Array1::zeros(8), PriorConfig::diffuse(3)).expect("model");
    let cfg = RunConfig {
        workers,
        ..RunConfig::quick(1, 500, 500, 10, 1)
    };

    let start = Instant::now();
    let out = run_chain(&data, &spec, &cfg, &[], 0).expect("chain");
    let secs = start.elapsed().as_secs_f64();
    println!(
        "genes={genes} workers={workers} ms_per_sweep={:.3}",
        secs * 1e3 / 1000.0
    );
    for (step, s) in out.timings.iter() {
        println!("{step}_s={s:.3}");
    }
    let acc = &out.accumulators;
    println!("nu={:.3} tau={:.3}", acc.nu.mean, acc.tau.mean);
}
