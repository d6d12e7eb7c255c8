//! Univariate stepping-out slice sampler with weighted-average width tuning.
//!
//! Each call moves one scalar from `x0` to `x1` under an arbitrary log density.
//! During burn-in the interval width `w` of every variable is retuned to a weighted
//! average of its past absolute moves, with later iterations weighted more heavily:
//! after iteration `m`, `w = Σ_{i≤m} i·|Δ_i| / (m(m+1)/2)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::SliceError;

/// Tuning will never set a width below this.
pub const MIN_WIDTH: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceConfig {
    /// Maximum total number of stepping-out steps (K).
    pub max_steps: usize,
    /// Last iteration at which widths are tuned (M_B).
    pub burnin: u64,
    /// Widths stay fixed for iterations `m <= tune_cutoff` (M_C).
    pub tune_cutoff: u64,
    pub initial_width: f64,
    /// Cap on the shrinkage loop before the update is reported as stalled.
    pub max_shrink: usize,
}

impl SliceConfig {
    pub const DEFAULT_MAX_STEPS: usize = 100;
    pub const DEFAULT_INITIAL_WIDTH: f64 = 1.0;
    pub const DEFAULT_MAX_SHRINK: usize = 1000;

    /// Defaults for a given burn-in length, with `M_C = min(500, M_B / 10)`.
    pub fn with_burnin(burnin: u64) -> Self {
        Self {
            max_steps: Self::DEFAULT_MAX_STEPS,
            burnin,
            tune_cutoff: Self::default_tune_cutoff(burnin),
            initial_width: Self::DEFAULT_INITIAL_WIDTH,
            max_shrink: Self::DEFAULT_MAX_SHRINK,
        }
    }

    pub fn default_tune_cutoff(burnin: u64) -> u64 {
        500.min(burnin / 10)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_steps == 0 {
            return Err("max_step_out must be at least 1".into());
        }
        if self.burnin > 0 && self.tune_cutoff >= self.burnin {
            return Err(format!(
                "tune_cutoff ({}) must be smaller than burnin ({}): widths need M_C < M_B",
                self.tune_cutoff, self.burnin
            ));
        }
        if !(self.initial_width.is_finite() && self.initial_width > 0.0) {
            return Err(format!(
                "initial width must be positive, got {}",
                self.initial_width
            ));
        }
        if self.max_shrink == 0 {
            return Err("max_shrink must be at least 1".into());
        }
        Ok(())
    }
}

/// Per-variable tuning state: current width and the weighted sum of past moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceVar {
    pub w: f64,
    pub w_aux: f64,
}

impl SliceVar {
    pub fn new(width: f64) -> Self {
        Self {
            w: width,
            w_aux: 0.0,
        }
    }
}

/// Updates the width after iteration `m` moved the variable by `delta`.
///
/// Callers only invoke this while `m <= cfg.burnin`.
pub fn tune_update(var: &mut SliceVar, m: u64, delta: f64, cfg: &SliceConfig) {
    let mf = m as f64;
    var.w_aux += mf * delta;
    if m > cfg.tune_cutoff {
        let w = var.w_aux / (0.5 * mf * (mf + 1.0));
        if w >= MIN_WIDTH && w.is_finite() {
            var.w = w;
        }
    }
}

/// One slice-sampling update of `x0` under `logf`, evaluated in log space.
///
/// The interval of width `w` is placed uniformly around `x0`, stepped out at most
/// `K_L` times to the left and `K - K_L` to the right (K_L uniform on 0..=K), then
/// shrunk towards `x0` until a point inside the slice is drawn. When `m` is a burn-in
/// iteration the width is retuned afterwards.
pub fn slice_step<F, R>(
    mut logf: F,
    x0: f64,
    var: &mut SliceVar,
    cfg: &SliceConfig,
    m: u64,
    rng: &mut R,
) -> Result<f64, SliceError>
where
    F: FnMut(f64) -> f64,
    R: Rng + ?Sized,
{
    let f0 = logf(x0);
    if f0.is_nan() || f0 == f64::NEG_INFINITY {
        return Err(SliceError::InvalidStart { x0 });
    }
    // log u with u ~ Uniform(0, f(x0)); 1 - U lies in (0, 1]
    let log_u = f0 + (1.0 - rng.random::<f64>()).ln();

    let w = var.w;
    let mut left = x0 - rng.random::<f64>() * w;
    let mut right = left + w;

    let k_left = rng.random_range(0..=cfg.max_steps);
    let k_right = cfg.max_steps - k_left;
    for _ in 0..k_left {
        if log_u < logf(left) {
            left -= w;
        } else {
            break;
        }
    }
    for _ in 0..k_right {
        if log_u < logf(right) {
            right += w;
        } else {
            break;
        }
    }

    let mut x1 = None;
    for _ in 0..cfg.max_shrink {
        let proposal = left + rng.random::<f64>() * (right - left);
        if log_u < logf(proposal) {
            x1 = Some(proposal);
            break;
        }
        if proposal > x0 {
            right = proposal;
        } else {
            left = proposal;
        }
    }
    let x1 = x1.ok_or(SliceError::Stall {
        x0,
        w,
        iteration: m,
        shrinks: cfg.max_shrink,
    })?;

    if m <= cfg.burnin {
        tune_update(var, m, (x1 - x0).abs(), cfg);
    }
    Ok(x1)
}
