//! One-cycle learning-rate schedule.
//!
//! Linear warm-up from `peak / 25` to `peak` over the first 30% of steps,
//! then cosine annealing down to `peak / 1e4` at the last step.

use crate::error::{Error, Result};

pub const WARMUP_FRACTION: f64 = 0.3;
pub const INITIAL_DIV: f64 = 25.0;
pub const FINAL_DIV: f64 = 1e4;

pub fn one_cycle_lr(step: usize, total_steps: usize, peak: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("one-cycle schedule needs at least one step"));
    }
    if step >= total_steps {
        return Err(Error::Range(format!("step {step} outside [0, {total_steps})")));
    }
    let start = peak / INITIAL_DIV;
    let floor = peak / FINAL_DIV;
    if total_steps == 1 {
        return Ok(peak);
    }
    let last = (total_steps - 1) as f64;
    let warm_end = WARMUP_FRACTION * total_steps as f64;
    let t = step as f64;
    let lr = if t <= warm_end {
        if warm_end == 0.0 {
            peak
        } else {
            let f = t / warm_end;
            start * (1.0 - f) + peak * f
        }
    } else {
        let progress = (t - warm_end) / (last - warm_end);
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    };
    Ok(lr)
}
