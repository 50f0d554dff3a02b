// SPDX-License-Identifier: Apache-2.0

//! Ride-quality, stability and task metrics over rollout traces.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::sim::rollout::RolloutTrace;

/// Mean norm of the third finite difference of position over `dt³`.
///
/// Uses the four-point stencil `x[k+2] - 3x[k+1] + 3x[k] - x[k-1]`.
pub fn mean_jerk_positions(positions: &[[f64; 3]], dt: f64) -> Result<f64> {
    if positions.len() < 4 {
        return Err(CoreError::data(
            "trace",
            format!("jerk needs at least 4 samples, got {}", positions.len()),
        ));
    }
    if !(dt > 0.0) {
        return Err(CoreError::Config(format!("dt must be positive, got {dt}")));
    }
    let dt3 = dt * dt * dt;
    let n = positions.len() - 3;
    let mut total = 0.0;
    for k in 1..positions.len() - 2 {
        let (a, b, c, d) = (positions[k - 1], positions[k], positions[k + 1], positions[k + 2]);
        let mut sq = 0.0;
        for i in 0..3 {
            let j = (d[i] - 3.0 * c[i] + 3.0 * b[i] - a[i]) / dt3;
            sq += j * j;
        }
        total += sq.sqrt();
    }
    Ok(total / n as f64)
}

pub fn mean_jerk(trace: &RolloutTrace) -> Result<f64> {
    check_uniform(trace)?;
    mean_jerk_positions(&trace.base_position, trace.dt)
}

fn check_uniform(trace: &RolloutTrace) -> Result<()> {
    let dt = trace.dt;
    for w in trace.time.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt.max(1e-12) + 1e-9 {
            return Err(CoreError::data("trace", format!("non-uniform timestep {} vs {dt}", w[1] - w[0])));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Concatenate samples across runs, then compute statistics.
    #[default]
    Concatenate,
    /// Average per-run statistics.
    MeanOfRuns,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AxisStats {
    pub mean_abs_angle: f64,
    pub angle_variance: f64,
    pub mean_abs_rate: f64,
    pub rate_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub roll: AxisStats,
    pub pitch: AxisStats,
    pub yaw: AxisStats,
    pub pooling: Pooling,
    /// Reference the angle statistics are taken about.
    pub equilibrium: String,
    pub samples: usize,
}

fn mean_abs_and_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean_abs = xs.iter().map(|v| v.abs()).sum::<f64>() / n;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean_abs, var.max(0.0))
}

fn axis_series(traces: &[&RolloutTrace], axis: usize) -> (Vec<f64>, Vec<f64>) {
    let mut angles = vec![];
    let mut rates = vec![];
    for t in traces {
        for (k, a) in t.base_orientation.iter().enumerate() {
            let eq = if axis == 1 {
                t.pitch_equilibrium.get(k).copied().unwrap_or(0.0)
            } else {
                0.0
            };
            angles.push(a[axis] - eq);
            rates.push(t.orientation_rates[k][axis]);
        }
    }
    (angles, rates)
}

fn axis_stats(traces: &[&RolloutTrace], axis: usize) -> AxisStats {
    let (angles, rates) = axis_series(traces, axis);
    let (mean_abs_angle, angle_variance) = mean_abs_and_var(&angles);
    let (mean_abs_rate, rate_variance) = mean_abs_and_var(&rates);
    AxisStats {
        mean_abs_angle,
        angle_variance,
        mean_abs_rate,
        rate_variance,
    }
}

pub fn stability_report(traces: &[RolloutTrace], pooling: Pooling) -> Result<StabilityReport> {
    if traces.is_empty() {
        return Err(CoreError::data("traces", "stability report needs at least one trace"));
    }
    let refs: Vec<&RolloutTrace> = traces.iter().collect();
    let per_axis = |axis| match pooling {
        Pooling::Concatenate => axis_stats(&refs, axis),
        Pooling::MeanOfRuns => {
            let n = refs.len() as f64;
            refs.iter().fold(AxisStats::default(), |acc, t| {
                let s = axis_stats(&[t], axis);
                AxisStats {
                    mean_abs_angle: acc.mean_abs_angle + s.mean_abs_angle / n,
                    angle_variance: acc.angle_variance + s.angle_variance / n,
                    mean_abs_rate: acc.mean_abs_rate + s.mean_abs_rate / n,
                    rate_variance: acc.rate_variance + s.rate_variance / n,
                }
            })
        }
    };
    Ok(StabilityReport {
        roll: per_axis(0),
        pitch: per_axis(1),
        yaw: per_axis(2),
        pooling,
        equilibrium: "roll and yaw about 0; pitch about the terrain pitch under the body".into(),
        samples: traces.iter().map(|t| t.len()).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VibrationRms {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    /// RMS of the 3-D rate magnitude.
    pub total: f64,
}

/// Root-mean-square of the orientation rates per axis and in magnitude.
pub fn rms_vibration(trace: &RolloutTrace) -> VibrationRms {
    let n = trace.orientation_rates.len();
    if n == 0 {
        return VibrationRms::default();
    }
    let mut s = [0.0; 3];
    for r in &trace.orientation_rates {
        for a in 0..3 {
            s[a] += r[a] * r[a];
        }
    }
    let n = n as f64;
    VibrationRms {
        roll: (s[0] / n).sqrt(),
        pitch: (s[1] / n).sqrt(),
        yaw: (s[2] / n).sqrt(),
        total: ((s[0] + s[1] + s[2]) / n).sqrt(),
    }
}

pub fn success_rate(traces: &[RolloutTrace]) -> Result<f64> {
    if traces.is_empty() {
        return Err(CoreError::data("traces", "success rate needs at least one trace"));
    }
    Ok(traces.iter().filter(|t| t.goal_reached).count() as f64 / traces.len() as f64)
}

/// Mean relative improvement of `cart_mean` over each baseline, in percent.
pub fn avg_improvement(baseline_means: &[f64], cart_mean: f64) -> Result<f64> {
    if baseline_means.is_empty() {
        return Err(CoreError::data("baselines", "no baseline means given"));
    }
    if let Some(b) = baseline_means.iter().find(|&&b| b == 0.0 || !b.is_finite()) {
        return Err(CoreError::data(
            "baselines",
            format!("baseline mean must be finite and non-zero, got {b}"),
        ));
    }
    let m = baseline_means.len() as f64;
    Ok(baseline_means.iter().map(|&b| (b - cart_mean) / b).sum::<f64>() / m * 100.0)
}

/// Horizontal-and-vertical arc length of the base path over `[0, window]`.
pub fn distance_within(trace: &RolloutTrace, window: f64) -> Result<f64> {
    let t0 = trace.time.first().copied().unwrap_or(0.0);
    let end = trace.time.last().copied().unwrap_or(0.0) - t0;
    if end + 1e-9 < window {
        return Err(CoreError::data(
            "trace",
            format!("trace lasts {end:.3} s, shorter than the {window} s window"),
        ));
    }
    let mut d = 0.0;
    for k in 1..trace.len() {
        if trace.time[k] - t0 > window + 1e-9 {
            break;
        }
        let (a, b) = (trace.base_position[k - 1], trace.base_position[k]);
        d += ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
    }
    Ok(d)
}

pub fn time_to_goal(trace: &RolloutTrace) -> Option<f64> {
    trace.goal_reached.then_some(trace.elapsed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub mean_jerk: f64,
    pub time_to_goal: Option<f64>,
    /// Distance over the first 10 s, or over the whole trace if shorter.
    pub distance_10s: f64,
    pub success: bool,
}

pub fn performance_report(trace: &RolloutTrace) -> Result<PerformanceReport> {
    let duration = trace.time.last().copied().unwrap_or(0.0) - trace.time.first().copied().unwrap_or(0.0);
    Ok(PerformanceReport {
        mean_jerk: mean_jerk(trace)?,
        time_to_goal: time_to_goal(trace),
        distance_10s: distance_within(trace, duration.min(10.0))?,
        success: trace.goal_reached,
    })
}

/// Ranks with ties sharing the average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
