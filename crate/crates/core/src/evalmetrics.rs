//! Odometry-style trajectory scoring over 100–800 m subsequences.
//!
//! For every evaluated start index `i` and target length `L`, the endpoint
//! `j` is the first index whose cumulative ground-truth path length from
//! `i` reaches `L` (no interpolation). The error pose is the relative-pose
//! mismatch `(est_i^-1 est_j)^-1 (truth_i^-1 truth_j)`; the translational
//! error norm and rotational log-norm are divided by the actual path length
//! `length(i, j)`, then averaged. Translation is reported in percent,
//! rotation in degrees per kilometer.
//!
//! Both metrics are built from relative increments, so a fixed rigid
//! transform of either trajectory (or both) leaves the report unchanged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasets::Trajectory;
use crate::error::{CoreError, Result};
use crate::geom3d::so3_log;

/// Target subsequence lengths, meters.
pub const EVAL_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// Pair-enumeration controls.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Evaluate every `start_stride`-th index as a subsequence start.
    pub start_stride: usize,
    /// Evaluate every index (overrides the stride); the reference mode.
    pub exhaustive: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            start_stride: 10,
            exhaustive: false,
        }
    }
}

/// Mean errors and pair count for one target length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub rte_percent: f64,
    pub rre_deg_per_km: f64,
    pub count: usize,
}

/// Aggregate relative translational / rotational error report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean translational error over all pairs, percent of path length.
    pub rte_percent: f64,
    /// Mean rotational error over all pairs, degrees per kilometer.
    pub rre_deg_per_km: f64,
    /// Breakdown keyed by target length in meters.
    pub per_length: BTreeMap<u32, LengthStats>,
    pub n_pairs: usize,
    /// False when the truth path is too short for even one pair; the
    /// metric fields are zero and meaningless in that case.
    pub available: bool,
}

/// Prefix sums of consecutive truth position distances; first element 0.
pub fn cumulative_lengths(truth: &Trajectory) -> Vec<f64> {
    let mut cum = Vec::with_capacity(truth.len());
    let mut acc = 0.0;
    for k in 0..truth.len() {
        if k > 0 {
            acc += (truth.p[k] - truth.p[k - 1]).norm();
        }
        cum.push(acc);
    }
    cum
}

fn validate_pair(estimate: &Trajectory, truth: &Trajectory) -> Result<()> {
    estimate.validate()?;
    truth.validate()?;
    if estimate.len() != truth.len() {
        return Err(CoreError::Structural(format!(
            "estimate has {} poses, truth has {}",
            estimate.len(),
            truth.len()
        )));
    }
    if estimate.len() < 2 {
        return Err(CoreError::InvalidInput(
            "trajectory comparison needs at least 2 poses".into(),
        ));
    }
    for (a, b) in estimate.t.iter().zip(&truth.t) {
        if (a - b).abs() > 1e-6 {
            return Err(CoreError::Structural(format!(
                "estimate and truth timestamps diverge: {a} vs {b}"
            )));
        }
    }
    Ok(())
}

/// Score with default options (every 10th start index).
pub fn evaluate(estimate: &Trajectory, truth: &Trajectory) -> Result<MetricReport> {
    evaluate_with(estimate, truth, &EvalOptions::default())
}

/// Score with explicit pair-enumeration options.
pub fn evaluate_with(
    estimate: &Trajectory,
    truth: &Trajectory,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    validate_pair(estimate, truth)?;
    if !opts.exhaustive && opts.start_stride == 0 {
        return Err(CoreError::InvalidInput("start stride must be positive".into()));
    }
    let cum = cumulative_lengths(truth);
    let stride = if opts.exhaustive { 1 } else { opts.start_stride };

    let mut sums: BTreeMap<u32, (f64, f64, usize)> = BTreeMap::new();
    let mut rte_sum = 0.0;
    let mut rre_sum = 0.0;
    let mut n_pairs = 0usize;
    let mut i = 0;
    while i < truth.len() {
        for target in EVAL_LENGTHS {
            // First index whose path length from i reaches the target.
            let j = i + cum[i..].partition_point(|&c| c - cum[i] < target);
            if j >= truth.len() {
                break; // longer targets cannot be reached either
            }
            let length = cum[j] - cum[i];

            // Relative-pose mismatch between estimate and truth increments.
            let rel_e_r = estimate.r[i].inverse() * estimate.r[j];
            let rel_e_t = estimate.r[i].inverse() * (estimate.p[j] - estimate.p[i]);
            let rel_t_r = truth.r[i].inverse() * truth.r[j];
            let rel_t_t = truth.r[i].inverse() * (truth.p[j] - truth.p[i]);
            let err_rot = rel_e_r.inverse() * rel_t_r;
            let err_trans = rel_e_r.inverse() * (rel_t_t - rel_e_t);

            let rte = err_trans.norm() / length * 100.0;
            let rre = so3_log(&err_rot).norm() / length * (180.0 / std::f64::consts::PI) * 1000.0;
            rte_sum += rte;
            rre_sum += rre;
            n_pairs += 1;
            let slot = sums.entry(target as u32).or_insert((0.0, 0.0, 0));
            slot.0 += rte;
            slot.1 += rre;
            slot.2 += 1;
        }
        i += stride;
    }

    let per_length = sums
        .into_iter()
        .map(|(l, (rte, rre, count))| {
            (
                l,
                LengthStats {
                    rte_percent: rte / count as f64,
                    rre_deg_per_km: rre / count as f64,
                    count,
                },
            )
        })
        .collect();
    Ok(MetricReport {
        rte_percent: if n_pairs > 0 { rte_sum / n_pairs as f64 } else { 0.0 },
        rre_deg_per_km: if n_pairs > 0 { rre_sum / n_pairs as f64 } else { 0.0 },
        per_length,
        n_pairs,
        available: n_pairs > 0,
    })
}

/// Fixed-width text table; one row per (label, report, runtime) triple.
pub fn format_report_table(rows: &[(String, MetricReport, f64)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>10} {:>10} {:>12} {:>8}\n",
        "Seq", "Length(m)", "RTE(%)", "RRE(d/km)", "T(s)"
    ));
    for (label, report, wall_s) in rows {
        if !report.available {
            out.push_str(&format!(
                "{:<12} {:>10} {:>10} {:>12} {:>8.2}\n",
                label, "-", "n/a", "n/a", wall_s
            ));
            continue;
        }
        for (length, stats) in &report.per_length {
            out.push_str(&format!(
                "{:<12} {:>10} {:>10.3} {:>12.3} {:>8}\n",
                label, length, stats.rte_percent, stats.rre_deg_per_km, ""
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>10} {:>10.3} {:>12.3} {:>8.2}\n",
            label, "mean", report.rte_percent, report.rre_deg_per_km, wall_s
        ));
    }
    out
}
