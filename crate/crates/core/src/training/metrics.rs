//! Trajectory recovery and stability metrics.
//!
//! MAE and MSE are means over snapshots, atoms and coordinates. Stability is
//! the percentage of (ligand-atom pair, snapshot) events whose predicted pair
//! distance deviates from the ground-truth distance at the same snapshot by
//! more than `delta`, so lower is better.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::tensor::{Graph, Var};

/// Stability threshold Δ in Å.
pub const STABILITY_DELTA: f64 = 0.5;

fn check_shapes(op: &'static str, pred: &[Vec<Vec3>], truth: &[Vec<Vec3>]) -> Result<()> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![pred.len(), pred.first().map_or(0, Vec::len)],
            right: vec![truth.len(), truth.first().map_or(0, Vec::len)],
        });
    }
    Ok(())
}

fn coord_count(pred: &[Vec<Vec3>]) -> usize {
    pred.iter().map(|s| 3 * s.len()).sum()
}

/// `(mae, mse)` per coordinate. Empty input gives `(0, 0)`.
pub fn metric_recovery(pred: &[Vec<Vec3>], truth: &[Vec<Vec3>]) -> Result<(f64, f64)> {
    check_shapes("metric_recovery", pred, truth)?;
    let n = coord_count(pred);
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.iter().zip(t) {
            for c in 0..3 {
                let d = a[c] - b[c];
                abs += d.abs();
                sq += d * d;
            }
        }
    }
    Ok((abs / n as f64, sq / n as f64))
}

/// Counts of violating events and total events.
pub fn stability_counts(pred: &[Vec<Vec3>], truth: &[Vec<Vec3>], delta: f64) -> Result<(usize, usize)> {
    check_shapes("metric_stability", pred, truth)?;
    if !(delta > 0.0) {
        return Err(Error::Config(format!("stability delta must be positive, got {delta}")));
    }
    let (mut bad, mut total) = (0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let dev = ((p[i] - p[j]).norm() - (t[i] - t[j]).norm()).abs();
                // NaN predictions count as violations
                if !(dev <= delta) {
                    bad += 1;
                }
                total += 1;
            }
        }
    }
    Ok((bad, total))
}

/// Percentage of violating (pair, snapshot) events.
pub fn metric_stability(pred: &[Vec<Vec3>], truth: &[Vec<Vec3>], delta: f64) -> Result<f64> {
    let (bad, total) = stability_counts(pred, truth, delta)?;
    if total == 0 {
        log::warn!("stability needs at least two ligand atoms; reporting 0%");
        return Ok(0.0);
    }
    Ok(100.0 * bad as f64 / total as f64)
}

/// Snapshots per second.
pub fn metric_fps(snapshots: usize, elapsed_seconds: f64) -> f64 {
    if elapsed_seconds > 0.0 {
        snapshots as f64 / elapsed_seconds
    } else {
        f64::INFINITY
    }
}

/// Times `rollout` and returns its result with the achieved snapshots per second.
pub fn timed_rollout<T>(snapshots: usize, rollout: impl FnOnce() -> T) -> (T, f64) {
    let start = std::time::Instant::now();
    let out = rollout();
    let elapsed = start.elapsed().as_secs_f64().max(1e-9);
    (out, metric_fps(snapshots, elapsed))
}

/// Differentiable MAE between predicted position nodes and ground truth.
pub fn loss_trajectory_mae(g: &mut Graph, pred: &[Var], truth: &[Vec<Vec3>]) -> Result<Var> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "loss_trajectory_mae",
            left: vec![pred.len()],
            right: vec![truth.len()],
        });
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        let target = g.constant(crate::tensor::Tensor::from_points(t));
        let d = g.sub(*p, target)?;
        let a = g.abs(d);
        let s = g.sum(a);
        count += 3 * t.len();
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let total = total.expect("at least one snapshot");
    Ok(g.mul_scalar(total, 1.0 / count.max(1) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub id: String,
    pub snapshots: usize,
    pub mae: f64,
    pub mse: f64,
    pub stability: f64,
    /// Whether the rollout diverged and was padded with its last finite snapshot.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub split: String,
    /// Å, per coordinate.
    pub mae: f64,
    pub mse: f64,
    /// Percent of violating pair events.
    pub stability: f64,
    /// Snapshots per second. Wall-clock, so not reproducible.
    pub fps: f64,
    pub per_trajectory: Vec<TrajectoryMetrics>,
}

impl MetricReport {
    /// Pools per-trajectory predictions into one report.
    pub fn from_rollouts(
        method: &str,
        split: &str,
        items: &[(String, Vec<Vec<Vec3>>, Vec<Vec<Vec3>>, bool)],
        fps: f64,
    ) -> Result<Self> {
        let (mut abs, mut sq, mut coords, mut bad, mut events) = (0.0, 0.0, 0usize, 0usize, 0usize);
        let mut per = Vec::with_capacity(items.len());
        for (id, pred, truth, truncated) in items {
            let (mae, mse) = metric_recovery(pred, truth)?;
            let (b, e) = stability_counts(pred, truth, STABILITY_DELTA)?;
            let n = coord_count(pred);
            abs += mae * n as f64;
            sq += mse * n as f64;
            coords += n;
            bad += b;
            events += e;
            per.push(TrajectoryMetrics {
                id: id.clone(),
                snapshots: pred.len(),
                mae,
                mse,
                stability: if e == 0 { 0.0 } else { 100.0 * b as f64 / e as f64 },
                truncated: *truncated,
            });
        }
        let report = Self {
            method: method.to_string(),
            split: split.to_string(),
            mae: if coords == 0 { 0.0 } else { abs / coords as f64 },
            mse: if coords == 0 { 0.0 } else { sq / coords as f64 },
            stability: if events == 0 { 0.0 } else { 100.0 * bad as f64 / events as f64 },
            fps,
            per_trajectory: per,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.stability) || !(self.mae >= 0.0) || !(self.mse >= 0.0) {
            return Err(Error::Config(format!(
                "metric report out of range: mae {}, mse {}, stability {}",
                self.mae, self.mse, self.stability
            )));
        }
        Ok(())
    }

    /// The report without its wall-clock field, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self { fps: 0.0, ..self.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One header row and one row per trajectory, then an `ALL` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,split,trajectory,snapshots,mae,mse,stability,truncated\n");
        for t in &self.per_trajectory {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.method, self.split, t.id, t.snapshots, t.mae, t.mse, t.stability, t.truncated
            );
        }
        let total: usize = self.per_trajectory.iter().map(|t| t.snapshots).sum();
        let _ = writeln!(
            out,
            "{},{},ALL,{},{},{},{},{}",
            self.method,
            self.split,
            total,
            self.mae,
            self.mse,
            self.stability,
            self.per_trajectory.iter().any(|t| t.truncated)
        );
        out
    }

    /// Writes `<path>` as JSON and `<path>.csv` next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))?;
        let csv = path.with_extension("csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<12} mae {:.4} Å  mse {:.4}  stability {:.2}%  fps {:.1}",
            self.method, self.mae, self.mse, self.stability, self.fps
        )
    }
}
