//! Pose accuracy metrics: ADD / ADD-S, 2D projection error, threshold
//! accuracy and the ADD(-S) area under the accuracy curve.

pub mod kdtree;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_points, CameraIntrinsics, ObjectModel, Pose};
use kdtree::{dist2, KdTree};

/// Above this many points closest-point queries go through a k-d tree.
pub const KD_TREE_THRESHOLD: usize = 512;

pub const DEFAULT_PROJ2D_PX: f64 = 5.0;
pub const DEFAULT_ADD_FRACTION: f64 = 0.1;
pub const DEFAULT_AUC_MAX: f64 = 0.10;

/// For each point of `a`, the index of its closest point in `b` and the
/// distance to it.
pub fn closest_points(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Vec<(usize, f64)> {
    if b.len() > KD_TREE_THRESHOLD {
        let tree = KdTree::new(b);
        a.iter()
            .map(|p| {
                let (i, d2) = tree.nearest(p).expect("nonempty");
                (i, d2.sqrt())
            })
            .collect()
    } else {
        let bb: Vec<[f64; 3]> = b.iter().map(|p| [p.x, p.y, p.z]).collect();
        a.iter()
            .map(|p| {
                let q = [p.x, p.y, p.z];
                let mut best = (0, f64::INFINITY);
                for (i, c) in bb.iter().enumerate() {
                    let d = dist2(&q, c);
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                (best.0, best.1.sqrt())
            })
            .collect()
    }
}

/// ADD over an explicit point set; `symmetric` selects ADD-S.
pub fn add_points(gt: &Pose, pred: &Pose, points: &[Vector3<f64>], symmetric: bool) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let a = transform_points(gt, points);
    let b = transform_points(pred, points);
    let total: f64 = if symmetric {
        closest_points(&a, &b).iter().map(|(_, d)| d).sum()
    } else {
        a.iter().zip(&b).map(|(p, q)| (p - q).norm()).sum()
    };
    Ok(total / points.len() as f64)
}

/// Mean 3D distance between model points under the two poses, or the mean
/// closest-point distance when `symmetric`.
pub fn metric_add(gt: &Pose, pred: &Pose, model: &ObjectModel, symmetric: bool) -> Result<f64> {
    add_points(gt, pred, &model.points, symmetric)
}

/// Mean pixel distance between projected model points. For symmetric
/// objects the lowest error over all symmetry-equivalent ground truths.
pub fn metric_proj2d(
    gt: &Pose,
    pred: &Pose,
    model: &ObjectModel,
    k: &CameraIntrinsics,
    symmetric: bool,
) -> Result<f64> {
    if model.points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let project = |pose: &Pose| -> Result<Vec<_>> {
        transform_points(pose, &model.points)
            .iter()
            .map(|p| k.project(p))
            .collect()
    };
    let predicted = project(pred)?;
    let candidates: Vec<Pose> = if symmetric {
        model.symmetries.iter().map(|s| gt.compose(s)).collect()
    } else {
        vec![*gt]
    };
    let mut best = f64::INFINITY;
    for cand in &candidates {
        let reference = project(cand)?;
        let err = reference.iter().zip(&predicted).map(|(a, b)| (a - b).norm()).sum::<f64>()
            / model.points.len() as f64;
        best = best.min(err);
    }
    Ok(best)
}

/// Fraction of errors strictly below `threshold`.
pub fn accuracy_at_threshold(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::UndefinedAccuracy);
    }
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("accuracy threshold must be positive, got {threshold}")));
    }
    Ok(errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64)
}

/// Area under the accuracy-vs-threshold curve on `[0, max_threshold]`,
/// divided by `max_threshold`. Exact for the step-shaped curve: each error
/// `e` contributes `max_threshold - e` while below the cap.
pub fn auc_add(errors: &[f64], max_threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::UndefinedAccuracy);
    }
    if !(max_threshold > 0.0) {
        return Err(Error::Config(format!("AUC cap must be positive, got {max_threshold}")));
    }
    let area: f64 = errors
        .iter()
        .map(|&e| if e < max_threshold { max_threshold - e.max(0.0) } else { 0.0 })
        .sum();
    Ok(area / (errors.len() as f64 * max_threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub proj2d_px: f64,
    /// ADD threshold as a fraction of the model diameter.
    pub add_fraction: f64,
    pub auc_max: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            proj2d_px: DEFAULT_PROJ2D_PX,
            add_fraction: DEFAULT_ADD_FRACTION,
            auc_max: DEFAULT_AUC_MAX,
        }
    }
}

/// Errors of one evaluated instance. Missed detections carry infinite errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub object: String,
    pub diameter: f64,
    pub add: f64,
    pub proj2d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectScores {
    pub samples: usize,
    pub add_acc: f64,
    pub proj2d_acc: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub thresholds: Thresholds,
    pub per_object: BTreeMap<String, ObjectScores>,
    /// Unweighted means over objects.
    pub mean: ObjectScores,
}

impl MetricReport {
    pub fn from_records(records: &[EvalRecord], thresholds: Thresholds) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::UndefinedAccuracy);
        }
        let mut groups: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
        for r in records {
            groups.entry(&r.object).or_default().push(r);
        }
        let mut per_object = BTreeMap::new();
        for (name, rs) in groups {
            // the ADD threshold scales with each record's diameter
            let add_ok = rs.iter().filter(|r| r.add < r.diameter * thresholds.add_fraction).count();
            let proj: Vec<f64> = rs.iter().map(|r| r.proj2d).collect();
            let add: Vec<f64> = rs.iter().map(|r| r.add).collect();
            per_object.insert(
                name.to_string(),
                ObjectScores {
                    samples: rs.len(),
                    add_acc: add_ok as f64 / rs.len() as f64,
                    proj2d_acc: accuracy_at_threshold(&proj, thresholds.proj2d_px)?,
                    auc: auc_add(&add, thresholds.auc_max)?,
                },
            );
        }
        let n = per_object.len() as f64;
        let mean = ObjectScores {
            samples: records.len(),
            add_acc: per_object.values().map(|s| s.add_acc).sum::<f64>() / n,
            proj2d_acc: per_object.values().map(|s| s.proj2d_acc).sum::<f64>() / n,
            auc: per_object.values().map(|s| s.auc).sum::<f64>() / n,
        };
        Ok(Self {
            thresholds,
            per_object,
            mean,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Plain-text table, one row per object plus the mean, in percent.
    pub fn to_table(&self) -> String {
        let width = self.per_object.keys().map(|k| k.len()).max().unwrap_or(0).max("Object".len()).max("Mean".len());
        let header = format!(
            "2D-Proj({}px)",
            self.thresholds.proj2d_px
        );
        let add_header = format!("ADD(-S)({}d)", self.thresholds.add_fraction);
        let auc_header = format!("AUC({}m)", self.thresholds.auc_max);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>14}  {:>14}  {:>10}",
            "Object", "Samples", header, add_header, auc_header
        );
        let row = |out: &mut String, name: &str, s: &ObjectScores| {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>14.1}  {:>14.1}  {:>10.1}",
                name,
                s.samples,
                100.0 * s.proj2d_acc,
                100.0 * s.add_acc,
                100.0 * s.auc
            );
        };
        for (name, s) in &self.per_object {
            row(&mut out, name, s);
        }
        row(&mut out, "Mean", &self.mean);
        out
    }
}
