//! Training losses: pose (plain and symmetric), confidence, attention
//! orthogonality and their weighted sum. Every loss returns its value
//! together with the gradient needed for backpropagation.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_to_rotmat_backward, transform_points, ObjectModel, Pose, Quaternion};
use crate::metrics::closest_points;
use crate::tensornet::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub lambda_obj: f64,
    pub lambda_noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.05,
            gamma: 0.1,
            kappa: 0.01,
            lambda_obj: 5.0,
            lambda_noobj: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.kappa, self.lambda_obj, self.lambda_noobj];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }

    /// Late-training setting: every cell weighted equally.
    pub fn uniform_confidence(mut self) -> Self {
        self.lambda_obj = 1.0;
        self.lambda_noobj = 1.0;
        self
    }
}

/// Pose loss value and its gradient with respect to the predicted rotation
/// matrix and translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseLoss {
    pub value: f64,
    pub d_rotation: Matrix3<f64>,
    pub d_translation: Vector3<f64>,
}

impl PoseLoss {
    /// Gradient with respect to the raw quaternion the predicted rotation
    /// was normalized from.
    pub fn d_quaternion(&self, raw: Quaternion) -> Result<[f64; 4]> {
        quat_to_rotmat_backward(raw, &self.d_rotation)
    }
}

/// Average distance between model points under `gt` and `pred`; with
/// `symmetric`, each ground-truth point is matched to its closest predicted
/// point before averaging.
pub fn loss_pose(gt: &Pose, pred: &Pose, model: &ObjectModel, symmetric: bool) -> Result<PoseLoss> {
    loss_pose_points(gt, pred, &model.points, symmetric)
}

pub fn loss_pose_points(gt: &Pose, pred: &Pose, points: &[Vector3<f64>], symmetric: bool) -> Result<PoseLoss> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let n = points.len() as f64;
    let a = transform_points(gt, points);
    let b = transform_points(pred, points);
    let matches: Vec<usize> = if symmetric {
        closest_points(&a, &b).into_iter().map(|(j, _)| j).collect()
    } else {
        (0..points.len()).collect()
    };
    let mut value = 0.0;
    let mut d_rotation = Matrix3::zeros();
    let mut d_translation = Vector3::zeros();
    for (i, &j) in matches.iter().enumerate() {
        let d = a[i] - b[j];
        let len = d.norm();
        value += len;
        if len > 0.0 {
            let db = -d / (len * n);
            d_translation += db;
            d_rotation += db * points[j].transpose();
        }
    }
    Ok(PoseLoss {
        value: value / n,
        d_rotation,
        d_translation,
    })
}

/// `sqrt(sum(lambda * (gt - pred)^2))` with `lambda_obj` on cells whose
/// target is 1 and `lambda_noobj` elsewhere. Returns the gradient with
/// respect to `pred`.
pub fn loss_conf(conf_gt: &Tensor, conf_pred: &Tensor, w: &LossWeights) -> Result<(f64, Tensor)> {
    conf_pred.expect_shape(conf_gt.shape())?;
    let lambdas: Vec<f64> = conf_gt
        .data()
        .iter()
        .map(|&g| if g >= 0.5 { w.lambda_obj } else { w.lambda_noobj })
        .collect();
    let sq: f64 = conf_gt
        .data()
        .iter()
        .zip(conf_pred.data())
        .zip(&lambdas)
        .map(|((g, p), l)| l * (g - p) * (g - p))
        .sum();
    let value = sq.sqrt();
    let mut grad = Tensor::zeros(conf_pred.shape());
    if value > 0.0 {
        for (i, d) in grad.data_mut().iter_mut().enumerate() {
            *d = -lambdas[i] * (conf_gt.data()[i] - conf_pred.data()[i]) / value;
        }
    }
    Ok((value, grad))
}

/// `||A^T A - I||_F` for the matrix whose columns are the flattened maps.
/// Returns one gradient per map.
pub fn loss_orth(maps: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Config("orthogonality loss needs at least one map".into()))?;
    for m in maps {
        m.expect_shape(first.shape())?;
    }
    let k = maps.len();
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let v: f64 = maps[i].data().iter().zip(maps[j].data()).map(|(a, b)| a * b).sum();
            gram[i * k + j] = v - if i == j { 1.0 } else { 0.0 };
            gram[j * k + i] = gram[i * k + j];
        }
    }
    let value = gram.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut grads = vec![Tensor::zeros(first.shape()); k];
    if value > 0.0 {
        // d||M||/dA = 2 A M / ||M|| for symmetric M
        for (j, g) in grads.iter_mut().enumerate() {
            for (i, m) in maps.iter().enumerate() {
                let c = 2.0 * gram[i * k + j] / value;
                if c != 0.0 {
                    for (gv, mv) in g.data_mut().iter_mut().zip(m.data()) {
                        *gv += c * mv;
                    }
                }
            }
        }
    }
    Ok((value, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub pose: f64,
    pub conf: f64,
    pub refine: f64,
    pub orth: f64,
}

/// Weighted sum of the four parts and its gradient with respect to each
/// part, in the order pose, conf, refine, orth.
pub fn loss_total(parts: &LossParts, w: &LossWeights) -> Result<(f64, [f64; 4])> {
    let all = [parts.pose, parts.conf, parts.refine, parts.orth];
    if let Some(bad) = all.iter().position(|v| !v.is_finite()) {
        let name = ["pose", "confidence", "refinement", "orthogonality"][bad];
        return Err(Error::Divergence(format!("{name} loss is {}", all[bad])));
    }
    let coeff = [w.alpha, w.beta, w.gamma, w.kappa];
    Ok((all.iter().zip(&coeff).map(|(a, b)| a * b).sum(), coeff))
}
