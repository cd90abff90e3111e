use serde::{Deserialize, Serialize};

use super::{Marn, ResidualPose};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, ObjectModel, Pose};
use crate::metrics::metric_add;
use crate::renderer::RgbImage;

/// One line of the exported refinement trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineRecord {
    pub iter: usize,
    pub quat: [f64; 4],
    pub t: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub add_to_gt: Option<f64>,
}

/// Result of an iterative refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub pose: Pose,
    /// Starting pose followed by the output of every completed iteration.
    pub history: Vec<Pose>,
    /// Renders of the current estimate that were performed.
    pub renders: usize,
    /// Set when the estimate left the view before all iterations ran.
    pub stopped_early: bool,
    pub records: Vec<RefineRecord>,
}

impl Refinement {
    pub fn iterations(&self) -> usize {
        self.history.len() - 1
    }
}

pub fn refine_trace_to_jsonl(records: &[RefineRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

fn record(iter: usize, pose: &Pose, model: &ObjectModel, gt: Option<&Pose>) -> Result<RefineRecord> {
    Ok(RefineRecord {
        iter,
        quat: pose.rotation.to_array(),
        t: pose.translation.into(),
        add_to_gt: gt.map(|g| metric_add(g, pose, model, model.is_symmetric)).transpose()?,
    })
}

fn leaves_view(e: &Error) -> bool {
    matches!(e, Error::OutOfView(_) | Error::BehindCamera(_) | Error::InvalidDepth(_))
}

impl Marn {
    /// Residual predicted for the current estimate.
    pub fn predict_residual(
        &self,
        image: &RgbImage,
        model: &ObjectModel,
        pose: &Pose,
        k: &CameraIntrinsics,
        gt: Option<&Pose>,
    ) -> Result<ResidualPose> {
        let (crops, flow) = self.prepare(image, model, pose, k, gt)?;
        let out = self.infer(&crops, flow.as_ref())?;
        Ok(self.config.decode(&out))
    }

    /// Renders, compares and corrects `iterations` times. `gt` enables the
    /// oracle flow and the per-iteration ADD in the trace.
    pub fn refine(
        &self,
        pose: &Pose,
        image: &RgbImage,
        model: &ObjectModel,
        k: &CameraIntrinsics,
        iterations: usize,
        gt: Option<&Pose>,
    ) -> Result<Refinement> {
        if iterations == 0 {
            return Err(Error::Config("refinement needs at least one iteration".into()));
        }
        if !(pose.translation.z > 0.0) {
            return Err(Error::InvalidDepth(pose.translation.z));
        }
        let mut current = *pose;
        let mut history = vec![current];
        let mut records = vec![record(0, &current, model, gt)?];
        let mut renders = 0;
        let mut stopped_early = false;
        for iter in 1..=iterations {
            let step = self.prepare(image, model, &current, k, gt).and_then(|(crops, flow)| {
                renders += 1;
                let out = self.infer(&crops, flow.as_ref())?;
                let next = self.config.decode(&out).apply(&current, k)?;
                let center = k.project(&next.translation)?;
                if !k.contains(&center) {
                    return Err(Error::OutOfView([center.x, center.y]));
                }
                Ok(next)
            });
            match step {
                Ok(next) => {
                    current = next;
                    history.push(current);
                    records.push(record(iter, &current, model, gt)?);
                }
                Err(e) if leaves_view(&e) => {
                    log::debug!("refinement stopped at iteration {iter}: {e}");
                    stopped_early = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(Refinement {
            pose: current,
            history,
            renders,
            stopped_early,
            records,
        })
    }
}
