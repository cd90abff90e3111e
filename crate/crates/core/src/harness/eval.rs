use super::dataset::{Dataset, Sample};
use super::train::PoseEstimator;
use crate::error::{Error, Result};
use crate::geometry::{CellIndex, ObjectModel};
use crate::marn::{FlowSource, Marn, Variant};
use crate::metrics::{metric_add, metric_proj2d, EvalRecord, MetricReport, Thresholds};
use crate::ppn::{decode_proposals, nms_duplicates, Detection, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};
use crate::renderer::projected_bbox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Refinement passes per detection; zero evaluates the proposals alone.
    pub iterations: usize,
    /// Refinement variant to use; `None` picks the most complete one.
    pub variant: Option<Variant>,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub thresholds: Thresholds,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iterations: 0,
            variant: None,
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub records: Vec<EvalRecord>,
    /// Annotated objects without a detection of their class.
    pub missed: usize,
    /// Proposals dropped because no valid pose could be formed.
    pub dropped: usize,
}

/// Detections placed exactly on the annotations, for upper-bound checks.
pub fn gt_detections(sample: &Sample, models: &[ObjectModel], grid: usize) -> Result<Vec<Detection>> {
    let k = &sample.intrinsics;
    sample
        .objects
        .iter()
        .map(|o| {
            let model = models
                .get(o.class_id)
                .ok_or_else(|| Error::Data(format!("no model for class {}", o.class_id)))?;
            let c = k.project(&o.pose.translation)?;
            let cell = CellIndex::containing(&c, k.width, k.height, grid)
                .ok_or_else(|| Error::OutOfView([c.x, c.y]))?;
            Ok(Detection {
                class_id: o.class_id,
                pose: o.pose,
                confidence: 1.0,
                cell,
                bbox: projected_bbox(model, &o.pose, k, 0.0)?,
            })
        })
        .collect()
}

/// Proposal network, duplicate removal, optional refinement and metrics.
pub fn evaluate(data: &Dataset, est: &PoseEstimator, opts: &EvalOptions) -> Result<EvalOutcome> {
    let ppn = est
        .ppn
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint has no proposal network".into()))?;
    if ppn.config.classes != data.classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            ppn.config.classes,
            data.classes()
        )));
    }
    let marn = if opts.iterations > 0 { est.marn(opts.variant)? } else { None };
    let mut dropped = 0;
    let mut outcome = evaluate_with(
        data,
        |_, s| {
            let grids = ppn.ppn_forward(&s.image)?;
            let (dets, d) = decode_proposals(&grids, &s.intrinsics, &data.models, opts.conf_threshold)?;
            dropped += d;
            Ok(nms_duplicates(&dets, opts.nms_iou))
        },
        marn,
        opts,
    )?;
    outcome.dropped = dropped;
    Ok(outcome)
}

/// Evaluation with an arbitrary detector. Each annotation is matched to the
/// unused detection of its class whose projected center is nearest; the
/// matched pose is refined when `iterations > 0`.
pub fn evaluate_with(
    data: &Dataset,
    mut detector: impl FnMut(usize, &Sample) -> Result<Vec<Detection>>,
    marn: Option<&Marn>,
    opts: &EvalOptions,
) -> Result<EvalOutcome> {
    data.validate()?;
    if opts.iterations > 0 && marn.is_none() {
        return Err(Error::Config("refinement requested but no refinement network is available".into()));
    }
    // Oracle-flow refinement reads the annotation; only meaningful as a
    // diagnostic of the refinement stage.
    let oracle = marn.is_some_and(|m| m.config.flow == FlowSource::Oracle && m.config.variant.uses_flow());
    let mut records = Vec::new();
    let mut missed = 0;
    for (i, s) in data.samples.iter().enumerate() {
        let dets = detector(i, s)?;
        let k = &s.intrinsics;
        let mut used = vec![false; dets.len()];
        for gt in &s.objects {
            let model = data.model(gt.class_id)?;
            let gt_center = k.project(&gt.pose.translation)?;
            let best = dets
                .iter()
                .enumerate()
                .filter(|(j, d)| !used[*j] && d.class_id == gt.class_id)
                .filter_map(|(j, d)| k.project(&d.pose.translation).ok().map(|c| (j, (c - gt_center).norm())))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let Some((j, _)) = best else {
                missed += 1;
                records.push(EvalRecord {
                    object: model.name.clone(),
                    diameter: model.diameter,
                    add: f64::INFINITY,
                    proj2d: f64::INFINITY,
                });
                continue;
            };
            used[j] = true;
            let mut pose = dets[j].pose;
            if let (Some(m), true) = (marn, opts.iterations > 0) {
                let gt_pose = oracle.then_some(&gt.pose);
                pose = m.refine(&pose, &s.image, model, k, opts.iterations, gt_pose)?.pose;
            }
            let sym = model.is_symmetric;
            records.push(EvalRecord {
                object: model.name.clone(),
                diameter: model.diameter,
                add: metric_add(&gt.pose, &pose, model, sym)?,
                proj2d: metric_proj2d(&gt.pose, &pose, model, k, sym).unwrap_or(f64::INFINITY),
            });
        }
    }
    let report = MetricReport::from_records(&records, opts.thresholds)?;
    Ok(EvalOutcome {
        report,
        records,
        missed,
        dropped: 0,
    })
}
