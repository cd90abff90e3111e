use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::KeyValues;
use super::dataset::Dataset;
use super::scene::{item_rng, perturb_pose};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, ObjectModel, Pose};
use crate::losses::{loss_total, LossParts, LossWeights};
use crate::marn::{FlowSource, Marn, MarnConfig, Variant, NETWORK_NAMES};
use crate::ppn::{Ppn, PpnConfig};
use crate::tensornet::{Adam, Checkpoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Images per optimizer step.
    pub batch: usize,
    pub lr: f64,
    /// Cosine decay ends at this fraction of `lr`.
    pub lr_floor: f64,
    pub weights: LossWeights,
    /// First epoch trained with uniform confidence weights; `None` means
    /// half way through.
    pub lambda_switch: Option<usize>,
    /// Epochs during which the flow network is not updated.
    pub flow_freeze: usize,
    /// Chained refinement passes per training example.
    pub refine_iters: usize,
    pub angle_deg: [f64; 2],
    pub trans_frac: [f64; 2],
    /// Draw each object's perturbation once instead of every epoch.
    pub fixed_perturbations: bool,
    pub train_ppn: bool,
    pub train_marn: bool,
    /// Refinement variants trained side by side.
    pub variants: Vec<Variant>,
    pub ppn: PpnConfig,
    pub marn: MarnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch: 1,
            lr: 1e-3,
            lr_floor: 0.05,
            weights: LossWeights::default(),
            lambda_switch: None,
            flow_freeze: 2,
            refine_iters: 2,
            angle_deg: [5.0, 45.0],
            trans_frac: [0.0, 1.0],
            fixed_perturbations: false,
            train_ppn: true,
            train_marn: true,
            variants: vec![Variant::MultiAttention],
            ppn: PpnConfig::desk(1),
            marn: MarnConfig::desk(),
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "seed",
    "epochs",
    "batch",
    "lr",
    "lr_floor",
    "alpha",
    "beta",
    "gamma",
    "kappa",
    "lambda_obj",
    "lambda_noobj",
    "lambda_switch",
    "flow_freeze",
    "refine_iters",
    "angle_deg",
    "trans_frac",
    "fixed_perturbations",
    "train_ppn",
    "train_marn",
    "variants",
    "attention_maps",
    "flow",
    "crop",
    "embed",
    "dc_bound",
    "ppn_widths",
    "ppn_embed",
];

impl TrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(TRAIN_KEYS)?;
        let mut c = Self::default();
        kv.set("seed", &mut c.seed)?;
        kv.set("epochs", &mut c.epochs)?;
        kv.set("batch", &mut c.batch)?;
        kv.set("lr", &mut c.lr)?;
        kv.set("lr_floor", &mut c.lr_floor)?;
        kv.set("alpha", &mut c.weights.alpha)?;
        kv.set("beta", &mut c.weights.beta)?;
        kv.set("gamma", &mut c.weights.gamma)?;
        kv.set("kappa", &mut c.weights.kappa)?;
        kv.set("lambda_obj", &mut c.weights.lambda_obj)?;
        kv.set("lambda_noobj", &mut c.weights.lambda_noobj)?;
        if kv.get("lambda_switch").is_some() {
            let mut e = 0usize;
            kv.set("lambda_switch", &mut e)?;
            c.lambda_switch = Some(e);
        }
        kv.set("flow_freeze", &mut c.flow_freeze)?;
        kv.set("refine_iters", &mut c.refine_iters)?;
        kv.pair("angle_deg", &mut c.angle_deg)?;
        kv.pair("trans_frac", &mut c.trans_frac)?;
        kv.set_bool("fixed_perturbations", &mut c.fixed_perturbations)?;
        kv.set_bool("train_ppn", &mut c.train_ppn)?;
        kv.set_bool("train_marn", &mut c.train_marn)?;
        if let Some(v) = kv.list::<Variant>("variants")? {
            c.variants = v;
        }
        kv.set("attention_maps", &mut c.marn.attention_maps)?;
        kv.set("flow", &mut c.marn.flow)?;
        kv.set("crop", &mut c.marn.crop)?;
        kv.set("embed", &mut c.marn.embed)?;
        kv.set("dc_bound", &mut c.marn.dc_bound)?;
        if let Some(w) = kv.list::<usize>("ppn_widths")? {
            c.ppn.widths = w;
        }
        kv.set("ppn_embed", &mut c.ppn.embed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::Config(format!("train config: {why}")));
        if self.epochs == 0 || self.batch == 0 || self.refine_iters == 0 {
            return bad("epochs, batch and refine_iters must be at least 1");
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_floor) {
            return bad("learning rate must be positive and the floor within [0, 1]");
        }
        if self.train_marn && self.variants.is_empty() {
            return bad("no refinement variant to train");
        }
        let mut seen = self.variants.clone();
        seen.sort_by_key(|v| v.code());
        seen.dedup();
        if seen.len() != self.variants.len() {
            return bad("variants listed twice");
        }
        if !self.train_ppn && !self.train_marn {
            return bad("nothing to train");
        }
        self.weights.validate()?;
        self.marn.validate()
    }

    pub fn lambda_switch_epoch(&self) -> usize {
        self.lambda_switch.unwrap_or(self.epochs / 2)
    }

    /// Loss weights in force during `epoch`.
    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        if epoch >= self.lambda_switch_epoch() {
            self.weights.uniform_confidence()
        } else {
            self.weights
        }
    }

    /// Cosine-decayed learning rate for `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let x = epoch as f64 / self.epochs as f64;
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * 0.5 * (1.0 + (PI * x).cos()))
    }

    /// Proposal and refinement configs adapted to a dataset.
    fn configs_for(&self, data: &Dataset) -> Result<(PpnConfig, Vec<MarnConfig>)> {
        let size = data
            .samples
            .first()
            .map(|s| s.image.width)
            .ok_or_else(|| Error::Data("dataset has no images".into()))?;
        let mut ppn = self.ppn.clone();
        ppn.classes = data.classes();
        ppn.input_size = size;
        ppn.grid = size >> ppn.widths.len();
        ppn.validate()?;
        let marns = self
            .variants
            .iter()
            .map(|&v| MarnConfig { variant: v, ..self.marn.clone() })
            .collect();
        Ok((ppn, marns))
    }
}

/// Trained networks: the proposal network and one refinement network per
/// variant.
#[derive(Debug, Clone)]
pub struct PoseEstimator {
    pub ppn: Option<Ppn>,
    pub marns: Vec<Marn>,
}

impl PoseEstimator {
    /// The refinement network for `variant`, or the most complete one
    /// available when `None`.
    pub fn marn(&self, variant: Option<Variant>) -> Result<Option<&Marn>> {
        match variant {
            Some(v) => self
                .marns
                .iter()
                .find(|m| m.config.variant == v)
                .map(Some)
                .ok_or_else(|| Error::Config(format!("checkpoint has no {v} refinement network"))),
            None => Ok(self.marns.iter().max_by_key(|m| m.config.variant.code())),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        ck.metadata.insert("format".into(), "pose6d".into());
        if let Some(ppn) = &self.ppn {
            ck.metadata.insert("ppn.config".into(), serde_json::to_string(&ppn.config)?);
            for (name, net) in ppn.networks() {
                ck.networks.push((name.to_string(), net.clone()));
            }
        }
        let codes: Vec<&str> = self.marns.iter().map(|m| m.config.variant.code()).collect();
        ck.metadata.insert("marn.variants".into(), codes.join(","));
        for m in &self.marns {
            let v = m.config.variant.code();
            ck.metadata.insert(format!("{v}.config"), serde_json::to_string(&m.config)?);
            for (name, net) in m.networks() {
                ck.networks.push((format!("{v}/{name}"), net.clone()));
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("format")? != "pose6d" {
            return Err(Error::Data("not a pose estimator checkpoint".into()));
        }
        let ppn = match ck.metadata.get("ppn.config") {
            Some(cfg) => {
                let config: PpnConfig = serde_json::from_str(cfg)?;
                let names = ["ppn.backbone", "ppn.pass", "ppn.neck", "ppn.rotation", "ppn.translation", "ppn.confidence"];
                let nets = names.map(|n| ck.network(n).cloned());
                let [a, b, c, d, e, f] = nets;
                Some(Ppn::from_parts(config, [a?, b?, c?, d?, e?, f?])?)
            }
            None => None,
        };
        let mut marns = Vec::new();
        for code in ck.meta("marn.variants")?.split(',').filter(|s| !s.is_empty()) {
            let config: MarnConfig = serde_json::from_str(ck.meta(&format!("{code}.config"))?)?;
            let nets = NETWORK_NAMES.map(|n| ck.network(&format!("{code}/{n}")).cloned());
            let [a, b, c, d, e, f] = nets;
            marns.push(Marn::from_parts(config, [a?, b?, c?, d?, e?, f?])?);
        }
        Ok(Self { ppn, marns })
    }
}

/// One optimizer step of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lambda_obj: f64,
    pub l_pose: f64,
    pub l_conf: f64,
    pub l_ref: f64,
    pub l_orth: f64,
    pub total: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "epoch,step,lambda_obj,l_pose,l_conf,l_ref,l_orth,total";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.step, self.lambda_obj, self.l_pose, self.l_conf, self.l_ref, self.l_orth, self.total
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub estimator: PoseEstimator,
    pub log: Vec<LogRow>,
}

/// Starting pose for refinement training whose center stays in view.
fn perturbed_start<R: rand::Rng>(
    gt: &Pose,
    model: &ObjectModel,
    k: &CameraIntrinsics,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Option<Pose>> {
    for _ in 0..100 {
        let p = perturb_pose(gt, model, rng, cfg.angle_deg, cfg.trans_frac)?;
        if k.project(&p.translation).is_ok_and(|c| k.contains(&c)) {
            return Ok(Some(p));
        }
    }
    Ok(None)
}

const PERTURB_STREAM: u64 = 1;

/// One refinement start per annotated object; `None` where no in-view
/// perturbation was found.
fn draw_starts<R: rand::Rng>(cfg: &TrainConfig, data: &Dataset, rng: &mut R) -> Result<Vec<Vec<Option<Pose>>>> {
    data.samples
        .iter()
        .map(|s| {
            s.objects
                .iter()
                .map(|o| perturbed_start(&o.pose, data.model(o.class_id)?, &s.intrinsics, cfg, rng))
                .collect()
        })
        .collect()
}

/// The starting poses `train` uses throughout when `fixed_perturbations`
/// is set, indexed by sample then object.
pub fn fixed_perturbations(cfg: &TrainConfig, data: &Dataset) -> Result<Vec<Vec<Option<Pose>>>> {
    draw_starts(cfg, data, &mut item_rng(cfg.seed, PERTURB_STREAM))
}

/// Sum of refinement and orthogonality losses over the chained passes of
/// one example, and the number of passes run.
fn refine_example(
    marn: &mut Marn,
    data: &Dataset,
    sample: usize,
    object: usize,
    start: Pose,
    cfg: &TrainConfig,
    w: &LossWeights,
    train_flow: bool,
) -> Result<(f64, f64, usize)> {
    let s = &data.samples[sample];
    let gt = &s.objects[object];
    let model = data.model(gt.class_id)?;
    let (mut l_ref, mut l_orth, mut passes) = (0.0, 0.0, 0);
    let mut pose = start;
    for _ in 0..cfg.refine_iters {
        match marn.accumulate_gradients(&s.image, model, &pose, &gt.pose, &s.intrinsics, w, train_flow) {
            Ok(l) => {
                l_ref += l.refine;
                l_orth += l.orth;
                passes += 1;
                pose = l.refined;
            }
            Err(Error::OutOfView(_) | Error::BehindCamera(_) | Error::InvalidDepth(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok((l_ref, l_orth, passes))
}

/// Joint training of the proposal network and the refinement variants on
/// the weighted multi-task loss. `on_row` sees every log row as it is made.
pub fn train(cfg: &TrainConfig, data: &Dataset, mut on_row: impl FnMut(&LogRow) -> Result<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let (ppn_cfg, marn_cfgs) = cfg.configs_for(data)?;
    let mut ppn = if cfg.train_ppn {
        Some(Ppn::new(ppn_cfg, &mut item_rng(cfg.seed, 0))?)
    } else {
        None
    };
    let mut marns = if cfg.train_marn {
        marn_cfgs
            .into_iter()
            .enumerate()
            .map(|(i, c)| Marn::new(c, &mut item_rng(cfg.seed, 10 + i as u64)))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let mut ppn_adam = Adam::new(cfg.lr);
    let mut marn_adams: Vec<Adam> = marns.iter().map(|_| Adam::new(cfg.lr)).collect();

    let mut perturb_rng = item_rng(cfg.seed, PERTURB_STREAM);
    let mut order_rng = item_rng(cfg.seed, 2);
    let fixed = if cfg.fixed_perturbations && cfg.train_marn {
        Some(draw_starts(cfg, data, &mut perturb_rng)?)
    } else {
        None
    };

    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let w = cfg.weights_at(epoch);
        let lr = cfg.lr_at(epoch);
        ppn_adam.lr = lr;
        marn_adams.iter_mut().for_each(|a| a.lr = lr);
        let train_flow = epoch >= cfg.flow_freeze;
        order.shuffle(&mut order_rng);
        let starts = match (&fixed, cfg.train_marn) {
            (Some(f), _) => f.clone(),
            (None, true) => draw_starts(cfg, data, &mut perturb_rng)?,
            (None, false) => Vec::new(),
        };

        for batch in order.chunks(cfg.batch) {
            let mut parts = LossParts::default();
            if let Some(ppn) = ppn.as_mut() {
                ppn.zero_grad();
                for &i in batch {
                    let s = &data.samples[i];
                    let l = ppn.accumulate_gradients(&s.image, &s.objects, &data.models, &s.intrinsics, &w)?;
                    parts.pose += l.pose / batch.len() as f64;
                    parts.conf += l.conf / batch.len() as f64;
                }
                ppn_adam.step(&mut ppn.networks_mut());
            }
            let mut passes = 0;
            for (marn, adam) in marns.iter_mut().zip(&mut marn_adams) {
                marn.zero_grad();
                for &i in batch {
                    for (j, start) in starts[i].iter().enumerate() {
                        let Some(start) = start else { continue };
                        let (r, o, n) = refine_example(marn, data, i, j, *start, cfg, &w, train_flow)?;
                        parts.refine += r;
                        parts.orth += o;
                        passes += n;
                    }
                }
                adam.step(&mut marn.trainable_mut(train_flow));
            }
            if passes > 0 {
                parts.refine /= passes as f64;
                parts.orth /= passes as f64;
            }
            let (total, _) = loss_total(&parts, &w)?;
            let row = LogRow {
                epoch,
                step,
                lambda_obj: w.lambda_obj,
                l_pose: parts.pose,
                l_conf: parts.conf,
                l_ref: parts.refine,
                l_orth: parts.orth,
                total,
            };
            log::debug!("{}", row.to_csv());
            on_row(&row)?;
            log.push(row);
            step += 1;
        }
    }
    Ok(TrainOutcome {
        estimator: PoseEstimator { ppn, marns },
        log,
    })
}

/// Refinement networks of the oracle-flow kind need the ground truth at
/// inference; this reports whether any was trained.
pub fn uses_oracle_flow(est: &PoseEstimator) -> bool {
    est.marns
        .iter()
        .any(|m| m.config.flow == FlowSource::Oracle && m.config.variant.uses_flow())
}
