//! Pose proposal network: a convolutional encoder with a pass-through
//! branch feeding three per-cell decoders (rotation, translation,
//! confidence), followed by proposal decoding and duplicate removal.

mod nms;

pub use nms::nms_duplicates;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_cell_center, recover_translation, sigmoid, CameraIntrinsics, CellIndex, ObjectModel, Pose, Quaternion};
use crate::losses::{loss_conf, loss_pose, LossWeights};
use crate::renderer::{projected_bbox, BBox, RgbImage};
use crate::tensornet::ops::{concat_channels, split_channels};
use crate::tensornet::{LayerKind, Network, Tensor, Trace};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.3;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Raw rotation output to a unit quaternion. The scalar channel is biased by
/// one so that zero output means no rotation.
pub fn quat_from_raw(raw: [f64; 4]) -> Quaternion {
    Quaternion::new(raw[0] + 1.0, raw[1], raw[2], raw[3])
        .normalized()
        .unwrap_or(Quaternion::IDENTITY)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpnConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    /// Grid side `S`.
    pub grid: usize,
    pub classes: usize,
    /// Channels of each downsampling stage; one 2x pooling per stage.
    pub widths: Vec<usize>,
    /// Feature embedding size `d` seen by the decoders.
    pub embed: usize,
    pub head_hidden: usize,
}

impl PpnConfig {
    /// Small network for 104x104 inputs on a 13x13 grid.
    pub fn desk(classes: usize) -> Self {
        Self {
            input_size: 104,
            grid: 13,
            classes,
            widths: vec![8, 16, 32],
            embed: 128,
            head_hidden: 64,
        }
    }

    /// Full-size dimensions: 416x416 input, five stages, `d = 1024`.
    pub fn full(classes: usize) -> Self {
        Self {
            input_size: 416,
            grid: 13,
            classes,
            widths: vec![32, 64, 128, 256, 512],
            embed: 1024,
            head_hidden: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.grid == 0 || self.widths.is_empty() || self.embed == 0 || self.head_hidden == 0 {
            return Err(Error::Config(format!("degenerate proposal network config {self:?}")));
        }
        if self.grid << self.widths.len() != self.input_size {
            return Err(Error::Config(format!(
                "input {} is not grid {} times 2^{}",
                self.input_size,
                self.grid,
                self.widths.len()
            )));
        }
        Ok(())
    }

    pub fn cell_pixels(&self) -> f64 {
        self.input_size as f64 / self.grid as f64
    }
}

/// Raw decoder outputs, each `[channels, S, S]`: rotation `4C` (class-major),
/// translation `3C` (two center logits then depth), confidence `C` after the
/// sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct PpnOutput {
    pub rotation: Tensor,
    pub translation: Tensor,
    pub confidence: Tensor,
}

pub struct PpnTrace {
    backbone: Trace,
    pass: Trace,
    neck: Trace,
    heads: [Trace; 3],
}

#[derive(Debug, Clone)]
pub struct Ppn {
    pub config: PpnConfig,
    pub backbone: Network,
    pub pass_through: Network,
    pub neck: Network,
    pub rotation_head: Network,
    pub translation_head: Network,
    pub confidence_head: Network,
    fine_tap: usize,
}

impl Ppn {
    pub fn new<R: Rng>(config: PpnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n = config.input_size;
        let s = config.grid;
        let c = config.classes;
        let mut kinds = Vec::new();
        let mut prev = 3;
        let mut fine_after = 0;
        for (i, &w) in config.widths.iter().enumerate() {
            kinds.push(LayerKind::conv(prev, w, 3));
            kinds.push(LayerKind::Relu);
            if i + 1 == config.widths.len() {
                fine_after = kinds.len() - 1;
            }
            kinds.push(LayerKind::MaxPool2d { size: 2 });
            prev = w;
        }
        let deep = 2 * prev;
        kinds.extend([
            LayerKind::conv(prev, deep, 3),
            LayerKind::Relu,
            LayerKind::conv(deep, prev, 1),
            LayerKind::Relu,
            LayerKind::conv(prev, deep, 3),
            LayerKind::Relu,
        ]);
        let mut backbone = Network::new(&[3, n, n], &kinds, rng)?;
        let fine_tap = backbone.add_tap("fine", fine_after)?;
        let pass_through = Network::new(&[prev, 2 * s, 2 * s], &[LayerKind::MaxPool2d { size: 2 }], rng)?;
        let neck = Network::new(
            &[deep + prev, s, s],
            &[LayerKind::conv(deep + prev, config.embed, 1), LayerKind::Relu],
            rng,
        )?;
        let head = |out: usize, rng: &mut R, sig: bool| {
            let mut k = vec![
                LayerKind::conv(config.embed, config.head_hidden, 3),
                LayerKind::Relu,
                LayerKind::conv(config.head_hidden, out, 1),
            ];
            if sig {
                k.push(LayerKind::Sigmoid);
            }
            Network::new(&[config.embed, s, s], &k, rng)
        };
        let rotation_head = head(4 * c, rng, false)?;
        let translation_head = head(3 * c, rng, false)?;
        let confidence_head = head(c, rng, true)?;
        Ok(Self {
            config,
            backbone,
            pass_through,
            neck,
            rotation_head,
            translation_head,
            confidence_head,
            fine_tap,
        })
    }

    /// Reassembles a network from stored parts (checkpoint loading).
    pub fn from_parts(config: PpnConfig, nets: [Network; 6]) -> Result<Self> {
        config.validate()?;
        let [backbone, pass_through, neck, rotation_head, translation_head, confidence_head] = nets;
        let fine_tap = backbone
            .tap_index("fine")
            .ok_or_else(|| Error::Data("backbone lacks its fine-feature tap".into()))?;
        let n = config.input_size;
        if backbone.input_shape() != [3, n, n] || confidence_head.output_shape() != [config.classes, config.grid, config.grid] {
            return Err(Error::Data("stored proposal network does not match its config".into()));
        }
        Ok(Self {
            config,
            backbone,
            pass_through,
            neck,
            rotation_head,
            translation_head,
            confidence_head,
            fine_tap,
        })
    }

    pub fn networks(&self) -> [(&'static str, &Network); 6] {
        [
            ("ppn.backbone", &self.backbone),
            ("ppn.pass", &self.pass_through),
            ("ppn.neck", &self.neck),
            ("ppn.rotation", &self.rotation_head),
            ("ppn.translation", &self.translation_head),
            ("ppn.confidence", &self.confidence_head),
        ]
    }

    pub fn networks_mut(&mut self) -> [&mut Network; 6] {
        [
            &mut self.backbone,
            &mut self.pass_through,
            &mut self.neck,
            &mut self.rotation_head,
            &mut self.translation_head,
            &mut self.confidence_head,
        ]
    }

    /// The image as a planar input tensor; it must already have the
    /// configured size.
    pub fn input_tensor(&self, image: &RgbImage) -> Result<Tensor> {
        let n = self.config.input_size;
        if image.width != n || image.height != n {
            return Err(Error::Config(format!(
                "proposal network expects {n}x{n} images, got {}x{}",
                image.width, image.height
            )));
        }
        Tensor::from_vec(&[3, n, n], image.to_planar())
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<(PpnOutput, PpnTrace)> {
        let (deep, backbone) = self.backbone.forward_traced(x)?;
        let (pooled, pass) = self.pass_through.forward_traced(backbone.tap(self.fine_tap))?;
        let (features, neck) = self.neck.forward_traced(&concat_channels(&[&deep, &pooled])?)?;
        let (rotation, rt) = self.rotation_head.forward_traced(&features)?;
        let (translation, tt) = self.translation_head.forward_traced(&features)?;
        let (confidence, ct) = self.confidence_head.forward_traced(&features)?;
        Ok((
            PpnOutput {
                rotation,
                translation,
                confidence,
            },
            PpnTrace {
                backbone,
                pass,
                neck,
                heads: [rt, tt, ct],
            },
        ))
    }

    pub fn infer(&self, image: &RgbImage) -> Result<PpnOutput> {
        Ok(self.forward_traced(&self.input_tensor(image)?)?.0)
    }

    /// Accumulates parameter gradients for output gradients `g`.
    pub fn backward(&mut self, trace: &PpnTrace, g: &PpnOutput) -> Result<()> {
        let mut d_features = self.rotation_head.backward_traced(&trace.heads[0], &g.rotation, &[])?;
        d_features.add_assign(&self.translation_head.backward_traced(&trace.heads[1], &g.translation, &[])?)?;
        d_features.add_assign(&self.confidence_head.backward_traced(&trace.heads[2], &g.confidence, &[])?)?;
        let d_cat = self.neck.backward_traced(&trace.neck, &d_features, &[])?;
        let deep_ch = self.backbone.output_shape()[0];
        let parts = split_channels(&d_cat, &[deep_ch, d_cat.shape()[0] - deep_ch])?;
        let d_fine = self.pass_through.backward_traced(&trace.pass, &parts[1], &[])?;
        self.backbone
            .backward_traced(&trace.backbone, &parts[0], &[(self.fine_tap, &d_fine)])?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for n in self.networks_mut() {
            n.zero_grad();
        }
    }

    /// Runs the network and decodes every cell.
    pub fn ppn_forward(&self, image: &RgbImage) -> Result<GridProposals> {
        GridProposals::from_output(&self.infer(image)?, self.config.grid, self.config.classes)
    }

    /// One training example: forward, the weighted pose and confidence
    /// losses, and backward. Gradients accumulate; no update is applied.
    pub fn accumulate_gradients(
        &mut self,
        image: &RgbImage,
        gts: &[GroundTruth],
        models: &[ObjectModel],
        k: &CameraIntrinsics,
        w: &LossWeights,
    ) -> Result<PpnLosses> {
        let x = self.input_tensor(image)?;
        let (out, trace) = self.forward_traced(&x)?;
        let s = self.config.grid;
        let c = self.config.classes;
        let (target, _) = confidence_target(gts, k, s, c)?;
        let (l_conf, d_conf) = loss_conf(&target, &out.confidence, w)?;
        let mut grads = PpnOutput {
            rotation: Tensor::zeros(out.rotation.shape()),
            translation: Tensor::zeros(out.translation.shape()),
            confidence: d_conf.scaled(w.beta),
        };
        let mut l_pose = 0.0;
        let mut used = 0;
        let mut per_object = Vec::new();
        for gt in gts {
            let model = models
                .get(gt.class_id)
                .ok_or_else(|| Error::Data(format!("no model for class {}", gt.class_id)))?;
            let Ok(center) = k.project(&gt.pose.translation) else { continue };
            let Some(cell) = CellIndex::containing(&center, k.width, k.height, s) else { continue };
            let raw = CellRaw::read(&out, cell, gt.class_id);
            let decoded = raw.decode(cell, k)?;
            let l = loss_pose(&gt.pose, &decoded.pose, model, model.is_symmetric)?;
            per_object.push((cell, gt.class_id, raw, decoded, l));
            used += 1;
        }
        for (cell, class, raw, decoded, l) in per_object {
            l_pose += l.value / used as f64;
            let scale = w.alpha / used as f64;
            let d = decoded.backward(&raw, cell, &l.d_rotation, &l.d_translation, k)?;
            let (row, col) = (cell.row, cell.col);
            let plane = s * s;
            let at = row * s + col;
            for i in 0..4 {
                grads.rotation.data_mut()[(class * 4 + i) * plane + at] += scale * d.rotation[i];
            }
            for i in 0..3 {
                grads.translation.data_mut()[(class * 3 + i) * plane + at] += scale * d.translation[i];
            }
        }
        self.backward(&trace, &grads)?;
        Ok(PpnLosses { pose: l_pose, conf: l_conf })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpnLosses {
    pub pose: f64,
    pub conf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub pose: Pose,
}

/// Raw outputs of one (cell, class) slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellRaw {
    pub rotation: [f64; 4],
    pub center: [f64; 2],
    pub depth: f64,
}

/// Pose decoded from a [`CellRaw`] with the intermediates its backward needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellDecoded {
    pub pose: Pose,
    pub center: Vector2<f64>,
    pub tz: f64,
}

/// Gradients with respect to the raw outputs of one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellRawGrad {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl CellRaw {
    pub fn read(out: &PpnOutput, cell: CellIndex, class: usize) -> Self {
        let s = cell.size;
        let at = cell.row * s + cell.col;
        let plane = s * s;
        let r = out.rotation.data();
        let t = out.translation.data();
        Self {
            rotation: std::array::from_fn(|i| r[(class * 4 + i) * plane + at]),
            center: [t[(class * 3) * plane + at], t[(class * 3 + 1) * plane + at]],
            depth: t[(class * 3 + 2) * plane + at],
        }
    }

    pub fn decode(&self, cell: CellIndex, k: &CameraIntrinsics) -> Result<CellDecoded> {
        let center = decode_cell_center(self.center, cell, k.width, k.height);
        let tz = softplus(self.depth);
        let translation = recover_translation(center, tz, k)?;
        Ok(CellDecoded {
            pose: Pose {
                rotation: quat_from_raw(self.rotation),
                translation,
            },
            center,
            tz,
        })
    }
}

impl CellDecoded {
    /// Chain rule from pose gradients back to the raw slot outputs.
    pub fn backward(
        &self,
        raw: &CellRaw,
        cell: CellIndex,
        d_rotation: &Matrix3<f64>,
        d_translation: &Vector3<f64>,
        k: &CameraIntrinsics,
    ) -> Result<CellRawGrad> {
        let biased = Quaternion::new(raw.rotation[0] + 1.0, raw.rotation[1], raw.rotation[2], raw.rotation[3]);
        let rotation = crate::geometry::quat_to_rotmat_backward(biased, d_rotation)?;
        let g = d_translation;
        let d_cx = g.x * self.tz / k.fx;
        let d_cy = g.y * self.tz / k.fy;
        let d_tz = g.z + g.x * (self.center.x - k.px) / k.fx + g.y * (self.center.y - k.py) / k.fy;
        let ds = |v: f64| {
            let y = sigmoid(v);
            y * (1.0 - y)
        };
        let s = cell.size as f64;
        Ok(CellRawGrad {
            rotation,
            translation: [
                d_cx * ds(raw.center[0]) * k.width as f64 / s,
                d_cy * ds(raw.center[1]) * k.height as f64 / s,
                d_tz * sigmoid(raw.depth),
            ],
        })
    }
}

/// Decoded per-cell proposals, indexed `[row][col][class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridProposals {
    pub size: usize,
    pub classes: usize,
    pub conf: Vec<f64>,
    pub quat: Vec<Quaternion>,
    pub center_raw: Vec<[f64; 2]>,
    pub tz: Vec<f64>,
}

impl GridProposals {
    pub fn filled(size: usize, classes: usize) -> Self {
        let n = size * size * classes;
        Self {
            size,
            classes,
            conf: vec![0.0; n],
            quat: vec![Quaternion::IDENTITY; n],
            center_raw: vec![[0.0; 2]; n],
            tz: vec![1.0; n],
        }
    }

    pub fn index(&self, row: usize, col: usize, class: usize) -> usize {
        (row * self.size + col) * self.classes + class
    }

    pub fn from_output(out: &PpnOutput, size: usize, classes: usize) -> Result<Self> {
        out.rotation.expect_shape(&[4 * classes, size, size])?;
        out.translation.expect_shape(&[3 * classes, size, size])?;
        out.confidence.expect_shape(&[classes, size, size])?;
        let mut g = Self::filled(size, classes);
        for row in 0..size {
            for col in 0..size {
                let cell = CellIndex { row, col, size };
                for class in 0..classes {
                    let raw = CellRaw::read(out, cell, class);
                    let i = g.index(row, col, class);
                    g.conf[i] = out.confidence.data()[(class * size + row) * size + col];
                    g.quat[i] = quat_from_raw(raw.rotation);
                    g.center_raw[i] = raw.center;
                    g.tz[i] = softplus(raw.depth);
                }
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub pose: Pose,
    pub confidence: f64,
    pub cell: CellIndex,
    pub bbox: BBox,
}

/// One detection as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub class: usize,
    pub quat: [f64; 4],
    pub t: [f64; 3],
    pub conf: f64,
    pub cell: [usize; 2],
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            class: d.class_id,
            quat: d.pose.rotation.to_array(),
            t: [d.pose.translation.x, d.pose.translation.y, d.pose.translation.z],
            conf: d.confidence,
            cell: [d.cell.row, d.cell.col],
        }
    }
}

impl DetectionRecord {
    pub fn pose(&self) -> Result<Pose> {
        Pose::new(Quaternion::from_array(self.quat), Vector3::from(self.t))
    }
}

pub fn detections_to_jsonl(dets: &[Detection]) -> Result<String> {
    let mut out = String::new();
    for d in dets {
        out.push_str(&serde_json::to_string(&DetectionRecord::from(d))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn detections_from_jsonl(text: &str) -> Result<Vec<DetectionRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Detections for every (cell, class) slot whose confidence reaches
/// `threshold`. Also returns how many such slots were dropped because their
/// pose could not be formed (non-positive depth, object behind the camera).
pub fn decode_proposals(
    grids: &GridProposals,
    k: &CameraIntrinsics,
    models: &[ObjectModel],
    threshold: f64,
) -> Result<(Vec<Detection>, usize)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("confidence threshold {threshold} outside [0, 1]")));
    }
    if models.len() < grids.classes {
        return Err(Error::Config(format!("{} models for {} classes", models.len(), grids.classes)));
    }
    let mut dets = Vec::new();
    let mut dropped = 0;
    for row in 0..grids.size {
        for col in 0..grids.size {
            let cell = CellIndex { row, col, size: grids.size };
            for class in 0..grids.classes {
                let i = grids.index(row, col, class);
                if grids.conf[i] < threshold {
                    continue;
                }
                let tz = grids.tz[i];
                if !(tz > 0.0) {
                    log::warn!("dropping proposal at cell ({row}, {col}) class {class}: depth {tz}");
                    dropped += 1;
                    continue;
                }
                let center = decode_cell_center(grids.center_raw[i], cell, k.width, k.height);
                let pose = Pose {
                    rotation: grids.quat[i],
                    translation: recover_translation(center, tz, k)?,
                };
                match projected_bbox(&models[class], &pose, k, 0.0) {
                    Ok(bbox) => dets.push(Detection {
                        class_id: class,
                        pose,
                        confidence: grids.conf[i],
                        cell,
                        bbox,
                    }),
                    Err(e) => {
                        log::warn!("dropping proposal at cell ({row}, {col}) class {class}: {e}");
                        dropped += 1;
                    }
                }
            }
        }
    }
    Ok((dets, dropped))
}

/// Binary `[C, S, S]` map with a one in the cell holding each object's
/// projected center. Objects projecting outside the image are skipped and
/// counted.
pub fn confidence_target(
    gts: &[GroundTruth],
    k: &CameraIntrinsics,
    size: usize,
    classes: usize,
) -> Result<(Tensor, usize)> {
    let mut t = Tensor::zeros(&[classes, size, size]);
    let mut skipped = 0;
    for gt in gts {
        if gt.class_id >= classes {
            return Err(Error::Data(format!("class {} outside 0..{classes}", gt.class_id)));
        }
        let cell = k
            .project(&gt.pose.translation)
            .ok()
            .and_then(|c| CellIndex::containing(&c, k.width, k.height, size));
        match cell {
            Some(cell) => t.data_mut()[(gt.class_id * size + cell.row) * size + cell.col] = 1.0,
            None => {
                log::warn!("object of class {} projects outside the image; no target cell", gt.class_id);
                skipped += 1;
            }
        }
    }
    Ok((t, skipped))
}
