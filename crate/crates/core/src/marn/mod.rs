//! Refinement network: shared visual embedding of the image and render
//! crops, flow-based warping, spatial multi-attention, and a residual pose
//! head applied iteratively.

mod oracle;
mod refine;

pub use oracle::oracle_flow;
pub use refine::{refine_trace_to_jsonl, RefineRecord, Refinement};

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose_refinement, quat_to_rotmat_backward, CameraIntrinsics, ObjectModel, Pose, Quaternion};
use crate::losses::{loss_orth, loss_pose, LossWeights};
use crate::ppn::quat_from_raw;
use crate::renderer::{make_input_crops, CropPair, RgbImage};
use crate::tensornet::ops::{
    bilinear_warp, bilinear_warp_backward, broadcast_mul, broadcast_mul_backward, concat_channels, resize_bilinear,
    resize_bilinear_backward, spatial_softmax, spatial_softmax_backward, split_channels,
};
use crate::tensornet::{LayerKind, Network, Tensor, Trace};

/// Which parts of the feature pipeline feed the residual head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Image and render embeddings only.
    VisualOnly,
    /// Flow-augmented image features next to warped render features.
    Flow,
    /// Flow plus one attention map.
    SingleAttention,
    /// Flow plus `N` attention maps.
    MultiAttention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::VisualOnly,
        Variant::Flow,
        Variant::SingleAttention,
        Variant::MultiAttention,
    ];

    pub fn uses_flow(self) -> bool {
        self != Variant::VisualOnly
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Variant::SingleAttention | Variant::MultiAttention)
    }

    pub fn code(self) -> &'static str {
        match self {
            Variant::VisualOnly => "v1",
            Variant::Flow => "v2",
            Variant::SingleAttention => "v3",
            Variant::MultiAttention => "v4",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.code() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}, expected v1..v4")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowSource {
    /// Exact correspondences from the ground-truth pose; needs it at run time.
    Oracle,
    /// Learned encoder-decoder on the stacked crops.
    Network,
}

impl FromStr for FlowSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(FlowSource::Oracle),
            "network" => Ok(FlowSource::Network),
            _ => Err(Error::Config(format!("unknown flow source {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarnConfig {
    /// Square crop side; must be divisible by 2^(encoder stages) and by 8.
    pub crop: usize,
    /// Embedding channels `d_em`.
    pub embed: usize,
    /// Encoder stage widths, one 2x pooling each; the decoder mirrors them.
    pub widths: Vec<usize>,
    /// Attention maps `N` of the multi-attention variant.
    pub attention_maps: usize,
    pub attention_hidden: usize,
    /// Channels of the three stride-2 reduction convolutions.
    pub reduce: [usize; 3],
    pub fc_hidden: usize,
    pub head_hidden: usize,
    /// `dc` saturates smoothly at this many pixels.
    pub dc_bound: f64,
    /// Meters per unit of the raw depth output.
    pub depth_unit: f64,
    /// Padding of the box outside which the image crop is blanked.
    pub bbox_pad: f64,
    pub variant: Variant,
    pub flow: FlowSource,
}

impl MarnConfig {
    pub fn desk() -> Self {
        Self {
            crop: 48,
            embed: 8,
            widths: vec![8, 16, 16, 16],
            attention_maps: 4,
            attention_hidden: 16,
            reduce: [16, 16, 8],
            fc_hidden: 64,
            head_hidden: 32,
            dc_bound: 64.0,
            depth_unit: 0.01,
            bbox_pad: 4.0,
            variant: Variant::MultiAttention,
            flow: FlowSource::Oracle,
        }
    }

    /// Full-size dimensions (`d_em = 32`).
    pub fn full() -> Self {
        Self {
            crop: 128,
            embed: 32,
            widths: vec![32, 64, 128, 256],
            attention_hidden: 64,
            reduce: [64, 32, 8],
            fc_hidden: 256,
            head_hidden: 128,
            flow: FlowSource::Network,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::Config(format!("refinement config: {why}")));
        if self.embed == 0 || self.widths.is_empty() || self.attention_maps == 0 || self.attention_hidden == 0 {
            return bad("zero-sized layer".into());
        }
        if self.fc_hidden == 0 || self.head_hidden == 0 || self.reduce.contains(&0) {
            return bad("zero-sized head".into());
        }
        if self.crop == 0 || self.crop % (1 << self.widths.len()) != 0 || self.crop % 8 != 0 {
            return bad(format!("crop {} must be divisible by 8 and 2^{}", self.crop, self.widths.len()));
        }
        if !(self.dc_bound > 0.0) || !(self.depth_unit > 0.0) || !(self.bbox_pad >= 0.0) {
            return bad("dc bound and depth unit must be positive, padding nonnegative".into());
        }
        Ok(())
    }

    /// Attention maps actually used by the configured variant.
    pub fn maps(&self) -> usize {
        match self.variant {
            Variant::SingleAttention => 1,
            _ => self.attention_maps,
        }
    }

    pub fn decode(&self, out: &MarnOutput) -> ResidualPose {
        ResidualPose::from_raw(out.rotation, out.translation, self.dc_bound, self.depth_unit)
    }

    /// Channels entering the residual head.
    pub fn head_channels(&self) -> usize {
        let d = self.embed;
        match self.variant {
            Variant::VisualOnly => 2 * d,
            Variant::Flow => 2 * d + 2,
            _ => (d + 2) * self.maps(),
        }
    }
}

/// Relative pose correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualPose {
    pub dq: Quaternion,
    pub dc: Vector2<f64>,
    pub dtz: f64,
}

impl ResidualPose {
    pub const IDENTITY: ResidualPose = ResidualPose {
        dq: Quaternion::IDENTITY,
        dc: Vector2::new(0.0, 0.0),
        dtz: 0.0,
    };

    /// Decodes the raw head outputs: the rotation is identity-biased and
    /// normalized, the center shift is `bound * tanh(u / bound)` and the
    /// depth shift is the raw value in units of `depth_unit` meters.
    pub fn from_raw(rotation: [f64; 4], translation: [f64; 3], dc_bound: f64, depth_unit: f64) -> Self {
        Self {
            dq: quat_from_raw(rotation),
            dc: Vector2::new(
                dc_bound * (translation[0] / dc_bound).tanh(),
                dc_bound * (translation[1] / dc_bound).tanh(),
            ),
            dtz: translation[2] * depth_unit,
        }
    }

    pub fn apply(&self, pose: &Pose, k: &CameraIntrinsics) -> Result<Pose> {
        compose_refinement(pose, self.dq, self.dc, self.dtz, k)
    }
}

/// Raw outputs of the residual head and the intermediates callers inspect.
#[derive(Debug, Clone, PartialEq)]
pub struct MarnOutput {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    /// `[N, H, W]` attention maps of the attention variants.
    pub attention: Option<Tensor>,
    pub flow: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub f_im: Tensor,
    pub f_r: Tensor,
    pub flow: Option<Tensor>,
}

pub struct MarnTrace {
    im: Trace,
    render: Trace,
    flow_net: Option<Trace>,
    features: Features,
    f_im_plus: Option<Tensor>,
    attention: Option<(Tensor, Trace)>,
    reduce: Trace,
    rotation: Trace,
    translation: Trace,
}

/// Losses of one refinement training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarnLosses {
    pub refine: f64,
    pub orth: f64,
    pub refined: Pose,
}

#[derive(Debug, Clone)]
pub struct Marn {
    pub config: MarnConfig,
    pub embedding: Network,
    pub flow_net: Network,
    pub attention: Network,
    pub reduce: Network,
    pub rotation_head: Network,
    pub translation_head: Network,
}

pub const NETWORK_NAMES: [&str; 6] = [
    "marn.embedding",
    "marn.flow",
    "marn.attention",
    "marn.reduce",
    "marn.rotation",
    "marn.translation",
];

/// Output layers start this small so that a fresh network barely moves the pose.
const HEAD_INIT_SCALE: f64 = 0.01;

/// Spatial support of the fused features seen by the residual head.
pub fn fuse_features(f_im: &Tensor, f_r: &Tensor, flow: &Tensor) -> Result<(Tensor, Tensor)> {
    f_im.expect_shape(f_r.shape())?;
    Ok((bilinear_warp(f_r, flow)?, concat_channels(&[f_im, flow])?))
}

/// Each attention map replicated over the channels of `f_im_plus` and
/// multiplied in; the weighted copies are stacked along channels.
pub fn attend(f_im_plus: &Tensor, attention: &Tensor) -> Result<Tensor> {
    let (n, h, w) = attention.dims3()?;
    let maps = split_channels(attention, &vec![1; n])?;
    let parts = maps
        .iter()
        .map(|a| broadcast_mul(f_im_plus, a))
        .collect::<Result<Vec<_>>>()?;
    let out = concat_channels(&parts.iter().collect::<Vec<_>>())?;
    debug_assert_eq!(out.shape()[1..], [h, w]);
    Ok(out)
}

fn crop_tensor(img: &RgbImage) -> Result<Tensor> {
    Tensor::from_vec(&[3, img.height, img.width], img.to_planar())
}

fn shrink_last(net: &mut Network) {
    if let Some(layer) = net.layers_mut().iter_mut().rev().find(|l| l.weight.is_some()) {
        for p in layer.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v *= HEAD_INIT_SCALE);
        }
    }
}

impl Marn {
    pub fn new<R: Rng>(config: MarnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n = config.crop;
        let d = config.embed;

        let mut kinds = Vec::new();
        let mut prev = 3;
        for &w in &config.widths {
            kinds.extend([LayerKind::conv(prev, w, 3), LayerKind::Relu, LayerKind::MaxPool2d { size: 2 }]);
            prev = w;
        }
        for (i, &w) in config.widths.iter().rev().enumerate() {
            let last = i + 1 == config.widths.len();
            let out = if last { d } else { w };
            kinds.extend([LayerKind::Upsample2x, LayerKind::conv(prev, out, 3)]);
            if !last {
                kinds.push(LayerKind::Relu);
            }
            prev = out;
        }
        let embedding = Network::new(&[3, n, n], &kinds, rng)?;

        let flow_net = Network::new(
            &[6, n, n],
            &[
                LayerKind::conv(6, 16, 3),
                LayerKind::Relu,
                LayerKind::MaxPool2d { size: 2 },
                LayerKind::conv(16, 32, 3),
                LayerKind::Relu,
                LayerKind::MaxPool2d { size: 2 },
                LayerKind::conv(32, 32, 3),
                LayerKind::Relu,
                LayerKind::conv(32, 2, 3),
            ],
            rng,
        )?;

        let attention = Network::new(
            &[d, n, n],
            &[
                LayerKind::conv(d, config.attention_hidden, 1),
                LayerKind::Relu,
                LayerKind::conv(config.attention_hidden, config.maps(), 1),
            ],
            rng,
        )?;

        let [c1, c2, c3] = config.reduce;
        let side = n / 8;
        let reduce = Network::new(
            &[config.head_channels(), n, n],
            &[
                LayerKind::conv_strided(config.head_channels(), c1, 3, 2),
                LayerKind::Relu,
                LayerKind::conv_strided(c1, c2, 3, 2),
                LayerKind::Relu,
                LayerKind::conv_strided(c2, c3, 3, 2),
                LayerKind::Relu,
                LayerKind::fc(c3 * side * side, config.fc_hidden),
                LayerKind::Relu,
            ],
            rng,
        )?;
        let head = |out: usize, rng: &mut R| -> Result<Network> {
            let mut net = Network::new(
                &[config.fc_hidden],
                &[
                    LayerKind::fc(config.fc_hidden, config.head_hidden),
                    LayerKind::Relu,
                    LayerKind::fc(config.head_hidden, out),
                ],
                rng,
            )?;
            shrink_last(&mut net);
            Ok(net)
        };
        let rotation_head = head(4, rng)?;
        let translation_head = head(3, rng)?;
        Ok(Self {
            config,
            embedding,
            flow_net,
            attention,
            reduce,
            rotation_head,
            translation_head,
        })
    }

    pub fn from_parts(config: MarnConfig, nets: [Network; 6]) -> Result<Self> {
        config.validate()?;
        let [embedding, flow_net, attention, reduce, rotation_head, translation_head] = nets;
        let n = config.crop;
        if embedding.input_shape() != [3, n, n]
            || embedding.output_shape() != [config.embed, n, n]
            || reduce.input_shape() != [config.head_channels(), n, n]
            || attention.output_shape() != [config.maps(), n, n]
        {
            return Err(Error::Data("stored refinement network does not match its config".into()));
        }
        Ok(Self {
            config,
            embedding,
            flow_net,
            attention,
            reduce,
            rotation_head,
            translation_head,
        })
    }

    pub fn networks(&self) -> [(&'static str, &Network); 6] {
        [
            (NETWORK_NAMES[0], &self.embedding),
            (NETWORK_NAMES[1], &self.flow_net),
            (NETWORK_NAMES[2], &self.attention),
            (NETWORK_NAMES[3], &self.reduce),
            (NETWORK_NAMES[4], &self.rotation_head),
            (NETWORK_NAMES[5], &self.translation_head),
        ]
    }

    pub fn networks_mut(&mut self) -> [&mut Network; 6] {
        [
            &mut self.embedding,
            &mut self.flow_net,
            &mut self.attention,
            &mut self.reduce,
            &mut self.rotation_head,
            &mut self.translation_head,
        ]
    }

    /// Networks whose parameters the optimizer should update; the flow
    /// network is left out while frozen.
    pub fn trainable_mut(&mut self, train_flow: bool) -> Vec<&mut Network> {
        let flow = train_flow && self.config.flow == FlowSource::Network && self.config.variant.uses_flow();
        self.networks_mut()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i != 1 || flow)
            .map(|(_, n)| n)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for n in self.networks_mut() {
            n.zero_grad();
        }
    }

    fn check_crops(&self, crops: &CropPair) -> Result<()> {
        let n = self.config.crop;
        if crops.width() != n || crops.height() != n || crops.render_crop.width != n || crops.render_crop.height != n {
            return Err(Error::Config(format!(
                "refinement network expects {n}x{n} crops, got {}x{}",
                crops.width(),
                crops.height()
            )));
        }
        Ok(())
    }

    fn flow_traced(&self, x_im: &Tensor, x_r: &Tensor, oracle: Option<&Tensor>) -> Result<(Tensor, Option<Trace>)> {
        let n = self.config.crop;
        match self.config.flow {
            FlowSource::Oracle => {
                let flow = oracle.ok_or_else(|| {
                    Error::Config("oracle flow needs the ground-truth pose; use the network flow source".into())
                })?;
                flow.expect_shape(&[2, n, n])?;
                Ok((flow.clone(), None))
            }
            FlowSource::Network => {
                let (coarse, trace) = self.flow_net.forward_traced(&concat_channels(&[x_r, x_im])?)?;
                Ok((resize_bilinear(&coarse, n, n)?, Some(trace)))
            }
        }
    }

    /// Shared embedding of both crops plus the render-to-image flow (absent
    /// for the visual-only variant).
    pub fn extract_features(&self, crops: &CropPair, oracle: Option<&Tensor>) -> Result<Features> {
        Ok(self.extract_traced(crops, oracle)?.0)
    }

    fn extract_traced(&self, crops: &CropPair, oracle: Option<&Tensor>) -> Result<(Features, Trace, Trace, Option<Trace>)> {
        self.check_crops(crops)?;
        let x_im = crop_tensor(&crops.image_crop)?;
        let x_r = crop_tensor(&crops.render_crop)?;
        let (f_im, im) = self.embedding.forward_traced(&x_im)?;
        let (f_r, render) = self.embedding.forward_traced(&x_r)?;
        let (flow, flow_trace) = if self.config.variant.uses_flow() {
            let (f, t) = self.flow_traced(&x_im, &x_r, oracle)?;
            (Some(f), t)
        } else {
            (None, None)
        };
        Ok((Features { f_im, f_r, flow }, im, render, flow_trace))
    }

    /// Spatial softmax of the attention scores computed from `f_w`.
    pub fn attention_maps(&self, f_w: &Tensor) -> Result<Tensor> {
        spatial_softmax(&self.attention.infer(f_w)?)
    }

    /// Raw rotation and translation outputs for head input `f_bar`.
    pub fn residual_head(&self, f_bar: &Tensor) -> Result<ResidualPose> {
        let h = self.reduce.infer(f_bar)?;
        let r = self.rotation_head.infer(&h)?;
        let t = self.translation_head.infer(&h)?;
        let r: [f64; 4] = r.data().try_into().map_err(|_| Error::Config("rotation head must output 4".into()))?;
        let t: [f64; 3] = t.data().try_into().map_err(|_| Error::Config("translation head must output 3".into()))?;
        Ok(ResidualPose::from_raw(r, t, self.config.dc_bound, self.config.depth_unit))
    }

    /// Full pass from a crop pair to raw residual outputs. `oracle` is the
    /// flow to use in oracle mode.
    pub fn forward_traced(&self, crops: &CropPair, oracle: Option<&Tensor>) -> Result<(MarnOutput, MarnTrace)> {
        let (features, im, render, flow_net) = self.extract_traced(crops, oracle)?;
        let mut f_im_plus = None;
        let mut attention = None;
        let f_bar = match (&features.flow, self.config.variant) {
            (None, _) => concat_channels(&[&features.f_im, &features.f_r])?,
            (Some(flow), Variant::Flow) => {
                let (f_w, plus) = fuse_features(&features.f_im, &features.f_r, flow)?;
                let out = concat_channels(&[&plus, &f_w])?;
                f_im_plus = Some(plus);
                out
            }
            (Some(flow), _) => {
                let (f_w, plus) = fuse_features(&features.f_im, &features.f_r, flow)?;
                let (scores, trace) = self.attention.forward_traced(&f_w)?;
                let a = spatial_softmax(&scores)?;
                // maps sum to one; rescale so uniform attention passes the
                // features through at their own magnitude
                let hw = (self.config.crop * self.config.crop) as f64;
                let out = attend(&plus, &a)?.scaled(hw);
                f_im_plus = Some(plus);
                attention = Some((a, trace));
                out
            }
        };
        let (h, reduce) = self.reduce.forward_traced(&f_bar)?;
        let (r, rotation) = self.rotation_head.forward_traced(&h)?;
        let (t, translation) = self.translation_head.forward_traced(&h)?;
        let out = MarnOutput {
            rotation: std::array::from_fn(|i| r.data()[i]),
            translation: std::array::from_fn(|i| t.data()[i]),
            attention: attention.as_ref().map(|(a, _)| a.clone()),
            flow: features.flow.clone(),
        };
        Ok((
            out,
            MarnTrace {
                im,
                render,
                flow_net,
                features,
                f_im_plus,
                attention,
                reduce,
                rotation,
                translation,
            },
        ))
    }

    pub fn infer(&self, crops: &CropPair, oracle: Option<&Tensor>) -> Result<MarnOutput> {
        Ok(self.forward_traced(crops, oracle)?.0)
    }

    /// Accumulates parameter gradients given gradients of the raw outputs
    /// and, for attention variants, of the attention maps themselves.
    pub fn backward(
        &mut self,
        trace: &MarnTrace,
        d_rotation: [f64; 4],
        d_translation: [f64; 3],
        d_attention: Option<&Tensor>,
        train_flow: bool,
    ) -> Result<()> {
        let mut dh = self
            .rotation_head
            .backward_traced(&trace.rotation, &Tensor::from_vec(&[4], d_rotation.to_vec())?, &[])?;
        dh.add_assign(&self.translation_head.backward_traced(
            &trace.translation,
            &Tensor::from_vec(&[3], d_translation.to_vec())?,
            &[],
        )?)?;
        let d_bar = self.reduce.backward_traced(&trace.reduce, &dh, &[])?;
        let d = self.config.embed;
        let f = &trace.features;

        let (d_im, d_r, d_flow) = match (&f.flow, self.config.variant) {
            (None, _) => {
                let p = split_channels(&d_bar, &[d, d])?;
                (p[0].clone(), p[1].clone(), None)
            }
            (Some(flow), variant) => {
                let plus = trace.f_im_plus.as_ref().expect("flow variants keep F_im+");
                let (d_plus, d_w) = if variant == Variant::Flow {
                    let p = split_channels(&d_bar, &[d + 2, d])?;
                    (p[0].clone(), p[1].clone())
                } else {
                    let (a, att_trace) = trace.attention.as_ref().expect("attention variants keep maps");
                    let n = a.shape()[0];
                    let hw = (self.config.crop * self.config.crop) as f64;
                    let maps = split_channels(a, &vec![1; n])?;
                    let parts = split_channels(&d_bar, &vec![d + 2; n])?;
                    let mut d_plus = Tensor::zeros(plus.shape());
                    let mut d_a = Vec::with_capacity(n * a.shape()[1] * a.shape()[2]);
                    for (m, g) in maps.iter().zip(&parts) {
                        let (df, da) = broadcast_mul_backward(plus, m, &g.scaled(hw))?;
                        d_plus.add_assign(&df)?;
                        d_a.extend_from_slice(da.data());
                    }
                    let mut d_a = Tensor::from_vec(a.shape(), d_a)?;
                    if let Some(extra) = d_attention {
                        d_a.add_assign(extra)?;
                    }
                    let d_scores = spatial_softmax_backward(a, &d_a)?;
                    let d_w = self.attention.backward_traced(att_trace, &d_scores, &[])?;
                    (d_plus, d_w)
                };
                let p = split_channels(&d_plus, &[d, 2])?;
                let (d_r, mut d_flow) = bilinear_warp_backward(&f.f_r, flow, &d_w)?;
                d_flow.add_assign(&p[1])?;
                (p[0].clone(), d_r, Some(d_flow))
            }
        };

        if let (Some(d_flow), Some(flow_trace)) = (d_flow, &trace.flow_net) {
            if train_flow {
                let coarse = self.flow_net.output_shape().to_vec();
                let d_coarse = resize_bilinear_backward(&coarse, &d_flow)?;
                self.flow_net.backward_traced(flow_trace, &d_coarse, &[])?;
            }
        }
        self.embedding.backward_traced(&trace.im, &d_im, &[])?;
        self.embedding.backward_traced(&trace.render, &d_r, &[])?;
        Ok(())
    }

    /// Crops around `pose` and, in oracle mode, the exact flow towards `gt`.
    pub fn prepare(
        &self,
        image: &RgbImage,
        model: &ObjectModel,
        pose: &Pose,
        k: &CameraIntrinsics,
        gt: Option<&Pose>,
    ) -> Result<(CropPair, Option<Tensor>)> {
        let n = self.config.crop;
        let crops = make_input_crops(image, model, pose, k, n, n, self.config.bbox_pad)?;
        let flow = match (self.config.flow, self.config.variant.uses_flow(), gt) {
            (FlowSource::Oracle, true, Some(gt)) => Some(oracle_flow(model, pose, gt, &crops.intrinsics)?),
            (FlowSource::Oracle, true, None) => {
                return Err(Error::Config(
                    "oracle flow needs the ground-truth pose; use the network flow source".into(),
                ))
            }
            _ => None,
        };
        Ok((crops, flow))
    }

    /// One training example: refine `start` once, score it against `gt`
    /// (plus the attention orthogonality term) and backpropagate.
    /// Gradients accumulate; no update is applied.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_gradients(
        &mut self,
        image: &RgbImage,
        model: &ObjectModel,
        start: &Pose,
        gt: &Pose,
        k: &CameraIntrinsics,
        w: &LossWeights,
        train_flow: bool,
    ) -> Result<MarnLosses> {
        let (crops, flow) = self.prepare(image, model, start, k, Some(gt))?;
        let (out, trace) = self.forward_traced(&crops, flow.as_ref())?;
        let residual = self.config.decode(&out);
        let refined = residual.apply(start, k)?;
        let l = loss_pose(gt, &refined, model, model.is_symmetric)?;
        let (d_r, d_t) = residual_backward(start, &out, &self.config, k, &l.d_rotation, &l.d_translation)?;
        let scale = |a: &mut [f64]| a.iter_mut().for_each(|v| *v *= w.gamma);
        let (mut d_r, mut d_t) = (d_r, d_t);
        scale(&mut d_r);
        scale(&mut d_t);

        let mut orth = 0.0;
        let mut d_att = None;
        if let Some(a) = &out.attention {
            let n = a.shape()[0];
            let maps = split_channels(a, &vec![1; n])?;
            let (value, grads) = loss_orth(&maps)?;
            orth = value;
            let data: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().map(|v| v * w.kappa)).collect();
            d_att = Some(Tensor::from_vec(a.shape(), data)?);
        }
        self.backward(&trace, d_r, d_t, d_att.as_ref(), train_flow)?;
        Ok(MarnLosses {
            refine: l.value,
            orth,
            refined,
        })
    }
}

/// Chain rule from the refined pose's gradients back to the raw head
/// outputs, through [`compose_refinement`].
pub fn residual_backward(
    start: &Pose,
    out: &MarnOutput,
    cfg: &MarnConfig,
    k: &CameraIntrinsics,
    d_rotation: &Matrix3<f64>,
    d_translation: &nalgebra::Vector3<f64>,
) -> Result<([f64; 4], [f64; 3])> {
    let r = out.rotation;
    let raw_q = Quaternion::new(r[0] + 1.0, r[1], r[2], r[3]);
    // R' = R(dq) R, so dL/dR(dq) = dL/dR' R^T
    let d_dq = d_rotation * start.rotation_matrix().transpose();
    let d_rot = quat_to_rotmat_backward(raw_q, &d_dq)?;

    let res = cfg.decode(out);
    let dc_bound = cfg.dc_bound;
    let c = k.project(&start.translation)? + res.dc;
    let tz = start.translation.z + res.dtz;
    let g = d_translation;
    let d_cx = g.x * tz / k.fx;
    let d_cy = g.y * tz / k.fy;
    let d_tz = g.z + g.x * (c.x - k.px) / k.fx + g.y * (c.y - k.py) / k.fy;
    let sech2 = |u: f64| 1.0 - (u / dc_bound).tanh().powi(2);
    let u = out.translation;
    Ok((d_rot, [d_cx * sech2(u[0]), d_cy * sech2(u[1]), d_tz * cfg.depth_unit]))
}
