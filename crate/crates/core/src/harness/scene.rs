use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::KeyValues;
use crate::error::{Error, Result};
use crate::geometry::shapes::{build, ShapeKind};
use crate::geometry::{recover_translation, CameraIntrinsics, ObjectModel, Pose, Quaternion};
use crate::ppn::GroundTruth;
use crate::renderer::{RenderOutput, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Background {
    Flat([f64; 3]),
    /// Smooth random color field plus per-pixel grain.
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub objects: Vec<ShapeKind>,
    /// Model diameter in meters, shared by all objects.
    pub diameter: f64,
    /// Surface samples per model.
    pub points: usize,
    /// Objects per scene, drawn from `objects` in turn.
    pub per_scene: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub focal: f64,
    /// Depth interval of object centers, meters.
    pub depth: [f64; 2],
    /// Object centers stay this fraction of the image side away from the border.
    pub margin: f64,
    pub background: Background,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            objects: vec![ShapeKind::LPrism],
            diameter: 0.1,
            points: 200,
            per_scene: 1,
            image_size: 104,
            focal: 130.0,
            depth: [0.5, 0.7],
            margin: 0.2,
            background: Background::Noise,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&[
            "seed", "objects", "diameter", "points", "per_scene", "image_size", "focal", "depth", "margin",
            "background", "background_color",
        ])?;
        let mut c = Self::default();
        kv.set("seed", &mut c.seed)?;
        if let Some(o) = kv.list::<ShapeKind>("objects")? {
            c.objects = o;
        }
        kv.set("diameter", &mut c.diameter)?;
        kv.set("points", &mut c.points)?;
        kv.set("per_scene", &mut c.per_scene)?;
        kv.set("image_size", &mut c.image_size)?;
        kv.set("focal", &mut c.focal)?;
        kv.pair("depth", &mut c.depth)?;
        kv.set("margin", &mut c.margin)?;
        match kv.get("background") {
            None | Some("noise") => {}
            Some("flat") => {
                let rgb = kv.list::<f64>("background_color")?.unwrap_or(vec![0.5; 3]);
                let rgb: [f64; 3] = rgb
                    .try_into()
                    .map_err(|_| Error::Config("background_color needs three numbers".into()))?;
                c.background = Background::Flat(rgb);
            }
            Some(other) => return Err(Error::Config(format!("unknown background {other:?}"))),
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::Config(format!("scene config: {why}")));
        if !(self.depth[0] > 0.0 && self.depth[1] >= self.depth[0]) {
            return bad("depth interval must be positive and ordered");
        }
        if self.image_size == 0 || !(self.focal > 0.0) || !(self.diameter > 0.0) {
            return bad("image size, focal length and diameter must be positive");
        }
        if !(0.0..0.5).contains(&self.margin) {
            return bad("margin must lie in [0, 0.5)");
        }
        if self.per_scene > 0 && self.objects.is_empty() {
            return bad("objects requested but none configured");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let c = self.image_size as f64 / 2.0;
        CameraIntrinsics::new(self.focal, self.focal, c, c, self.image_size, self.image_size)
    }

    /// Models of the object set; class ids follow configuration order.
    pub fn models(&self) -> Result<Vec<ObjectModel>> {
        self.objects
            .iter()
            .enumerate()
            .map(|(id, &kind)| build(kind, id, self.diameter, self.points, self.seed.wrapping_add(id as u64)))
            .collect()
    }
}

/// A generated image with exact annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub objects: Vec<GroundTruth>,
    pub intrinsics: CameraIntrinsics,
}

/// Deterministic random stream for one item of a seeded sequence.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn random_rotation<R: Rng>(rng: &mut R) -> Quaternion {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if let Ok(q) = Quaternion::from_array(v).normalized() {
            return q.canonical();
        }
    }
}

pub fn random_direction<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v: Vector3<f64> = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn background<R: Rng>(mode: Background, size: usize, rng: &mut R) -> RgbImage {
    match mode {
        Background::Flat(c) => RgbImage::filled(size, size, c),
        Background::Noise => {
            const GRID: usize = 5;
            let knots: Vec<[f64; 3]> = (0..GRID * GRID)
                .map(|_| std::array::from_fn(|_| rng.random_range(0.1..0.9)))
                .collect();
            let mut img = RgbImage::new(size, size);
            let step = (size as f64) / (GRID - 1) as f64;
            for y in 0..size {
                let gy = (y as f64 + 0.5) / step;
                let y0 = (gy.floor() as usize).min(GRID - 2);
                let ay = gy - y0 as f64;
                for x in 0..size {
                    let gx = (x as f64 + 0.5) / step;
                    let x0 = (gx.floor() as usize).min(GRID - 2);
                    let ax = gx - x0 as f64;
                    let k = |i: usize, j: usize| knots[(y0 + j) * GRID + x0 + i];
                    let c: [f64; 3] = std::array::from_fn(|ch| {
                        let top = (1.0 - ax) * k(0, 0)[ch] + ax * k(1, 0)[ch];
                        let bottom = (1.0 - ax) * k(0, 1)[ch] + ax * k(1, 1)[ch];
                        let grain: f64 = rng.random_range(-0.05..0.05);
                        ((1.0 - ay) * top + ay * bottom + grain).clamp(0.0, 1.0)
                    });
                    img.set(x, y, c);
                }
            }
            img
        }
    }
}

/// Renders scene `index` of the stream fixed by `cfg.seed`.
pub fn generate_scene(cfg: &SceneConfig, models: &[ObjectModel], index: u64) -> Result<Scene> {
    cfg.validate()?;
    let k = cfg.intrinsics()?;
    let mut rng = item_rng(cfg.seed, index);
    let n = cfg.image_size;
    let mut image = background(cfg.background, n, &mut rng);
    let mut objects = Vec::with_capacity(cfg.per_scene);
    let mut render = RenderOutput::empty(n, n);
    for i in 0..cfg.per_scene {
        let class_id = (index as usize * cfg.per_scene + i) % models.len().max(1);
        let model = models
            .get(class_id)
            .ok_or_else(|| Error::Config("scene needs at least one model".into()))?;
        let lo = cfg.margin * n as f64;
        let hi = (1.0 - cfg.margin) * n as f64;
        let center = Vector2::new(rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        let tz = rng.random_range(cfg.depth[0]..=cfg.depth[1]);
        let pose = Pose {
            rotation: random_rotation(&mut rng),
            translation: recover_translation(center, tz, &k)?,
        };
        render.draw(model, &pose, &k);
        objects.push(GroundTruth { class_id, pose });
    }
    for (i, &m) in render.mask.iter().enumerate() {
        if m {
            image.set(i % n, i / n, render.rgb.get(i % n, i / n));
        }
    }
    Ok(Scene {
        image,
        objects,
        intrinsics: k,
    })
}

/// Rotates `pose` about a random axis by an angle drawn from `angle_deg`
/// and shifts it by a random offset whose length is drawn from
/// `trans_frac` times the model diameter. Draws resulting in non-positive
/// depth are retried.
pub fn perturb_pose<R: Rng>(
    pose: &Pose,
    model: &ObjectModel,
    rng: &mut R,
    angle_deg: [f64; 2],
    trans_frac: [f64; 2],
) -> Result<Pose> {
    if !(0.0 <= angle_deg[0] && angle_deg[0] <= angle_deg[1] && 0.0 <= trans_frac[0] && trans_frac[0] <= trans_frac[1]) {
        return Err(Error::Config(format!(
            "perturbation ranges must be ordered and nonnegative: {angle_deg:?}, {trans_frac:?}"
        )));
    }
    const TRIES: usize = 100;
    for _ in 0..TRIES {
        let angle = rng.random_range(angle_deg[0]..=angle_deg[1]).to_radians();
        let axis = random_direction(rng);
        let len = rng.random_range(trans_frac[0]..=trans_frac[1]) * model.diameter;
        let offset = random_direction(rng) * len;
        let t = pose.translation + offset;
        if t.z > 0.0 {
            let dq = Quaternion::from_axis_angle(axis, angle)?;
            return Pose::new((dq * pose.rotation).normalized()?, t);
        }
    }
    Err(Error::InvalidDepth(pose.translation.z))
}
