use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, SceneConfig};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, ObjectModel, Pose, Quaternion};
use crate::ppn::GroundTruth;
use crate::renderer::io::{read_ppm, write_ppm};
use crate::renderer::RgbImage;

pub const MANIFEST: &str = "manifest.jsonl";
pub const MODELS_DIR: &str = "models";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub objects: Vec<GroundTruth>,
    pub intrinsics: CameraIntrinsics,
}

/// Models plus annotated images; class ids index `models`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub models: Vec<ObjectModel>,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub class: usize,
    pub quat: [f64; 4],
    pub t: [f64; 3],
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub objects: Vec<ObjectRecord>,
    pub intrinsics: CameraIntrinsics,
}

impl ObjectRecord {
    fn from_gt(gt: &GroundTruth) -> Self {
        Self {
            class: gt.class_id,
            quat: gt.pose.rotation.to_array(),
            t: gt.pose.translation.into(),
        }
    }

    fn to_gt(&self) -> Result<GroundTruth> {
        let q = Quaternion::from_array(self.quat);
        // Stored unit quaternions are kept bit-exact.
        let pose = if (q.norm() - 1.0).abs() < 1e-12 {
            Pose { rotation: q, translation: Vector3::from(self.t) }
        } else {
            Pose::new(q, Vector3::from(self.t)).map_err(|e| Error::Data(format!("bad annotation pose: {e}")))?
        };
        if !(pose.translation.z > 0.0) {
            return Err(Error::Data(format!("annotation depth {} is not positive", pose.translation.z)));
        }
        Ok(GroundTruth {
            class_id: self.class,
            pose,
        })
    }
}

fn model_file(m: &ObjectModel) -> String {
    format!("{:03}_{}.obj", m.id, m.name.replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_"))
}

impl Dataset {
    /// Scenes `0..count` of the stream fixed by `cfg`.
    pub fn generate(cfg: &SceneConfig, count: usize) -> Result<Self> {
        let models = cfg.models()?;
        let samples = (0..count as u64)
            .map(|i| {
                let s = generate_scene(cfg, &models, i)?;
                Ok(Sample {
                    image: s.image,
                    objects: s.objects,
                    intrinsics: s.intrinsics,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { models, samples })
    }

    pub fn classes(&self) -> usize {
        self.models.len()
    }

    pub fn model(&self, class: usize) -> Result<&ObjectModel> {
        self.models
            .get(class)
            .ok_or_else(|| Error::Data(format!("no model for class {class}")))
    }

    /// Checks annotations against the model set and image sizes.
    pub fn validate(&self) -> Result<()> {
        for (i, m) in self.models.iter().enumerate() {
            if m.id != i {
                return Err(Error::Data(format!("model {} is stored as class {i}", m.id)));
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.width != s.intrinsics.width || s.image.height != s.intrinsics.height {
                return Err(Error::Data(format!("sample {i}: image size does not match its intrinsics")));
            }
            if let Some(o) = s.objects.iter().find(|o| o.class_id >= self.models.len()) {
                return Err(Error::Data(format!("sample {i}: class {} has no model", o.class_id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(MODELS_DIR))?;
        fs::create_dir_all(dir.join(IMAGES_DIR))?;
        for m in &self.models {
            m.save_obj(&dir.join(MODELS_DIR).join(model_file(m)))?;
        }
        let mut manifest = String::new();
        for (i, s) in self.samples.iter().enumerate() {
            let rel = format!("{IMAGES_DIR}/{i:06}.ppm");
            write_ppm(&dir.join(&rel), &s.image)?;
            let rec = ManifestRecord {
                image: rel,
                objects: s.objects.iter().map(ObjectRecord::from_gt).collect(),
                intrinsics: s.intrinsics,
            };
            manifest.push_str(&serde_json::to_string(&rec)?);
            manifest.push('\n');
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let models = load_models(&dir.join(MODELS_DIR))?;
        let manifest = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest.display())))?;
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", manifest.display(), n + 1)))?;
            let path = dir.join(&rec.image);
            let image = read_ppm(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            samples.push(Sample {
                image,
                objects: rec.objects.iter().map(ObjectRecord::to_gt).collect::<Result<_>>()?,
                intrinsics: rec.intrinsics,
            });
        }
        let data = Self { models, samples };
        data.validate()?;
        Ok(data)
    }
}

/// Every `.obj` in `dir`, ordered by the class id it declares.
pub fn load_models(dir: &Path) -> Result<Vec<ObjectModel>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot list {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "obj"))
        .collect();
    paths.sort();
    let mut models = paths
        .iter()
        .enumerate()
        .map(|(i, p)| ObjectModel::load_obj(p, i))
        .collect::<Result<Vec<_>>>()?;
    models.sort_by_key(|m| m.id);
    if models.is_empty() {
        return Err(Error::Data(format!("no models in {}", dir.display())));
    }
    Ok(models)
}
