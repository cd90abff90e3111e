//! Synthetic data, training and evaluation drivers.

mod config;
mod dataset;
mod eval;
mod scene;
mod train;

pub use config::KeyValues;
pub use dataset::{load_models, Dataset, ManifestRecord, ObjectRecord, Sample, IMAGES_DIR, MANIFEST, MODELS_DIR};
pub use eval::{evaluate, evaluate_with, gt_detections, EvalOptions, EvalOutcome};
pub use scene::{generate_scene, item_rng, perturb_pose, random_direction, random_rotation, Background, Scene, SceneConfig};
pub use train::{fixed_perturbations, train, uses_oracle_flow, LogRow, PoseEstimator, TrainConfig, TrainOutcome};
