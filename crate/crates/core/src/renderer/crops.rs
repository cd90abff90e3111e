use super::{projected_bbox, rasterize, RgbImage};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, ObjectModel, Pose};

/// Image and render crops cut around the projected object center.
#[derive(Debug, Clone, PartialEq)]
pub struct CropPair {
    /// Source image inside the window, zeroed outside the padded box.
    pub image_crop: RgbImage,
    pub render_crop: RgbImage,
    pub render_mask: Vec<bool>,
    /// Top-left pixel of the window in the source image.
    pub crop_origin: [i64; 2],
    /// Intrinsics of the window.
    pub intrinsics: CameraIntrinsics,
}

impl CropPair {
    pub fn width(&self) -> usize {
        self.image_crop.width
    }

    pub fn height(&self) -> usize {
        self.image_crop.height
    }
}

/// Cuts a `width x height` window centered on the projection of the pose's
/// origin. Window pixels outside the source image are zero, as are image
/// pixels whose centers fall outside the projected box padded by `pad`.
pub fn make_input_crops(
    image: &RgbImage,
    model: &ObjectModel,
    pose: &Pose,
    k: &CameraIntrinsics,
    width: usize,
    height: usize,
    pad: f64,
) -> Result<CropPair> {
    let center = k.project(&pose.translation)?;
    if !k.contains(&center) {
        return Err(Error::OutOfView([center.x, center.y]));
    }
    let origin = [
        (center.x - width as f64 / 2.0).round() as i64,
        (center.y - height as f64 / 2.0).round() as i64,
    ];
    let bbox = projected_bbox(model, pose, k, pad)?;

    let mut image_crop = RgbImage::new(width, height);
    for cy in 0..height {
        let sy = origin[1] + cy as i64;
        if sy < 0 || sy >= image.height as i64 {
            continue;
        }
        for cx in 0..width {
            let sx = origin[0] + cx as i64;
            if sx < 0 || sx >= image.width as i64 {
                continue;
            }
            if bbox.contains(sx as f64 + 0.5, sy as f64 + 0.5) {
                image_crop.set(cx, cy, image.get(sx as usize, sy as usize));
            }
        }
    }

    let window = k.window(origin, width, height);
    let render = rasterize(model, pose, &window);
    Ok(CropPair {
        image_crop,
        render_crop: render.rgb,
        render_mask: render.mask,
        crop_origin: origin,
        intrinsics: window,
    })
}
