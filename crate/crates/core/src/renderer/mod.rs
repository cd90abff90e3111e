//! Z-buffered triangle rasterizer with flat Lambertian shading.
//!
//! Coverage is sampled at pixel centers `(i + 0.5, j + 0.5)`; pixels whose
//! center lies exactly on a shared edge belong to the triangle for which that
//! edge is a top or left edge, so meshes cover every pixel at most once.

mod crops;
pub mod io;

pub use crops::{make_input_crops, CropPair};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, ObjectModel, Pose};

const NEAR: f64 = 1e-6;
const AMBIENT: f64 = 0.3;

/// Direction towards the light, camera frame (camera looks along +z).
fn light_dir() -> Vector3<f64> {
    Vector3::new(0.4, -0.5, -1.0).normalize()
}

/// Interleaved RGB image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar channel-major copy (`3 x height x width`).
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[n + i] = px[1];
            out[2 * n + i] = px[2];
        }
        out
    }
}

/// Rendered color, depth (meters, `+inf` where empty) and coverage mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: RgbImage,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl RenderOutput {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            rgb: RgbImage::new(width, height),
            depth: vec![f64::INFINITY; width * height],
            mask: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    /// Depth-tests `model` under `pose` into this buffer; nearer surfaces win.
    pub fn draw(&mut self, model: &ObjectModel, pose: &Pose, k: &CameraIntrinsics) {
        let (w, h) = (self.width(), self.height());
        let r = pose.rotation_matrix();
        let cam: Vec<Vector3<f64>> = model.vertices.iter().map(|v| r * v + pose.translation).collect();
        let light = light_dir();

        for face in &model.faces {
            let p = [cam[face[0]], cam[face[1]], cam[face[2]]];
            if p.iter().any(|v| v.z <= NEAR) {
                continue;
            }
            let mut n = (p[1] - p[0]).cross(&(p[2] - p[0]));
            let nn = n.norm();
            if nn == 0.0 {
                continue;
            }
            n /= nn;
            let centroid = (p[0] + p[1] + p[2]) / 3.0;
            if n.dot(&centroid) > 0.0 {
                n = -n;
            }
            let shade = AMBIENT + (1.0 - AMBIENT) * n.dot(&light).max(0.0);
            let color = [model.color[0] * shade, model.color[1] * shade, model.color[2] * shade];

            let mut s = p.map(|v| Vector2::new(k.fx * v.x / v.z + k.px, k.fy * v.y / v.z + k.py));
            let mut z = p.map(|v| v.z);
            let mut area = edge(&s[0], &s[1], &s[2]);
            if area == 0.0 || !area.is_finite() {
                continue;
            }
            if area < 0.0 {
                s.swap(1, 2);
                z.swap(1, 2);
                area = -area;
            }
            let min_x = s.iter().map(|v| v.x).fold(f64::INFINITY, f64::min);
            let max_x = s.iter().map(|v| v.x).fold(f64::NEG_INFINITY, f64::max);
            let min_y = s.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
            let max_y = s.iter().map(|v| v.y).fold(f64::NEG_INFINITY, f64::max);
            let x0 = (min_x - 0.5).ceil().max(0.0);
            let x1 = (max_x - 0.5).floor().min(w as f64 - 1.0);
            let y0 = (min_y - 0.5).ceil().max(0.0);
            let y1 = (max_y - 0.5).floor().min(h as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let tl = [
                is_top_left(&(s[2] - s[1])),
                is_top_left(&(s[0] - s[2])),
                is_top_left(&(s[1] - s[0])),
            ];
            for py in y0 as usize..=y1 as usize {
                for px in x0 as usize..=x1 as usize {
                    let c = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                    let wts = [edge(&s[1], &s[2], &c), edge(&s[2], &s[0], &c), edge(&s[0], &s[1], &c)];
                    if !(0..3).all(|e| wts[e] > 0.0 || (wts[e] == 0.0 && tl[e])) {
                        continue;
                    }
                    let inv_z: f64 = (0..3).map(|e| wts[e] / area / z[e]).sum();
                    let depth = 1.0 / inv_z;
                    let idx = py * w + px;
                    if depth < self.depth[idx] {
                        self.depth[idx] = depth;
                        self.mask[idx] = true;
                        self.rgb.set(px, py, color);
                    }
                }
            }
        }
    }
}

fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

// With positive area in y-down image coordinates the triangle winds
// clockwise on screen: top edges run +x, left edges run -y.
fn is_top_left(d: &Vector2<f64>) -> bool {
    (d.y == 0.0 && d.x > 0.0) || d.y < 0.0
}

/// Renders `model` alone into a `k.width x k.height` buffer.
pub fn rasterize(model: &ObjectModel, pose: &Pose, k: &CameraIntrinsics) -> RenderOutput {
    let mut out = RenderOutput::empty(k.width, k.height);
    out.draw(model, pose, k);
    out
}

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let iw = (self.x1.min(o.x1) - self.x0.max(o.x0)).max(0.0);
        let ih = (self.y1.min(o.y1) - self.y0.max(o.y0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Bounding box of the projected model points and mesh vertices, grown by
/// `pad` pixels per side and clipped to the image.
pub fn projected_bbox(model: &ObjectModel, pose: &Pose, k: &CameraIntrinsics, pad: f64) -> Result<BBox> {
    let r = pose.rotation_matrix();
    let mut b = BBox {
        x0: f64::INFINITY,
        y0: f64::INFINITY,
        x1: f64::NEG_INFINITY,
        y1: f64::NEG_INFINITY,
    };
    for p in model.points.iter().chain(model.vertices.iter()) {
        let uv = k.project(&(r * p + pose.translation))?;
        b.x0 = b.x0.min(uv.x);
        b.y0 = b.y0.min(uv.y);
        b.x1 = b.x1.max(uv.x);
        b.y1 = b.y1.max(uv.y);
    }
    if !b.x0.is_finite() {
        return Err(Error::EmptyPointSet);
    }
    let (w, h) = (k.width as f64, k.height as f64);
    Ok(BBox {
        x0: (b.x0 - pad).clamp(0.0, w),
        y0: (b.y0 - pad).clamp(0.0, h),
        x1: (b.x1 + pad).clamp(0.0, w),
        y1: (b.y1 + pad).clamp(0.0, h),
    })
}
