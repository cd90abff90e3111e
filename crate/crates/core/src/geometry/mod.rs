//! Rotation, pose and camera algebra.
//!
//! Quaternions are stored `(w, x, y, z)` with the scalar first. Rotations
//! compose by left multiplication, so `a * b` applies `b` first.

mod model;
pub mod shapes;

pub use model::ObjectModel;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_QUAT_NORM: f64 = 1e-12;
const ORTHONORMAL_TOL: f64 = 1e-6;
const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if n < MIN_QUAT_NORM {
            return Err(Error::InvalidRotation("zero rotation axis".into()));
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Ok(Self::new(c, a.x * s, a.y * s, a.z * s))
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !(n > MIN_QUAT_NORM) || !n.is_finite() {
            return Err(Error::InvalidRotation(format!(
                "quaternion norm {n:e} is not usable"
            )));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Sign-canonical form with `w >= 0`.
    pub fn canonical(self) -> Self {
        if self.w < 0.0 {
            Self::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            self
        }
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(self, o: Self) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Geodesic angle (radians) between the rotations of two unit quaternions.
    pub fn angle_to(self, o: Self) -> f64 {
        let d = self.dot(o).abs().min(1.0);
        2.0 * d.acos()
    }

    pub fn rotate(self, v: Vector3<f64>) -> Vector3<f64> {
        // q v q* expanded: v + 2w (u x v) + 2 u x (u x v)
        let u = Vector3::new(self.x, self.y, self.z);
        let t = 2.0 * u.cross(&v);
        v + self.w * t + u.cross(&t)
    }
}

impl std::ops::Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, r: Quaternion) -> Quaternion {
        let l = self;
        Quaternion::new(
            l.w * r.w - l.x * r.x - l.y * r.y - l.z * r.z,
            l.w * r.x + l.x * r.w + l.y * r.z - l.z * r.y,
            l.w * r.y - l.x * r.z + l.y * r.w + l.z * r.x,
            l.w * r.z + l.x * r.y - l.y * r.x + l.z * r.w,
        )
    }
}

/// Rotation matrix of `q`. The input is normalized first.
pub fn quat_to_rotmat(q: Quaternion) -> Result<Matrix3<f64>> {
    let u = q.normalized()?;
    Ok(unit_quat_matrix(u))
}

fn unit_quat_matrix(u: Quaternion) -> Matrix3<f64> {
    let Quaternion { w, x, y, z } = u;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Backpropagates `dl_dr` (gradient w.r.t. the rotation matrix) to the raw,
/// possibly unnormalized quaternion that produced it via [`quat_to_rotmat`].
pub fn quat_to_rotmat_backward(q: Quaternion, dl_dr: &Matrix3<f64>) -> Result<[f64; 4]> {
    let n = q.norm();
    let u = q.normalized()?;
    let Quaternion { w, x, y, z } = u;
    let g = |r: usize, c: usize| dl_dr[(r, c)];
    // d R / d(w, x, y, z) contracted with G, for the unit quaternion.
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let du = [dw, dx, dy, dz];
    let ua = u.to_array();
    let proj: f64 = du.iter().zip(ua.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (du[k] - ua[k] * proj) / n;
    }
    Ok(out)
}

/// Quaternion of an orthonormal matrix, canonicalized to `w >= 0`.
pub fn rotmat_to_quat(r: &Matrix3<f64>) -> Result<Quaternion> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if !(err <= ORTHONORMAL_TOL) {
        return Err(Error::InvalidRotation(format!(
            "matrix is not orthonormal (max deviation {err:e})"
        )));
    }
    let det = r.determinant();
    if det <= 0.0 {
        return Err(Error::InvalidRotation(format!(
            "determinant {det} is not +1"
        )));
    }
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if trace > 0.0 {
        let s = 2.0 * (1.0 + trace).sqrt();
        Quaternion::new(
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = 2.0 * (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt();
        Quaternion::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = 2.0 * (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt();
        Quaternion::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = 2.0 * (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt();
        Quaternion::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        )
    };
    Ok(q.normalized()?.canonical())
}

/// Rigid transform `x -> R x + t` with a unit-quaternion rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Quaternion::IDENTITY,
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, normalizing the rotation.
    pub fn new(rotation: Quaternion, translation: Vector3<f64>) -> Result<Self> {
        Ok(Self {
            rotation: rotation.normalized()?,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Quaternion::IDENTITY,
            translation: t,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        unit_quat_matrix(self.rotation)
    }

    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: (self.rotation * other.rotation)
                .normalized()
                .unwrap_or(Quaternion::IDENTITY),
            translation: self.rotation_matrix() * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.conjugate();
        Pose {
            rotation: inv,
            translation: -(unit_quat_matrix(inv) * self.translation),
        }
    }
}

/// Maps every point through `pose`.
pub fn transform_points(pose: &Pose, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let r = pose.rotation_matrix();
    pts.iter().map(|p| r * p + pose.translation).collect()
}

/// Pinhole intrinsics. Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, px: f64, py: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive ({fx}, {fy})")));
        }
        if !(px >= 0.0 && px < width as f64 && py >= 0.0 && py < height as f64) {
            return Err(Error::Config(format!(
                "principal point ({px}, {py}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            px,
            py,
            width,
            height,
        })
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(p.z > MIN_DEPTH) {
            return Err(Error::BehindCamera(p.z));
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.px,
            self.fy * p.y / p.z + self.py,
        ))
    }

    /// Intrinsics of a `width x height` window whose top-left pixel sits at
    /// `origin` in this camera's image. The principal point may fall outside
    /// the window.
    pub fn window(&self, origin: [i64; 2], width: usize, height: usize) -> Self {
        Self {
            fx: self.fx,
            fy: self.fy,
            px: self.px - origin[0] as f64,
            py: self.py - origin[1] as f64,
            width,
            height,
        }
    }

    pub fn contains(&self, c: &Vector2<f64>) -> bool {
        c.x >= 0.0 && c.y >= 0.0 && c.x < self.width as f64 && c.y < self.height as f64
    }
}

pub fn project_points(pts_cam: &[Vector3<f64>], k: &CameraIntrinsics) -> Result<Vec<Vector2<f64>>> {
    pts_cam.iter().map(|p| k.project(p)).collect()
}

/// Camera-frame translation whose projection is `center` at depth `tz`.
pub fn recover_translation(center: Vector2<f64>, tz: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(tz > 0.0) {
        return Err(Error::InvalidDepth(tz));
    }
    Ok(Vector3::new(
        (center.x - k.px) * tz / k.fx,
        (center.y - k.py) * tz / k.fy,
        tz,
    ))
}

/// Grid cell, 0-based: `col` indexes x, `row` indexes y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl CellIndex {
    pub fn new(row: usize, col: usize, size: usize) -> Result<Self> {
        if size == 0 || row >= size || col >= size {
            return Err(Error::Config(format!(
                "cell ({row}, {col}) outside a {size}x{size} grid"
            )));
        }
        Ok(Self { row, col, size })
    }

    /// Cell containing pixel position `p` in a `width x height` image.
    pub fn containing(p: &Vector2<f64>, width: usize, height: usize, size: usize) -> Option<Self> {
        if p.x < 0.0 || p.y < 0.0 || p.x >= width as f64 || p.y >= height as f64 {
            return None;
        }
        let col = ((p.x * size as f64 / width as f64).floor() as usize).min(size - 1);
        let row = ((p.y * size as f64 / height as f64).floor() as usize).min(size - 1);
        Some(Self { row, col, size })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Object center in pixels from the raw offset logits of `cell`.
pub fn decode_cell_center(raw: [f64; 2], cell: CellIndex, width: usize, height: usize) -> Vector2<f64> {
    let s = cell.size as f64;
    let gx = sigmoid(raw[0]) + cell.col as f64;
    let gy = sigmoid(raw[1]) + cell.row as f64;
    Vector2::new(gx * width as f64 / s, gy * height as f64 / s)
}

/// Applies a residual `(dq, dc, dtz)`: rotation composes on the left, the
/// projected center shifts by `dc` pixels and depth by `dtz`; the in-plane
/// translation is then recovered from the new center and depth.
pub fn compose_refinement(
    pose: &Pose,
    dq: Quaternion,
    dc: Vector2<f64>,
    dtz: f64,
    k: &CameraIntrinsics,
) -> Result<Pose> {
    let tz = pose.translation.z + dtz;
    if !(tz > 0.0) {
        return Err(Error::InvalidDepth(tz));
    }
    let center = k.project(&pose.translation)? + dc;
    Ok(Pose {
        rotation: (dq.normalized()? * pose.rotation).normalized()?,
        translation: recover_translation(center, tz, k)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn k500() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn rodrigues(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        let a = axis.normalize();
        let kx = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
        Matrix3::identity() + angle.sin() * kx + (1.0 - angle.cos()) * kx * kx
    }

    #[test]
    fn identity_quaternion_is_identity_matrix() {
        let r = quat_to_rotmat(Quaternion::IDENTITY).unwrap();
        assert_eq!(r, Matrix3::identity());
        let r2 = quat_to_rotmat(Quaternion::new(2.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((r2 - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn quarter_turn_about_z_matches_rodrigues() {
        let q = Quaternion::new(FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2);
        let r = quat_to_rotmat(q).unwrap();
        let oracle = rodrigues(Vector3::z(), PI / 2.0);
        assert!((r - oracle).abs().max() < 1e-12);
        let e = r * Vector3::x();
        assert!((e - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn near_zero_quaternion_is_rejected() {
        assert!(matches!(
            quat_to_rotmat(Quaternion::new(0.0, 1e-14, 0.0, 0.0)),
            Err(Error::InvalidRotation(_))
        ));
    }

    #[test]
    fn rotmat_to_quat_examples() {
        let q = rotmat_to_quat(&Matrix3::identity()).unwrap();
        assert_eq!(q, Quaternion::IDENTITY);

        let rz = rodrigues(Vector3::z(), PI / 2.0);
        let q = rotmat_to_quat(&rz).unwrap();
        assert!(close(q.w, FRAC_1_SQRT_2, 1e-12) && close(q.z, FRAC_1_SQRT_2, 1e-12));
        assert!((quat_to_rotmat(q).unwrap() - rz).abs().max() < 1e-12);

        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(rotmat_to_quat(&reflect).is_err());
        let sheared = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(rotmat_to_quat(&sheared).is_err());
    }

    #[test]
    fn transform_points_examples() {
        let pts = vec![Vector3::new(0.3, -1.0, 2.0), Vector3::new(0.0, 0.0, 0.0)];
        assert_eq!(transform_points(&Pose::identity(), &pts), pts);
        let t = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(transform_points(&t, &[Vector3::zeros()])[0], Vector3::new(0.0, 0.0, 1.0));
        let p = Pose::new(
            Quaternion::new(FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2),
            Vector3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        let out = transform_points(&p, &[Vector3::x()])[0];
        let oracle = rodrigues(Vector3::z(), PI / 2.0) * Vector3::x() + Vector3::x();
        assert!((out - oracle).norm() < 1e-12);
        assert!((out - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn project_points_examples() {
        let k = k500();
        let px = project_points(&[Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.2, 0.0, 1.0)], &k)
            .unwrap();
        assert_eq!(px[0], Vector2::new(320.0, 240.0));
        assert!((px[1] - Vector2::new(420.0, 240.0)).norm() < 1e-12);
        assert!(matches!(
            project_points(&[Vector3::new(0.0, 0.0, -1.0)], &k),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn recover_translation_examples() {
        let k = k500();
        let t = recover_translation(Vector2::new(320.0, 240.0), 2.0, &k).unwrap();
        assert_eq!(t, Vector3::new(0.0, 0.0, 2.0));
        let t = recover_translation(Vector2::new(420.0, 240.0), 1.0, &k).unwrap();
        assert!((t - Vector3::new(0.2, 0.0, 1.0)).norm() < 1e-12);
        let t = recover_translation(Vector2::new(320.0, 340.0), 1.0, &k).unwrap();
        assert!((t - Vector3::new(0.0, 0.2, 1.0)).norm() < 1e-12);
        assert!(matches!(
            recover_translation(Vector2::new(1.0, 1.0), 0.0, &k),
            Err(Error::InvalidDepth(_))
        ));
    }

    #[test]
    fn decode_cell_center_examples() {
        let cell = CellIndex::new(6, 6, 13).unwrap();
        let c = decode_cell_center([0.0, 0.0], cell, 416, 416);
        assert!((c - Vector2::new(208.0, 208.0)).norm() < 1e-12);
        let lo = decode_cell_center([-800.0, -800.0], cell, 416, 416);
        assert!((lo - Vector2::new(192.0, 192.0)).norm() < 1e-9);
        let hi = decode_cell_center([800.0, 800.0], cell, 416, 416);
        assert!((hi - Vector2::new(224.0, 224.0)).norm() < 1e-9);
    }

    #[test]
    fn compose_refinement_examples() {
        let k = k500();
        let pose = Pose::new(
            Quaternion::new(0.9, 0.1, -0.3, 0.2),
            Vector3::new(0.05, -0.02, 1.0),
        )
        .unwrap();
        let same = compose_refinement(&pose, Quaternion::IDENTITY, Vector2::zeros(), 0.0, &k).unwrap();
        assert!((same.translation - pose.translation).norm() < 1e-9);
        assert!(same.rotation.angle_to(pose.rotation) < 1e-9);

        let deeper = compose_refinement(&pose, Quaternion::IDENTITY, Vector2::zeros(), 0.5, &k).unwrap();
        assert!(close(deeper.translation.z, 1.5, 1e-12));
        let c0 = k.project(&pose.translation).unwrap();
        let c1 = k.project(&deeper.translation).unwrap();
        assert!((c0 - c1).norm() < 1e-9);

        let q90 = Quaternion::from_axis_angle(Vector3::z(), PI / 2.0).unwrap();
        let twice = compose_refinement(&pose, q90, Vector2::zeros(), 0.0, &k).unwrap();
        let twice = compose_refinement(&twice, q90, Vector2::zeros(), 0.0, &k).unwrap();
        let oracle = rodrigues(Vector3::z(), PI) * pose.rotation_matrix();
        assert!((twice.rotation_matrix() - oracle).abs().max() < 1e-12);

        assert!(matches!(
            compose_refinement(&pose, Quaternion::IDENTITY, Vector2::zeros(), -1.0, &k),
            Err(Error::InvalidDepth(_))
        ));
    }

    #[test]
    fn quat_backward_matches_finite_differences() {
        let q = Quaternion::new(0.7, -0.2, 0.4, 1.1);
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.7, -0.4, 1.2, 0.1, -0.6);
        let f = |a: [f64; 4]| {
            let r = quat_to_rotmat(Quaternion::from_array(a)).unwrap();
            r.component_mul(&g).sum()
        };
        let analytic = quat_to_rotmat_backward(q, &g).unwrap();
        let base = q.to_array();
        for k in 0..4 {
            let (mut p, mut m) = (base, base);
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let num = (f(p) - f(m)) / 2e-6;
            assert!((num - analytic[k]).abs() < 1e-8, "{k}: {num} vs {}", analytic[k]);
        }
    }

    fn arb_quat() -> impl Strategy<Value = Quaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Quaternion::new(w, x, y, z).normalized().unwrap())
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (arb_quat(), -0.5..0.5f64, -0.5..0.5f64, 0.5..3.0f64)
            .prop_map(|(q, x, y, z)| Pose::new(q, Vector3::new(x, y, z)).unwrap())
    }

    proptest! {
        #[test]
        fn quaternion_round_trip(q in arb_quat()) {
            let back = rotmat_to_quat(&quat_to_rotmat(q).unwrap()).unwrap();
            let (b, a) = (back.to_array(), q.to_array());
            let same = (0..4).map(|k| (b[k] - a[k]).abs()).fold(0.0, f64::max);
            let flipped = (0..4).map(|k| (b[k] + a[k]).abs()).fold(0.0, f64::max);
            prop_assert!(same.min(flipped) < 1e-9);
            prop_assert!(back.w >= 0.0);
        }

        #[test]
        fn recover_translation_inverts_projection(
            cx in 0.0..640.0f64, cy in 0.0..480.0f64, tz in 0.05..20.0f64,
            f in 100.0..2000.0f64, px in 0.0..639.0f64, py in 0.0..479.0f64,
        ) {
            let k = CameraIntrinsics::new(f, f * 1.1, px, py, 640, 480).unwrap();
            let t = recover_translation(Vector2::new(cx, cy), tz, &k).unwrap();
            let c = k.project(&t).unwrap();
            prop_assert!((c - Vector2::new(cx, cy)).norm() < 1e-6);
        }

        #[test]
        fn compose_with_inverse_residual_is_identity(
            pose in arb_pose(), dq in arb_quat(),
            dx in -30.0..30.0f64, dy in -30.0..30.0f64, dtz in -0.3..0.3f64,
        ) {
            let k = k500();
            let dc = Vector2::new(dx, dy);
            let fwd = compose_refinement(&pose, dq, dc, dtz, &k).unwrap();
            let back = compose_refinement(&fwd, dq.conjugate(), -dc, -dtz, &k).unwrap();
            prop_assert!((back.translation - pose.translation).norm() < 1e-9);
            prop_assert!(back.rotation.angle_to(pose.rotation) < 1e-7);
            prop_assert!((back.rotation_matrix() - pose.rotation_matrix()).abs().max() < 1e-9);
        }

        #[test]
        fn transform_preserves_distances(pose in arb_pose(),
            pts in proptest::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 2..20)) {
            let pts: Vec<_> = pts.into_iter().map(|(x, y, z)| Vector3::new(x, y, z)).collect();
            let out = transform_points(&pose, &pts);
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    let d0 = (pts[i] - pts[j]).norm();
                    let d1 = (out[i] - out[j]).norm();
                    prop_assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn decoded_center_stays_inside_cell(rx in -30.0..30.0f64, ry in -30.0..30.0f64,
            row in 0usize..13, col in 0usize..13) {
            let cell = CellIndex::new(row, col, 13).unwrap();
            let c = decode_cell_center([rx, ry], cell, 416, 416);
            let (x0, y0) = (col as f64 * 32.0, row as f64 * 32.0);
            prop_assert!(c.x > x0 && c.x < x0 + 32.0);
            prop_assert!(c.y > y0 && c.y < y0 + 32.0);
            prop_assert_eq!(CellIndex::containing(&c, 416, 416, 13), Some(cell));
        }

        #[test]
        fn rotation_matrix_is_orthonormal(q in arb_quat()) {
            let r = quat_to_rotmat(q).unwrap();
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }
}
