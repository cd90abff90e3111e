use nalgebra::Vector3;

use crate::error::Result;
use crate::geometry::{CameraIntrinsics, ObjectModel, Pose};
use crate::renderer::rasterize;
use crate::tensornet::Tensor;

/// Exact render-to-image correspondence field inside a window.
///
/// For every pixel `x` covered by the object at `gt`, the flow points to
/// where the same surface point projects under `current`, so that warping
/// render features by it aligns them with the observed image. Pixels off the
/// object get zero flow. Returned as `[2, H, W]`, horizontal first.
pub fn oracle_flow(model: &ObjectModel, current: &Pose, gt: &Pose, window: &CameraIntrinsics) -> Result<Tensor> {
    let (w, h) = (window.width, window.height);
    let seen = rasterize(model, gt, window);
    let to_model = gt.inverse();
    let mut flow = Tensor::zeros(&[2, h, w]);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !seen.mask[i] {
                continue;
            }
            let z = seen.depth[i];
            let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
            let cam = Vector3::new((u - window.px) * z / window.fx, (v - window.py) * z / window.fy, z);
            let moved = current.transform_point(&to_model.transform_point(&cam));
            let Ok(p) = window.project(&moved) else { continue };
            let d = flow.data_mut();
            d[i] = p.x - u;
            d[plane + i] = p.y - v;
        }
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes::{build, ShapeKind};
    use crate::geometry::Quaternion;
    use crate::tensornet::ops::bilinear_warp;

    fn window() -> CameraIntrinsics {
        CameraIntrinsics::new(130.0, 130.0, 24.0, 24.0, 48, 48).unwrap()
    }

    #[test]
    fn lateral_shift_gives_constant_flow_on_the_mask() {
        let model = build(ShapeKind::Cube, 0, 0.1, 200, 1).unwrap();
        let gt = Pose::new(
            Quaternion::from_axis_angle(Vector3::new(1.0, 1.0, 0.0), 0.5).unwrap(),
            Vector3::new(0.0, 0.0, 0.5),
        )
        .unwrap();
        let mut cur = gt;
        cur.translation.x += 0.01;
        cur.translation.y -= 0.02;
        let flow = oracle_flow(&model, &cur, &gt, &window()).unwrap();
        let mask = rasterize(&model, &gt, &window()).mask;
        // a point at depth z moves by f * dx / z; the object is not flat, so
        // compare per pixel against its own depth
        let depth = rasterize(&model, &gt, &window()).depth;
        let mut n = 0;
        for (i, &m) in mask.iter().enumerate() {
            if m {
                n += 1;
                assert!((flow.data()[i] - 130.0 * 0.01 / depth[i]).abs() < 1e-9);
                assert!((flow.data()[2304 + i] + 130.0 * 0.02 / depth[i]).abs() < 1e-9);
            } else {
                assert_eq!(flow.data()[i], 0.0);
            }
        }
        assert!(n > 50);
    }

    #[test]
    fn warping_the_render_reproduces_the_observed_object() {
        let model = build(ShapeKind::Cube, 0, 0.1, 200, 2).unwrap();
        let gt = Pose::new(
            Quaternion::from_axis_angle(Vector3::new(0.3, 1.0, 0.2), 0.7).unwrap(),
            Vector3::new(0.0, 0.0, 0.5),
        )
        .unwrap();
        let cur = Pose::new(
            Quaternion::from_axis_angle(Vector3::new(1.0, 0.0, 0.0), 0.1).unwrap() * gt.rotation,
            Vector3::new(0.005, 0.0, 0.51),
        )
        .unwrap();
        let k = window();
        let seen = rasterize(&model, &gt, &k);
        let rendered = rasterize(&model, &cur, &k);
        let flow = oracle_flow(&model, &cur, &gt, &k).unwrap();
        // warp a feature that is a smooth function of the model-frame point:
        // the render's camera-frame depth is not, so use the shaded color
        let f = Tensor::from_vec(&[3, 48, 48], rendered.rgb.to_planar()).unwrap();
        let warped = bilinear_warp(&f, &flow).unwrap();
        let target = seen.rgb.to_planar();
        let mut close = 0;
        let mut total = 0;
        for i in 0..2304 {
            if seen.mask[i] {
                total += 1;
                if (0..3).all(|c| (warped.data()[c * 2304 + i] - target[c * 2304 + i]).abs() < 0.05) {
                    close += 1;
                }
            }
        }
        assert!(close as f64 >= 0.8 * total as f64, "{close}/{total}");
    }
}
