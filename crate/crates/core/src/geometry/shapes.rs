//! Procedural object meshes for synthetic scenes.

use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::sample_surface;
use super::{rotmat_to_quat, ObjectModel, Pose};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Cube,
    Tetrahedron,
    LPrism,
    SphereApprox,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Cube,
        ShapeKind::Tetrahedron,
        ShapeKind::LPrism,
        ShapeKind::SphereApprox,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Cube => "cube",
            ShapeKind::Tetrahedron => "tetrahedron",
            ShapeKind::LPrism => "l-prism",
            ShapeKind::SphereApprox => "sphere",
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cube" => Ok(ShapeKind::Cube),
            "tetrahedron" | "tetra" => Ok(ShapeKind::Tetrahedron),
            "l-prism" | "lprism" => Ok(ShapeKind::LPrism),
            "sphere" | "sphere-approx" => Ok(ShapeKind::SphereApprox),
            other => Err(Error::Config(format!("unknown shape {other:?}"))),
        }
    }
}

const PALETTE: [[f64; 3]; 4] = [
    [0.85, 0.35, 0.25],
    [0.30, 0.70, 0.35],
    [0.30, 0.45, 0.90],
    [0.90, 0.80, 0.30],
];

/// Builds a procedural model scaled to `diameter` meters with roughly
/// `points` surface samples. The point set is the mesh vertices plus the
/// orbit of random surface samples under the symmetry group, so every
/// declared symmetry maps the point set exactly onto itself.
pub fn build(kind: ShapeKind, id: usize, diameter: f64, points: usize, seed: u64) -> Result<ObjectModel> {
    let (vertices, faces, rotations) = match kind {
        ShapeKind::Cube => cube(),
        ShapeKind::Tetrahedron => tetrahedron(),
        ShapeKind::LPrism => l_prism(),
        ShapeKind::SphereApprox => uv_sphere(16, 8),
    };
    let raw_diameter = super::model::diameter(&vertices);
    let scale = diameter / raw_diameter;
    let vertices: Vec<Vector3<f64>> = vertices.into_iter().map(|v| v * scale).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let base = points.saturating_sub(vertices.len()).div_ceil(rotations.len());
    let samples = sample_surface(&vertices, &faces, base, &mut rng);
    let mut pts = vertices.clone();
    for r in &rotations {
        pts.extend(samples.iter().map(|s| r * s));
    }

    let symmetries = rotations
        .iter()
        .map(|r| {
            Ok(Pose {
                rotation: rotmat_to_quat(r)?,
                translation: Vector3::zeros(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ObjectModel::new(id, kind.name(), vertices, faces, pts, symmetries, PALETTE[id % PALETTE.len()])
}

type Mesh = (Vec<Vector3<f64>>, Vec<[usize; 3]>, Vec<Matrix3<f64>>);

/// The 24 rotations of the cube: signed permutation matrices with det +1.
fn cube_group() -> Vec<Matrix3<f64>> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::new();
    for p in PERMS {
        for signs in 0..8u32 {
            let mut m = Matrix3::zeros();
            for (row, &col) in p.iter().enumerate() {
                m[(row, col)] = if signs & (1 << row) != 0 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    // identity first
    out.sort_by_key(|m| (*m != Matrix3::identity()) as u8);
    out
}

fn preserves(vertices: &[Vector3<f64>], r: &Matrix3<f64>) -> bool {
    vertices
        .iter()
        .all(|v| vertices.iter().any(|w| (r * v - w).norm() < 1e-9))
}

fn cube() -> Mesh {
    let mut v = Vec::new();
    for i in 0..8 {
        let s = |b: usize| if i & b != 0 { 1.0 } else { -1.0 };
        v.push(Vector3::new(s(1), s(2), s(4)));
    }
    let quads = [
        [0, 1, 3, 2],
        [4, 6, 7, 5],
        [0, 4, 5, 1],
        [2, 3, 7, 6],
        [0, 2, 6, 4],
        [1, 5, 7, 3],
    ];
    let f = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    (v, f, cube_group())
}

fn tetrahedron() -> Mesh {
    let v = vec![
        Vector3::new(1.0, 1.0, 1.0),
        Vector3::new(1.0, -1.0, -1.0),
        Vector3::new(-1.0, 1.0, -1.0),
        Vector3::new(-1.0, -1.0, 1.0),
    ];
    let f = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    let group = cube_group().into_iter().filter(|r| preserves(&v, r)).collect();
    (v, f, group)
}

fn l_prism() -> Mesh {
    let outline = [(0.0, 0.0), (2.0, 0.0), (2.0, 1.0), (1.0, 1.0), (1.0, 3.0), (0.0, 3.0)];
    // area centroid of the L
    let (cx, cy) = (0.75, 1.25);
    let mut v = Vec::new();
    for z in [-0.5, 0.5] {
        for (x, y) in outline {
            v.push(Vector3::new(x - cx, y - cy, z));
        }
    }
    let cap = [[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5]];
    let mut f: Vec<[usize; 3]> = Vec::new();
    for t in cap {
        f.push([t[0], t[2], t[1]]);
        f.push([t[0] + 6, t[1] + 6, t[2] + 6]);
    }
    for i in 0..6 {
        let j = (i + 1) % 6;
        f.push([i, j, j + 6]);
        f.push([i, j + 6, i + 6]);
    }
    (v, f, vec![Matrix3::identity()])
}

/// Latitude-longitude sphere; its exact rotation group about the pole axis
/// has `segments` elements.
fn uv_sphere(segments: usize, rings: usize) -> Mesh {
    let mut v = vec![Vector3::new(0.0, 0.0, 1.0)];
    for r in 1..rings {
        let theta = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            v.push(Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()));
        }
    }
    v.push(Vector3::new(0.0, 0.0, -1.0));
    let south = v.len() - 1;
    let ring = |r: usize, s: usize| 1 + (r - 1) * segments + (s % segments);
    let mut f = Vec::new();
    for s in 0..segments {
        f.push([0, ring(1, s), ring(1, s + 1)]);
        f.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            f.push([ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)]);
            f.push([ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)]);
        }
    }
    let group = (0..segments)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / segments as f64;
            Matrix3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0)
        })
        .collect();
    (v, f, group)
}
