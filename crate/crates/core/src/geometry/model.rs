use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;

use super::{Pose, Quaternion};
use crate::error::{Error, Result};

/// Rigid object: render mesh, sampled surface points and symmetry set.
///
/// Models are stored origin-centered; the projected model origin is the
/// object center used by the translation parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub id: usize,
    pub name: String,
    pub points: Vec<Vector3<f64>>,
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub diameter: f64,
    /// Discrete symmetry transforms; the identity is always first.
    pub symmetries: Vec<Pose>,
    pub is_symmetric: bool,
    pub color: [f64; 3],
}

impl ObjectModel {
    pub fn new(
        id: usize,
        name: impl Into<String>,
        vertices: Vec<Vector3<f64>>,
        faces: Vec<[usize; 3]>,
        points: Vec<Vector3<f64>>,
        symmetries: Vec<Pose>,
        color: [f64; 3],
    ) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::Data(format!(
                "object model needs at least 4 points, got {}",
                points.len()
            )));
        }
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::Data(format!("face {f:?} references a missing vertex")));
        }
        let mut syms: Vec<Pose> = symmetries
            .into_iter()
            .filter(|s| !is_identity(s))
            .collect();
        syms.insert(0, Pose::identity());
        let is_symmetric = syms.len() > 1;
        Ok(Self {
            id,
            name: name.into(),
            diameter: diameter(&points),
            points,
            vertices,
            faces,
            symmetries: syms,
            is_symmetric,
            color,
        })
    }

    pub fn with_symmetric_flag(mut self, symmetric: bool) -> Self {
        self.is_symmetric = symmetric;
        self
    }

    pub fn load_obj(path: &Path, id: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_obj_str(&text, id)
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj_string())?;
        Ok(())
    }

    /// Parses the OBJ subset used here: `v` and triangular `f` lines, plus
    /// metadata carried in comment directives (`# class`, `# name`,
    /// `# color`, `# symmetric`, `# sym`, `# sym_axis`, `# p`). Without
    /// `# p` lines the mesh vertices double as the point set.
    pub fn from_obj_str(text: &str, default_id: usize) -> Result<Self> {
        let mut id = default_id;
        let mut name = String::from("object");
        let mut color = [0.7, 0.7, 0.7];
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        let mut points = Vec::new();
        let mut syms = Vec::new();
        let mut symmetric_flag = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let bad = |what: &str| Error::Data(format!("line {}: {what}: {raw:?}", lineno + 1));
            if let Some(rest) = line.strip_prefix('#') {
                let mut it = rest.split_whitespace();
                let Some(key) = it.next() else { continue };
                let nums: Vec<&str> = it.collect();
                let floats = || -> Result<Vec<f64>> {
                    nums.iter()
                        .map(|s| s.parse::<f64>().map_err(|_| bad("bad number")))
                        .collect()
                };
                match key {
                    "class" => id = nums.first().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad class"))?,
                    "name" => name = nums.join(" "),
                    "color" => {
                        let c = floats()?;
                        if c.len() != 3 {
                            return Err(bad("color needs 3 values"));
                        }
                        color = [c[0], c[1], c[2]];
                    }
                    "symmetric" => symmetric_flag = Some(nums.first().is_some_and(|s| *s != "0")),
                    "sym" => {
                        let v = floats()?;
                        if v.len() != 7 {
                            return Err(bad("sym needs quaternion and translation"));
                        }
                        syms.push(Pose::new(
                            Quaternion::new(v[0], v[1], v[2], v[3]),
                            Vector3::new(v[4], v[5], v[6]),
                        )?);
                    }
                    "sym_axis" => {
                        let v = floats()?;
                        if v.len() != 3 && v.len() != 4 {
                            return Err(bad("sym_axis needs an axis and optional count"));
                        }
                        let n = v.get(3).map(|&n| n as usize).unwrap_or(64);
                        syms.extend(axis_symmetries(Vector3::new(v[0], v[1], v[2]), n)?);
                    }
                    "p" => {
                        let v = floats()?;
                        if v.len() != 3 {
                            return Err(bad("point needs 3 coordinates"));
                        }
                        points.push(Vector3::new(v[0], v[1], v[2]));
                    }
                    _ => {}
                }
                continue;
            }
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let v: Vec<f64> = it
                        .take(3)
                        .map(|s| s.parse::<f64>().map_err(|_| bad("bad vertex")))
                        .collect::<Result<_>>()?;
                    if v.len() != 3 {
                        return Err(bad("vertex needs 3 coordinates"));
                    }
                    vertices.push(Vector3::new(v[0], v[1], v[2]));
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|s| {
                            s.split('/')
                                .next()
                                .and_then(|i| i.parse::<usize>().ok())
                                .filter(|&i| i >= 1)
                                .map(|i| i - 1)
                                .ok_or_else(|| bad("bad face index"))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() != 3 {
                        return Err(bad("only triangular faces are supported"));
                    }
                    faces.push([idx[0], idx[1], idx[2]]);
                }
                _ => {}
            }
        }
        if points.is_empty() {
            points = vertices.clone();
        }
        let model = Self::new(id, name, vertices, faces, points, syms, color)?;
        Ok(match symmetric_flag {
            Some(f) => model.with_symmetric_flag(f),
            None => model,
        })
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# class {}", self.id);
        let _ = writeln!(s, "# name {}", self.name);
        let _ = writeln!(s, "# color {} {} {}", self.color[0], self.color[1], self.color[2]);
        let _ = writeln!(s, "# symmetric {}", self.is_symmetric as u8);
        for sym in self.symmetries.iter().skip(1) {
            let q = sym.rotation;
            let t = sym.translation;
            let _ = writeln!(s, "# sym {} {} {} {} {} {} {}", q.w, q.x, q.y, q.z, t.x, t.y, t.z);
        }
        for p in &self.points {
            let _ = writeln!(s, "# p {} {} {}", p.x, p.y, p.z);
        }
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }
}

fn is_identity(p: &Pose) -> bool {
    p.rotation.angle_to(Quaternion::IDENTITY) < 1e-12 && p.translation.norm() < 1e-12
}

/// Maximum pairwise distance.
pub fn diameter(points: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

/// `n` rotations evenly spaced about `axis`, identity included.
pub fn axis_symmetries(axis: Vector3<f64>, n: usize) -> Result<Vec<Pose>> {
    (0..n.max(1))
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            Ok(Pose {
                rotation: Quaternion::from_axis_angle(axis, angle)?,
                translation: Vector3::zeros(),
            })
        })
        .collect()
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_surface<R: Rng>(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    count: usize,
    rng: &mut R,
) -> Vec<Vector3<f64>> {
    let mut cumulative = Vec::with_capacity(faces.len());
    let mut total = 0.0;
    for f in faces {
        let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        total += 0.5 * (b - a).cross(&(c - a)).norm();
        cumulative.push(total);
    }
    if faces.is_empty() || total <= 0.0 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let r = rng.random::<f64>() * total;
            let fi = cumulative.partition_point(|&c| c < r).min(faces.len() - 1);
            let f = faces[fi];
            let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
            a + u * (b - a) + v * (c - a)
        })
        .collect()
}
