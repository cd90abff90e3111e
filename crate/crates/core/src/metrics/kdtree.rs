use nalgebra::Vector3;

/// Static 3-d tree for exact nearest-neighbor queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    pts: Vec<[f64; 3]>,
    axis: Vec<u8>,
    index: Vec<usize>,
}

pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut items: Vec<([f64; 3], usize)> = points.iter().enumerate().map(|(i, p)| ([p.x, p.y, p.z], i)).collect();
        let mut axis = vec![0u8; items.len()];
        build(&mut items, &mut axis, 0);
        Self {
            pts: items.iter().map(|(p, _)| *p).collect(),
            index: items.iter().map(|(_, i)| *i).collect(),
            axis,
        }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Original index and squared distance of the closest point.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.pts.is_empty() {
            return None;
        }
        let q = [q.x, q.y, q.z];
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, self.pts.len(), &q, &mut best);
        Some((self.index[best.0], best.1))
    }

    fn search(&self, lo: usize, hi: usize, q: &[f64; 3], best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let d = dist2(q, &self.pts[mid]);
        if d < best.1 {
            *best = (mid, d);
        }
        let a = self.axis[mid] as usize;
        let diff = q[a] - self.pts[mid][a];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(near.0, near.1, q, best);
        if diff * diff < best.1 {
            self.search(far.0, far.1, q, best);
        }
    }
}

fn build(items: &mut [([f64; 3], usize)], axis: &mut [u8], offset: usize) {
    if items.len() <= 1 {
        return;
    }
    let mut spread = [0.0; 3];
    for (a, s) in spread.iter_mut().enumerate() {
        let (mn, mx) = items
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), (p, _)| (mn.min(p[a]), mx.max(p[a])));
        *s = mx - mn;
    }
    let a = (0..3).max_by(|&i, &j| spread[i].total_cmp(&spread[j])).unwrap();
    let mid = items.len() / 2;
    items.select_nth_unstable_by(mid, |x, y| x.0[a].total_cmp(&y.0[a]));
    axis[offset + mid] = a as u8;
    let (left, right) = items.split_at_mut(mid);
    build(left, axis, offset);
    build(&mut right[1..], axis, offset + mid + 1);
}
