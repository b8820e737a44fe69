//! Static 3-d tree for exact nearest-neighbour queries.

/// Points stored in an implicit balanced layout: the median of every
/// sub-slice splits on axis `depth % 3`.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
}

impl KdTree {
    pub fn new(mut points: Vec<[f64; 3]>) -> Self {
        build(&mut points, 0);
        KdTree { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared Euclidean distance to the nearest stored point (infinite if empty).
    pub fn nearest_sq(&self, q: [f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        search(&self.points, 0, q, &mut best);
        best
    }
}

fn build(pts: &mut [[f64; 3]], depth: usize) {
    if pts.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = pts.len() / 2;
    pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    let (lo, hi) = pts.split_at_mut(mid);
    build(lo, depth + 1);
    build(&mut hi[1..], depth + 1);
}

fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn search(pts: &[[f64; 3]], depth: usize, q: [f64; 3], best: &mut f64) {
    if pts.is_empty() {
        return;
    }
    let mid = pts.len() / 2;
    let p = pts[mid];
    *best = best.min(dist_sq(p, q));
    let axis = depth % 3;
    let delta = q[axis] - p[axis];
    let (near, far) = if delta < 0.0 {
        (&pts[..mid], &pts[mid + 1..])
    } else {
        (&pts[mid + 1..], &pts[..mid])
    };
    search(near, depth + 1, q, best);
    if delta * delta < *best {
        search(far, depth + 1, q, best);
    }
}
