//! Ray queries against triangle meshes, accelerated by a uniform grid.

use super::TriMesh;
use crate::geom::{self, Point3};

/// Fixed, non-axis-aligned directions for parity voting.
const VOTE_DIRECTIONS: [Point3; 5] = [
    [0.5773, 0.5774, 0.5774],
    [-0.3412, 0.8121, 0.4733],
    [0.7071, -0.1928, -0.6802],
    [-0.6167, -0.5279, 0.5839],
    [0.1234, -0.9113, -0.3928],
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub face: usize,
}

/// Möller–Trumbore intersection; returns the ray parameter of a hit with
/// `t > t_min`.
#[inline]
pub(crate) fn ray_triangle(origin: Point3, dir: Point3, tri: &[Point3; 3], t_min: f64) -> Option<f64> {
    let e1 = geom::sub(tri[1], tri[0]);
    let e2 = geom::sub(tri[2], tri[0]);
    let p = geom::cross(dir, e2);
    let det = geom::dot(e1, p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = geom::sub(origin, tri[0]);
    let u = geom::dot(s, p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = geom::cross(s, e1);
    let v = geom::dot(dir, q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = geom::dot(e2, q) * inv;
    (t > t_min).then_some(t)
}

#[derive(Clone, Debug)]
struct UniformGrid {
    lo: Point3,
    cell: Point3,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl UniformGrid {
    fn build(tris: &[[Point3; 3]]) -> Self {
        let all: Vec<Point3> = tris.iter().flatten().copied().collect();
        let (mut lo, mut hi) = geom::bounds(&all).unwrap_or(([0.0; 3], [0.0; 3]));
        let pad = 1e-9 + 1e-6 * (0..3).map(|c| hi[c] - lo[c]).fold(0.0, f64::max);
        for c in 0..3 {
            lo[c] -= pad;
            hi[c] += pad;
        }
        let per_axis = ((2.0 * tris.len() as f64).cbrt().ceil() as usize).clamp(1, 64);
        let dims = [per_axis; 3];
        let cell = [0, 1, 2].map(|c| (hi[c] - lo[c]) / dims[c] as f64);
        let mut cells = vec![Vec::new(); per_axis.pow(3)];
        let cell_of = |p: f64, c: usize| (((p - lo[c]) / cell[c]).floor() as isize).clamp(0, dims[c] as isize - 1) as usize;
        for (i, t) in tris.iter().enumerate() {
            let (a, b) = geom::bounds(t).unwrap();
            let (x0, y0, z0) = (cell_of(a[0], 0), cell_of(a[1], 1), cell_of(a[2], 2));
            let (x1, y1, z1) = (cell_of(b[0], 0), cell_of(b[1], 1), cell_of(b[2], 2));
            for z in z0..=z1 {
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        cells[x + dims[0] * (y + dims[1] * z)].push(i as u32);
                    }
                }
            }
        }
        Self { lo, cell, dims, cells }
    }

    /// Walks the cells pierced by the ray in order. `visit` receives the
    /// cell's triangles and the ray parameter where the ray leaves the cell,
    /// and returns `false` to stop.
    fn traverse(&self, origin: Point3, dir: Point3, mut visit: impl FnMut(&[u32], f64) -> bool) {
        let hi: Point3 = [0, 1, 2].map(|c| self.lo[c] + self.cell[c] * self.dims[c] as f64);
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for c in 0..3 {
            if dir[c] == 0.0 {
                if origin[c] < self.lo[c] || origin[c] > hi[c] {
                    return;
                }
            } else {
                let a = (self.lo[c] - origin[c]) / dir[c];
                let b = (hi[c] - origin[c]) / dir[c];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        if t0 > t1 {
            return;
        }
        let entry = geom::add(origin, geom::scale(dir, t0));
        let mut idx = [0isize; 3];
        let mut step = [0isize; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for c in 0..3 {
            idx[c] = (((entry[c] - self.lo[c]) / self.cell[c]).floor() as isize).clamp(0, self.dims[c] as isize - 1);
            if dir[c] > 0.0 {
                step[c] = 1;
                let boundary = self.lo[c] + (idx[c] + 1) as f64 * self.cell[c];
                t_max[c] = (boundary - origin[c]) / dir[c];
                t_delta[c] = self.cell[c] / dir[c];
            } else if dir[c] < 0.0 {
                step[c] = -1;
                let boundary = self.lo[c] + idx[c] as f64 * self.cell[c];
                t_max[c] = (boundary - origin[c]) / dir[c];
                t_delta[c] = -self.cell[c] / dir[c];
            }
        }
        loop {
            let cell = idx[0] as usize + self.dims[0] * (idx[1] as usize + self.dims[1] * idx[2] as usize);
            let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            if !visit(&self.cells[cell], t_max[axis]) {
                return;
            }
            idx[axis] += step[axis];
            if idx[axis] < 0 || idx[axis] >= self.dims[axis] as isize {
                return;
            }
            t_max[axis] += t_delta[axis];
        }
    }
}

/// Result of an inside/outside query: the majority decision and the
/// number of rays (out of five) that voted inside.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Containment {
    pub inside: bool,
    pub votes: u8,
}

impl Containment {
    /// True when the rays disagreed.
    pub fn split(&self) -> bool {
        self.votes != 0 && self.votes as usize != VOTE_DIRECTIONS.len()
    }
}

/// Reusable ray-query structure over one mesh.
#[derive(Clone, Debug)]
pub struct InsideTester {
    tris: Vec<[Point3; 3]>,
    grid: UniformGrid,
}

impl InsideTester {
    pub fn new(mesh: &TriMesh) -> Self {
        let tris: Vec<[Point3; 3]> = (0..mesh.faces().len()).map(|f| mesh.face_points(f)).collect();
        let grid = UniformGrid::build(&tris);
        Self { tris, grid }
    }

    /// Number of surface crossings along the ray `origin + t dir`, `t > 0`.
    pub fn crossings(&self, origin: Point3, dir: Point3) -> usize {
        let mut candidates = Vec::new();
        self.grid.traverse(origin, dir, |ids, _| {
            candidates.extend_from_slice(ids);
            true
        });
        candidates.sort_unstable();
        candidates.dedup();
        candidates
            .iter()
            .filter(|&&i| ray_triangle(origin, dir, &self.tris[i as usize], 0.0).is_some())
            .count()
    }

    /// Parity test along five fixed directions with majority vote.
    pub fn classify(&self, p: Point3) -> Containment {
        let votes = VOTE_DIRECTIONS
            .iter()
            .filter(|&&d| self.crossings(p, geom::normalize(d)) % 2 == 1)
            .count() as u8;
        Containment {
            inside: votes as usize * 2 > VOTE_DIRECTIONS.len(),
            votes,
        }
    }

    /// Nearest hit along a ray with unit direction.
    pub fn first_hit(&self, origin: Point3, dir: Point3) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        self.grid.traverse(origin, dir, |ids, t_exit| {
            for &i in ids {
                if let Some(t) = ray_triangle(origin, dir, &self.tris[i as usize], 1e-12) {
                    if best.is_none_or(|b| t < b.t || (t == b.t && (i as usize) < b.face)) {
                        best = Some(RayHit { t, face: i as usize });
                    }
                }
            }
            best.is_none_or(|b| b.t > t_exit)
        });
        best
    }
}

/// Inside/outside classification of a single point.
pub fn point_in_mesh(mesh: &TriMesh, p: Point3) -> Containment {
    InsideTester::new(mesh).classify(p)
}
