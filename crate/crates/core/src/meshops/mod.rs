//! Triangle meshes and the surface operations built on them.

mod accel;
mod depth;
mod obj;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use accel::{point_in_mesh, Containment, InsideTester, RayHit};
pub use depth::{raycast_depth, read_depth, write_depth, Camera, DepthView};
pub use obj::{load_obj, parse_obj, read_points, save_obj, write_obj, write_points};

use crate::error::{Error, Result};
use crate::geom::{self, Point3};

/// Default face fraction below which a connected component is discarded.
pub const DEFAULT_COMPONENT_FRACTION: f64 = 0.05;
pub const DEFAULT_SMOOTH_LAMBDA: f64 = 0.25;
pub const DEFAULT_SMOOTH_STEPS: usize = 5;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TriMesh {
    vertices: Vec<Point3>,
    faces: Vec<[usize; 3]>,
    normals: Option<Vec<Point3>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(p) = vertices.iter().find(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Geometry(format!("non-finite vertex {p:?}")));
        }
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::Geometry(format!(
                "face {f:?} references a vertex beyond {}",
                vertices.len()
            )));
        }
        Ok(Self {
            vertices,
            faces,
            normals: None,
        })
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn normals(&self) -> Option<&[Point3]> {
        self.normals.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_points(&self, f: usize) -> [Point3; 3] {
        self.faces[f].map(|i| self.vertices[i])
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.face_points(f);
        geom::triangle_area(a, b, c)
    }

    /// Area-weighted vertex normals.
    pub fn with_vertex_normals(mut self) -> Self {
        let mut n = vec![[0.0; 3]; self.vertices.len()];
        for f in &self.faces {
            let [a, b, c] = f.map(|i| self.vertices[i]);
            let fn_ = geom::cross(geom::sub(b, a), geom::sub(c, a));
            for &i in f {
                n[i] = geom::add(n[i], fn_);
            }
        }
        self.normals = Some(n.into_iter().map(geom::normalize).collect());
        self
    }

    /// Drops vertices not referenced by any face, keeping relative order.
    pub fn compacted(&self) -> Self {
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let faces = self
            .faces
            .iter()
            .map(|f| {
                f.map(|i| {
                    if remap[i] == usize::MAX {
                        remap[i] = vertices.len();
                        vertices.push(self.vertices[i]);
                    }
                    remap[i]
                })
            })
            .collect();
        Self {
            vertices,
            faces,
            normals: None,
        }
    }

    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        geom::bounds(&self.vertices)
    }

    pub fn transformed(&self, scale: f64, offset: Point3) -> Self {
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|p| geom::add(geom::scale(*p, scale), offset))
                .collect(),
            faces: self.faces.clone(),
            normals: self.normals.clone(),
        }
    }

    /// Concatenates two meshes.
    pub fn merged(&self, other: &TriMesh) -> Self {
        let base = self.vertices.len();
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut faces = self.faces.clone();
        faces.extend(other.faces.iter().map(|f| f.map(|i| i + base)));
        Self {
            vertices,
            faces,
            normals: None,
        }
    }
}

/// The similarity transform `p -> scale * p + offset` applied by
/// [`normalize_to_box`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: Point3,
}

impl Normalization {
    pub fn invert(&self, mesh: &TriMesh) -> TriMesh {
        let inv = 1.0 / self.scale;
        mesh.transformed(inv, geom::scale(self.offset, -inv))
    }
}

/// Centers the mesh's bounding box at the origin and scales it uniformly so
/// the longest side spans `[-half_width, half_width]`.
pub fn normalize_to_box(mesh: &TriMesh, half_width: f64) -> Result<(TriMesh, Normalization)> {
    let (lo, hi) = mesh
        .bounds()
        .ok_or_else(|| Error::Geometry("cannot normalize an empty mesh".into()))?;
    let center = geom::midpoint(lo, hi);
    let longest = (0..3).map(|c| hi[c] - lo[c]).fold(0.0, f64::max);
    if longest <= 0.0 {
        return Err(Error::Geometry("mesh has zero extent".into()));
    }
    let scale = 2.0 * half_width / longest;
    let offset = geom::scale(center, -scale);
    Ok((mesh.transformed(scale, offset), Normalization { scale, offset }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    seed: Option<u64>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.iter().any(|p| p.iter().any(|c| c.is_nan())) {
            return Err(Error::Geometry("point cloud contains NaN".into()));
        }
        Ok(Self { points, seed: None })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Seed used when the cloud was sampled from a surface.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}

/// One-ring neighbor lists (sorted, unique).
pub fn vertex_neighbors(mesh: &TriMesh) -> Vec<Vec<usize>> {
    let mut nbrs = vec![Vec::new(); mesh.vertices.len()];
    for f in &mesh.faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            nbrs[a].push(b);
            nbrs[b].push(a);
        }
    }
    for n in &mut nbrs {
        n.sort_unstable();
        n.dedup();
    }
    nbrs
}

/// Uniform-weight Laplacian smoothing: `v += lambda * (mean(ring) - v)`,
/// applied to all vertices simultaneously for `steps` iterations.
pub fn laplacian_smooth(mesh: &TriMesh, lambda: f64, steps: usize) -> Result<TriMesh> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("smoothing lambda {lambda} outside [0,1]")));
    }
    let nbrs = vertex_neighbors(mesh);
    let mut v = mesh.vertices.clone();
    for _ in 0..steps {
        v = v
            .iter()
            .zip(&nbrs)
            .map(|(&p, ring)| {
                if ring.is_empty() {
                    return p;
                }
                let mean = ring
                    .iter()
                    .fold([0.0; 3], |acc, &j| geom::add(acc, v[j]));
                let mean = geom::scale(mean, 1.0 / ring.len() as f64);
                geom::add(p, geom::scale(geom::sub(mean, p), lambda))
            })
            .collect();
    }
    Ok(TriMesh {
        vertices: v,
        faces: mesh.faces.clone(),
        normals: None,
    })
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            self.parent[a.max(b)] = a.min(b);
        }
    }
}

/// Component label per face; faces sharing a vertex are connected.
pub fn face_components(mesh: &TriMesh) -> (Vec<usize>, usize) {
    let mut uf = UnionFind::new(mesh.vertices.len());
    for f in &mesh.faces {
        uf.union(f[0], f[1]);
        uf.union(f[0], f[2]);
    }
    let mut label_of_root = HashMap::new();
    let labels = mesh
        .faces
        .iter()
        .map(|f| {
            let root = uf.find(f[0]);
            let next = label_of_root.len();
            *label_of_root.entry(root).or_insert(next)
        })
        .collect();
    (labels, label_of_root.len())
}

/// Removes connected components with fewer than
/// `min_face_fraction * total_faces` faces.
pub fn remove_small_components(mesh: &TriMesh, min_face_fraction: f64) -> Result<TriMesh> {
    if !(0.0..1.0).contains(&min_face_fraction) {
        return Err(Error::Parameter(format!(
            "component fraction {min_face_fraction} outside [0,1)"
        )));
    }
    let (labels, n) = face_components(mesh);
    let mut sizes = vec![0usize; n];
    for &l in &labels {
        sizes[l] += 1;
    }
    let threshold = min_face_fraction * mesh.faces.len() as f64;
    let keep: Vec<bool> = sizes.iter().map(|&s| s as f64 >= threshold).collect();
    if keep.iter().all(|&k| k) {
        return Ok(mesh.clone());
    }
    let faces = mesh
        .faces
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| keep[l])
        .map(|(f, _)| *f)
        .collect();
    Ok(TriMesh {
        vertices: mesh.vertices.clone(),
        faces,
        normals: None,
    }
    .compacted())
}

/// A surface sample: owning face and barycentric weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSample {
    pub face: usize,
    pub weights: [f64; 3],
}

/// Area-weighted face choice followed by uniform barycentric sampling.
pub fn sample_surface_locations(
    mesh: &TriMesh,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SurfaceSample>> {
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::Geometry("mesh has no non-degenerate face to sample".into()));
    }
    Ok((0..n)
        .map(|_| {
            let r = rng.random::<f64>() * total;
            let face = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
            let su = rng.random::<f64>().sqrt();
            let v = rng.random::<f64>();
            SurfaceSample {
                face,
                weights: [1.0 - su, su * (1.0 - v), su * v],
            }
        })
        .collect())
}

pub fn sample_point(mesh: &TriMesh, s: &SurfaceSample) -> Point3 {
    let p = mesh.face_points(s.face);
    [0, 1, 2].map(|c| s.weights[0] * p[0][c] + s.weights[1] * p[1][c] + s.weights[2] * p[2][c])
}

/// Samples `n` surface points; deterministic given `seed`.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locs = sample_surface_locations(mesh, n, &mut rng)?;
    Ok(PointCloud {
        points: locs.iter().map(|s| sample_point(mesh, s)).collect(),
        seed: Some(seed),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TopologyReport {
    pub watertight: bool,
    pub euler: i64,
    pub component_count: usize,
}

/// Watertight iff the mesh has faces and every undirected edge borders
/// exactly two faces. Euler characteristic counts all stored vertices.
pub fn topology_check(mesh: &TriMesh) -> TopologyReport {
    let mut edge_faces: HashMap<(usize, usize), u32> = HashMap::new();
    for f in &mesh.faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            *edge_faces.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let watertight = !mesh.faces.is_empty() && edge_faces.values().all(|&c| c == 2);
    let euler = mesh.vertices.len() as i64 - edge_faces.len() as i64 + mesh.faces.len() as i64;
    TopologyReport {
        watertight,
        euler,
        component_count: face_components(mesh).1,
    }
}

/// Total squared edge length over unique edges.
pub fn squared_edge_length(mesh: &TriMesh) -> f64 {
    vertex_neighbors(mesh)
        .iter()
        .enumerate()
        .flat_map(|(i, ring)| ring.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
        .map(|(i, j)| geom::dist2(mesh.vertices[i], mesh.vertices[j]))
        .sum()
}
