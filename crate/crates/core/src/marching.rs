//! Marching-tetrahedra isosurface extraction.
//!
//! The SDF inside a tetrahedron is the barycentric interpolation of its
//! vertex values, so the surface inside a sign-changing tetrahedron is
//! exactly planar and crosses each sign-changing edge at the zero of the
//! linear interpolant.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::geom::{self, Point3};
use crate::meshops::TriMesh;
use crate::tetgrid::{GridState, TetGrid};

/// Exact zeros are pushed to this value before extraction.
pub const ZERO_SDF_REPLACEMENT: f64 = -1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseClass {
    Empty,
    OneVsThree,
    TwoVsTwo,
}

/// Sign configuration of one tetrahedron. Bit `i` is set when vertex `i`
/// has a non-negative SDF.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SignConfig(pub u8);

impl SignConfig {
    pub fn from_sdf(s: [f64; 4]) -> Self {
        let mut code = 0u8;
        for (i, v) in s.iter().enumerate() {
            if *v >= 0.0 {
                code |= 1 << i;
            }
        }
        SignConfig(code)
    }

    pub fn class(self) -> CaseClass {
        match self.0.count_ones() {
            0 | 4 => CaseClass::Empty,
            1 | 3 => CaseClass::OneVsThree,
            _ => CaseClass::TwoVsTwo,
        }
    }

    /// Triangles for this case as triples of local edges `(i, j)`.
    pub fn triangles(self) -> &'static [[(u8, u8); 3]] {
        &case_table()[self.0 as usize]
    }
}

fn is_even_permutation(p: [u8; 4]) -> bool {
    let mut inversions = 0;
    for i in 0..4 {
        for j in i + 1..4 {
            if p[i] > p[j] {
                inversions += 1;
            }
        }
    }
    inversions % 2 == 0
}

/// Builds the 16-case table from the vertex ordering of a positively
/// oriented tetrahedron. For an even permutation `(a,b,c,d)` the face
/// `(b,c,d)` faces away from `a`; triangle winding follows that rule so
/// normals point from the negative side to the positive side.
fn case_table() -> &'static [Vec<[(u8, u8); 3]>; 16] {
    static TABLE: OnceLock<[Vec<[(u8, u8); 3]>; 16]> = OnceLock::new();
    TABLE.get_or_init(|| {
        std::array::from_fn(|code| {
            let code = code as u8;
            let pos: Vec<u8> = (0..4).filter(|i| code & (1 << i) != 0).collect();
            let neg: Vec<u8> = (0..4).filter(|i| code & (1 << i) == 0).collect();
            let e = |x: u8, y: u8| (x.min(y), x.max(y));
            match pos.len() {
                1 | 3 => {
                    let (lone, rest, lone_negative) = if pos.len() == 1 {
                        (pos[0], neg, false)
                    } else {
                        (neg[0], pos, true)
                    };
                    let mut p = [lone, rest[0], rest[1], rest[2]];
                    if !is_even_permutation(p) {
                        p.swap(2, 3);
                    }
                    let [a, b, c, d] = p;
                    if lone_negative {
                        vec![[e(a, b), e(a, c), e(a, d)]]
                    } else {
                        vec![[e(a, b), e(a, d), e(a, c)]]
                    }
                }
                2 => {
                    let mut p = [neg[0], neg[1], pos[0], pos[1]];
                    if !is_even_permutation(p) {
                        p.swap(2, 3);
                    }
                    let [a, b, c, d] = p;
                    vec![
                        [e(a, c), e(a, d), e(b, d)],
                        [e(a, c), e(b, d), e(b, c)],
                    ]
                }
                _ => Vec::new(),
            }
        })
    })
}

/// Barycentric interpolation `sum(a_i * s_i)`.
pub fn interpolate_sdf(weights: [f64; 4], sdf: [f64; 4]) -> Result<f64> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("barycentric weights sum to {sum}")));
    }
    if weights.iter().any(|a| !(-1e-12..=1.0 + 1e-12).contains(a)) {
        return Err(Error::Domain(format!("barycentric weights {weights:?} outside [0,1]")));
    }
    Ok(weights.iter().zip(sdf).map(|(a, s)| a * s).sum())
}

/// Barycentric coordinates of `p` with respect to tetrahedron `x`.
pub fn barycentric(p: Point3, x: [Point3; 4]) -> Result<[f64; 4]> {
    let vol = geom::orient3d(x[0], x[1], x[2], x[3]);
    if vol == 0.0 {
        return Err(Error::Geometry("degenerate tetrahedron".into()));
    }
    let a1 = geom::orient3d(x[0], p, x[2], x[3]) / vol;
    let a2 = geom::orient3d(x[0], x[1], p, x[3]) / vol;
    let a3 = geom::orient3d(x[0], x[1], x[2], p) / vol;
    Ok([1.0 - a1 - a2 - a3, a1, a2, a3])
}

/// The zero of the linear interpolant along edge `(v_a, v_b)`:
/// `(v_a s_b - v_b s_a) / (s_b - s_a)`.
pub fn edge_zero_crossing(v_a: Point3, s_a: f64, v_b: Point3, s_b: f64) -> Result<Point3> {
    if s_a == 0.0 || s_b == 0.0 || (s_a > 0.0) == (s_b > 0.0) {
        return Err(Error::NoCrossing { s_a, s_b });
    }
    Ok(crossing_unchecked(v_a, s_a, v_b, s_b))
}

#[inline]
pub(crate) fn crossing_unchecked(v_a: Point3, s_a: f64, v_b: Point3, s_b: f64) -> Point3 {
    let inv = 1.0 / (s_b - s_a);
    [0, 1, 2].map(|c| (v_a[c] * s_b - v_b[c] * s_a) * inv)
}

/// Displacement of a crossing vertex when both endpoint SDFs shift by `eps`:
/// `eps (v_a - v_b) / (s_b - s_a)`.
pub fn vertex_noise_delta(v_a: Point3, v_b: Point3, s_a: f64, s_b: f64, eps: f64) -> Result<Point3> {
    if s_a == s_b {
        return Err(Error::Division("equal endpoint SDF values".into()));
    }
    let k = eps / (s_b - s_a);
    Ok(geom::scale(geom::sub(v_a, v_b), k))
}

/// Connectivity of the zero surface, determined by SDF signs alone.
///
/// Surface vertices are the sign-changing grid edges (ordered by first
/// appearance while scanning tetrahedra); faces index into that list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurfaceTopology {
    pub edges: Vec<[u32; 2]>,
    pub faces: Vec<[u32; 3]>,
    /// Owning tetrahedron of each face.
    pub face_tets: Vec<u32>,
}

fn prepared_sdf(state: &GridState) -> Vec<f64> {
    state
        .sdf()
        .iter()
        .map(|&s| if s == 0.0 { ZERO_SDF_REPLACEMENT } else { s as f64 })
        .collect()
}

impl SurfaceTopology {
    pub fn from_sdf(grid: &TetGrid, sdf: &[f64]) -> Self {
        let mut key_to_vertex: HashMap<[u32; 2], u32> = HashMap::new();
        let mut edges = Vec::new();
        let mut faces = Vec::new();
        let mut face_tets = Vec::new();
        for (ti, tet) in grid.tets().iter().enumerate() {
            let s = tet.map(|v| sdf[v as usize]);
            let config = SignConfig::from_sdf(s);
            for tri in config.triangles() {
                let face = tri.map(|(i, j)| {
                    let (u, v) = (tet[i as usize], tet[j as usize]);
                    let key = [u.min(v), u.max(v)];
                    *key_to_vertex.entry(key).or_insert_with(|| {
                        edges.push(key);
                        (edges.len() - 1) as u32
                    })
                });
                faces.push(face);
                face_tets.push(ti as u32);
            }
        }
        Self {
            edges,
            faces,
            face_tets,
        }
    }

    pub fn from_state(grid: &TetGrid, state: &GridState) -> Self {
        Self::from_sdf(grid, &prepared_sdf(state))
    }

    /// Crossing points on the given (deformed) vertex positions.
    pub fn vertex_positions(&self, positions: &[Point3], sdf: &[f64]) -> Vec<Point3> {
        self.edges
            .iter()
            .map(|&[a, b]| {
                let (a, b) = (a as usize, b as usize);
                crossing_unchecked(positions[a], sdf[a], positions[b], sdf[b])
            })
            .collect()
    }
}

/// Extracts the zero surface of `state` as an indexed triangle mesh.
///
/// Crossing vertices are computed on deformed positions and shared between
/// tetrahedra through canonical edge keys; zero-area triangles are dropped.
pub fn extract_mesh(grid: &TetGrid, state: &GridState) -> Result<TriMesh> {
    grid.check_state(state)?;
    let sdf = prepared_sdf(state);
    let topo = SurfaceTopology::from_sdf(grid, &sdf);
    let positions = grid.deformed_positions(state);
    let vertices = topo.vertex_positions(&positions, &sdf);
    let faces: Vec<[usize; 3]> = topo
        .faces
        .iter()
        .map(|f| f.map(|i| i as usize))
        .filter(|f| geom::triangle_area(vertices[f[0]], vertices[f[1]], vertices[f[2]]) > 0.0)
        .collect();
    let mesh = TriMesh::new(vertices, faces)?;
    Ok(if mesh.faces().len() < topo.faces.len() {
        mesh.compacted()
    } else {
        mesh
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshops::topology_check;

    #[test]
    fn table_classes() {
        let mut counts = [0; 3];
        for code in 0..16u8 {
            let c = SignConfig(code);
            let n = c.triangles().len();
            match c.class() {
                CaseClass::Empty => {
                    counts[0] += 1;
                    assert_eq!(n, 0)
                }
                CaseClass::OneVsThree => {
                    counts[1] += 1;
                    assert_eq!(n, 1)
                }
                CaseClass::TwoVsTwo => {
                    counts[2] += 1;
                    assert_eq!(n, 2)
                }
            }
        }
        assert_eq!(counts, [2, 8, 6]);
    }

    #[test]
    fn table_winding_points_to_positive_side() {
        // Reference positively oriented tetrahedron.
        let x: [Point3; 4] = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(geom::orient3d(x[0], x[1], x[2], x[3]) > 0.0);
        for code in 1..15u8 {
            let s: [f64; 4] = std::array::from_fn(|i| if code & (1 << i) != 0 { 1.0 } else { -1.0 });
            let mut pos_c = [0.0; 3];
            let mut neg_c = [0.0; 3];
            let np = code.count_ones() as f64;
            for i in 0..4 {
                if s[i] > 0.0 {
                    pos_c = geom::add(pos_c, geom::scale(x[i], 1.0 / np));
                } else {
                    neg_c = geom::add(neg_c, geom::scale(x[i], 1.0 / (4.0 - np)));
                }
            }
            let dir = geom::sub(pos_c, neg_c);
            for tri in SignConfig(code).triangles() {
                let p = tri.map(|(i, j)| {
                    crossing_unchecked(x[i as usize], s[i as usize], x[j as usize], s[j as usize])
                });
                let n = geom::cross(geom::sub(p[1], p[0]), geom::sub(p[2], p[0]));
                assert!(geom::dot(n, dir) > 0.0, "code {code}");
            }
        }
    }

    #[test]
    fn interpolation_examples() {
        assert_eq!(interpolate_sdf([1.0, 0.0, 0.0, 0.0], [3.0, 9.0, 9.0, 9.0]).unwrap(), 3.0);
        assert_eq!(interpolate_sdf([0.25; 4], [1.0, 1.0, -1.0, -1.0]).unwrap(), 0.0);
        assert_eq!(interpolate_sdf([0.5, 0.5, 0.0, 0.0], [-1.0, 3.0, 7.0, 7.0]).unwrap(), 1.0);
        assert!(matches!(
            interpolate_sdf([0.5, 0.6, 0.0, 0.0], [0.0; 4]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn barycentric_round_trip() {
        let x: [Point3; 4] = [[0.1, 0.0, 0.0], [1.0, 0.2, 0.0], [0.0, 1.0, 0.3], [0.0, 0.1, 1.0]];
        let a = [0.1, 0.2, 0.3, 0.4];
        let p = (0..4).fold([0.0; 3], |acc, i| geom::add(acc, geom::scale(x[i], a[i])));
        let b = barycentric(p, x).unwrap();
        for i in 0..4 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn crossing_examples() {
        let p = edge_zero_crossing([0.0; 3], -1.0, [1.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(p, [0.5, 0.0, 0.0]);
        let p = edge_zero_crossing([0.0; 3], -1.0, [2.0, 0.0, 0.0], 3.0).unwrap();
        assert_eq!(p, [0.5, 0.0, 0.0]);
        assert!(matches!(
            edge_zero_crossing([0.0; 3], 1.0, [1.0, 0.0, 0.0], 1.0),
            Err(Error::NoCrossing { .. })
        ));
        assert!(edge_zero_crossing([0.0; 3], 0.0, [1.0, 0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn noise_delta_examples() {
        let d = vertex_noise_delta([0.0; 3], [2.0, 0.0, 0.0], -1.0, 3.0, 0.1).unwrap();
        assert!((d[0] + 0.05).abs() < 1e-15 && d[1] == 0.0 && d[2] == 0.0);
        let d = vertex_noise_delta([0.0; 3], [2.0, 0.0, 0.0], -1.0, 1.0, 0.0).unwrap();
        assert_eq!(d.map(f64::abs), [0.0; 3]);
        let d = vertex_noise_delta([0.0; 3], [0.0, 3.0, 4.0], -1.0, 1.0, 0.2).unwrap();
        assert!((geom::norm(d) - 0.2 * 5.0 / 2.0).abs() < 1e-15);
        assert!(matches!(
            vertex_noise_delta([0.0; 3], [1.0; 3], 2.0, 2.0, 0.1),
            Err(Error::Division(_))
        ));
    }

    fn sphere_state(grid: &TetGrid, r: f64) -> GridState {
        let sdf = grid
            .positions()
            .iter()
            .map(|p| (geom::norm(*p) - r) as f32)
            .collect();
        GridState::new(vec![[0.0; 3]; grid.num_vertices()], sdf).unwrap()
    }

    #[test]
    fn all_positive_is_empty() {
        let g = TetGrid::bcc(3, 1.0).unwrap();
        let s = GridState::new(vec![[0.0; 3]; g.num_vertices()], vec![0.5; g.num_vertices()]).unwrap();
        let m = extract_mesh(&g, &s).unwrap();
        assert!(m.faces().is_empty() && m.vertices().is_empty());
    }

    #[test]
    fn sphere_is_closed_outward_manifold() {
        let g = TetGrid::bcc(16, 1.0).unwrap();
        let m = extract_mesh(&g, &sphere_state(&g, 0.6)).unwrap();
        let topo = topology_check(&m);
        assert!(topo.watertight);
        assert_eq!(topo.euler, 2);
        assert_eq!(topo.component_count, 1);
        for f in m.faces() {
            let p = f.map(|i| m.vertices()[i]);
            let n = geom::cross(geom::sub(p[1], p[0]), geom::sub(p[2], p[0]));
            let c = geom::scale(geom::add(geom::add(p[0], p[1]), p[2]), 1.0 / 3.0);
            assert!(geom::dot(n, c) > 0.0);
        }
    }

    #[test]
    fn torus_has_genus_one() {
        let g = TetGrid::bcc(20, 1.0).unwrap();
        let sdf = g
            .positions()
            .iter()
            .map(|p| {
                let q = (p[0] * p[0] + p[1] * p[1]).sqrt() - 0.55;
                ((q * q + p[2] * p[2]).sqrt() - 0.25) as f32
            })
            .collect();
        let s = GridState::new(vec![[0.0; 3]; g.num_vertices()], sdf).unwrap();
        let topo = topology_check(&extract_mesh(&g, &s).unwrap());
        assert!(topo.watertight);
        assert_eq!(topo.euler, 0);
    }

    #[test]
    fn exact_zero_is_treated_as_negative() {
        let g = TetGrid::bcc(2, 1.0).unwrap();
        let mut sdf = vec![1.0f32; g.num_vertices()];
        let center = g.num_vertices() - 1;
        sdf[center] = 0.0;
        let s = GridState::new(vec![[0.0; 3]; g.num_vertices()], sdf).unwrap();
        let m = extract_mesh(&g, &s).unwrap();
        assert!(!m.faces().is_empty());
        assert!(m.vertices().iter().all(|v| v.iter().all(|c| c.is_finite())));
    }

    #[test]
    fn extraction_is_deterministic() {
        let g = TetGrid::bcc(8, 1.0).unwrap();
        let s = sphere_state(&g, 0.5);
        assert_eq!(extract_mesh(&g, &s).unwrap(), extract_mesh(&g, &s).unwrap());
    }
}
