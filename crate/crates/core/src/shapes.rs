//! Closed parametric meshes used as synthetic datasets and test fixtures.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geom::{self, Point3};
use crate::meshops::TriMesh;

/// Surface of revolution about the z axis from a list of `(radius, z)`
/// rings ordered top to bottom, closed by a pole at each end.
fn revolve(center: Point3, top: f64, bottom: f64, rings: &[(f64, f64)], slices: usize) -> TriMesh {
    let mut v = vec![geom::add(center, [0.0, 0.0, top])];
    for &(r, z) in rings {
        for j in 0..slices {
            let a = 2.0 * PI * j as f64 / slices as f64;
            v.push(geom::add(center, [r * a.cos(), r * a.sin(), z]));
        }
    }
    let bottom_idx = v.len();
    v.push(geom::add(center, [0.0, 0.0, bottom]));
    let ring = |i: usize, j: usize| 1 + i * slices + j % slices;
    let mut f = Vec::new();
    for j in 0..slices {
        f.push([0, ring(0, j), ring(0, j + 1)]);
    }
    for i in 0..rings.len() - 1 {
        for j in 0..slices {
            let (u0, u1, l0, l1) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            f.push([u0, l0, l1]);
            f.push([u0, l1, u1]);
        }
    }
    let last = rings.len() - 1;
    for j in 0..slices {
        f.push([ring(last, j), bottom_idx, ring(last, j + 1)]);
    }
    TriMesh::new(v, f).expect("revolved mesh indices are in range")
}

/// Latitude-longitude sphere with outward-facing triangles.
pub fn uv_sphere(center: Point3, radius: f64, stacks: usize, slices: usize) -> TriMesh {
    let stacks = stacks.max(2);
    let rings: Vec<(f64, f64)> = (1..stacks)
        .map(|i| {
            let t = PI * i as f64 / stacks as f64;
            (radius * t.sin(), radius * t.cos())
        })
        .collect();
    revolve(center, radius, -radius, &rings, slices.max(3))
}

/// Capsule along z: a cylinder of `half_length` on each side of the
/// center, capped by hemispheres of `radius`.
pub fn capsule(center: Point3, radius: f64, half_length: f64, stacks: usize, slices: usize) -> TriMesh {
    let half = stacks.max(1);
    let mut rings = Vec::new();
    for i in 1..=half {
        let t = 0.5 * PI * i as f64 / half as f64;
        rings.push((radius * t.sin(), half_length + radius * t.cos()));
    }
    for i in 0..half {
        let t = 0.5 * PI + 0.5 * PI * i as f64 / half as f64;
        rings.push((radius * t.sin(), -half_length + radius * t.cos()));
    }
    revolve(center, half_length + radius, -half_length - radius, &rings, slices.max(3))
}

/// Axis-aligned box with each face split into `subdivisions^2` quads.
pub fn box_mesh(center: Point3, half_extents: Point3, subdivisions: usize) -> TriMesh {
    let n = subdivisions.max(1);
    let mut index: HashMap<[usize; 3], usize> = HashMap::new();
    let mut v = Vec::new();
    let mut f = Vec::new();
    let mut vertex = |q: [usize; 3], v: &mut Vec<Point3>| -> usize {
        *index.entry(q).or_insert_with(|| {
            v.push([0, 1, 2].map(|c| center[c] + half_extents[c] * (2.0 * q[c] as f64 / n as f64 - 1.0)));
            v.len() - 1
        })
    };
    for axis in 0..3 {
        for side in [0, n] {
            let (mut u, mut w) = ((axis + 1) % 3, (axis + 2) % 3);
            if side == 0 {
                std::mem::swap(&mut u, &mut w);
            }
            for i in 0..n {
                for j in 0..n {
                    let p = |a: usize, b: usize| {
                        let mut q = [0; 3];
                        q[axis] = side;
                        q[u] = a;
                        q[w] = b;
                        q
                    };
                    let a = vertex(p(i, j), &mut v);
                    let b = vertex(p(i + 1, j), &mut v);
                    let c = vertex(p(i + 1, j + 1), &mut v);
                    let d = vertex(p(i, j + 1), &mut v);
                    f.push([a, b, c]);
                    f.push([a, c, d]);
                }
            }
        }
    }
    TriMesh::new(v, f).expect("box indices are in range")
}

pub fn torus(center: Point3, major: f64, minor: f64, rings: usize, slices: usize) -> TriMesh {
    let mut v = Vec::with_capacity(rings * slices);
    for i in 0..rings {
        let a = 2.0 * PI * i as f64 / rings as f64;
        for j in 0..slices {
            let b = 2.0 * PI * j as f64 / slices as f64;
            let r = major + minor * b.cos();
            v.push(geom::add(center, [r * a.cos(), r * a.sin(), minor * b.sin()]));
        }
    }
    let idx = |i: usize, j: usize| (i % rings) * slices + j % slices;
    let mut f = Vec::new();
    for i in 0..rings {
        for j in 0..slices {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            f.push([a, b, c]);
            f.push([a, c, d]);
        }
    }
    TriMesh::new(v, f).expect("torus indices are in range")
}

/// Parametric primitive with an analytic signed distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Sphere { center: Point3, radius: f64 },
    Box { center: Point3, half_extents: Point3 },
    Capsule { center: Point3, radius: f64, half_length: f64 },
}

impl Primitive {
    pub fn sdf(&self, p: Point3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => geom::norm(geom::sub(p, center)) - radius,
            Primitive::Box { center, half_extents } => {
                let q: Point3 = [0, 1, 2].map(|c| (p[c] - center[c]).abs() - half_extents[c]);
                let outside = geom::norm(q.map(|c| c.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Primitive::Capsule {
                center,
                radius,
                half_length,
            } => {
                let d = geom::sub(p, center);
                let z = d[2].clamp(-half_length, half_length);
                geom::norm([d[0], d[1], d[2] - z]) - radius
            }
        }
    }

    /// Tessellation with roughly `detail` segments around the primitive.
    pub fn mesh(&self, detail: usize) -> TriMesh {
        let detail = detail.max(4);
        match *self {
            Primitive::Sphere { center, radius } => uv_sphere(center, radius, detail, 2 * detail),
            Primitive::Box { center, half_extents } => box_mesh(center, half_extents, detail / 2),
            Primitive::Capsule {
                center,
                radius,
                half_length,
            } => capsule(center, radius, half_length, detail / 2, 2 * detail),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Sphere { .. } => "sphere",
            Primitive::Box { .. } => "box",
            Primitive::Capsule { .. } => "capsule",
        }
    }

    /// A random sphere, box or capsule that fits inside `[-0.85, 0.85]^3`.
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut jitter = |s: f64| [0; 3].map(|_| rng.random_range(-s..=s));
        let center = jitter(0.1);
        match rng.random_range(0..3) {
            0 => Primitive::Sphere {
                center,
                radius: rng.random_range(0.35..0.7),
            },
            1 => Primitive::Box {
                center,
                half_extents: [0; 3].map(|_| rng.random_range(0.3..0.65)),
            },
            _ => Primitive::Capsule {
                center,
                radius: rng.random_range(0.25..0.45),
                half_length: rng.random_range(0.1..0.3),
            },
        }
    }
}

/// Points drawn uniformly from a sphere's surface.
pub fn sphere_surface_points(center: Point3, radius: f64, n: usize, rng: &mut impl Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            let g: Point3 = [0; 3].map(|_| StandardNormal.sample(rng));
            geom::add(center, geom::scale(geom::normalize(g), radius))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshops::topology_check;

    fn signed_volume(m: &TriMesh) -> f64 {
        m.faces()
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| m.vertices()[i]);
                geom::dot(a, geom::cross(b, c)) / 6.0
            })
            .sum()
    }

    #[test]
    fn primitives_are_closed_and_outward() {
        let meshes = [
            uv_sphere([0.0; 3], 1.0, 16, 32),
            capsule([0.0; 3], 0.3, 0.4, 6, 16),
            box_mesh([0.0; 3], [0.5, 0.4, 0.3], 3),
            torus([0.0; 3], 0.6, 0.2, 24, 12),
        ];
        let expected_euler = [2, 2, 2, 0];
        for (m, e) in meshes.iter().zip(expected_euler) {
            let t = topology_check(m);
            assert!(t.watertight);
            assert_eq!(t.euler, e);
            assert!(signed_volume(m) > 0.0);
        }
        let v = signed_volume(&box_mesh([0.0; 3], [0.5, 0.4, 0.3], 3));
        assert!((v - 0.48).abs() < 1e-12);
    }

    #[test]
    fn analytic_sdfs() {
        let s = Primitive::Sphere { center: [0.0; 3], radius: 0.5 };
        assert!((s.sdf([1.0, 0.0, 0.0]) - 0.5).abs() < 1e-15);
        let b = Primitive::Box { center: [0.0; 3], half_extents: [0.5; 3] };
        assert!((b.sdf([0.0; 3]) + 0.5).abs() < 1e-15);
        assert!((b.sdf([1.0, 0.0, 0.0]) - 0.5).abs() < 1e-15);
        let c = Primitive::Capsule { center: [0.0; 3], radius: 0.2, half_length: 0.3 };
        assert!((c.sdf([0.0, 0.0, 0.6]) - 0.1).abs() < 1e-15);
        assert!((c.sdf([0.5, 0.0, 0.1]) - 0.3).abs() < 1e-15);
    }
}
