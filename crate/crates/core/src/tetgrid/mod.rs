//! Uniform deformable tetrahedral grids built from a body-centered cubic tiling.
//!
//! Vertices are the `(R+1)^3` lattice corners followed by the `R^3` cell
//! centers. Tetrahedra are formed only between two axis-adjacent cell
//! centers and the four corners of the face they share, so every
//! tetrahedron is congruent and the grid has no boundary-only elements.
//! The eight corners of the outer box touch no tetrahedron but are kept so
//! that the vertex set maps onto a regular cubic lattice.

pub mod embed;
mod io;
mod state;

use std::sync::Arc;

pub use embed::CubicEmbedding;
pub use io::{read_tetg, write_tetg, TETG_VERSION};
pub use state::{clip_deformations, scale_state, GridState, ScaleDirection};

use crate::error::{Error, Result};
use crate::geom::{self, Point3};

/// Default deformation bound as a multiple of the cell edge length.
pub const DEFAULT_DEFORMATION_SCALE: f64 = 0.75;
/// Deformation bound for high-resolution grids.
pub const HIGH_RES_DEFORMATION_SCALE: f64 = 0.375;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VertexKind {
    Corner,
    Center,
}

#[derive(Clone, Debug)]
pub struct TetGrid {
    resolution: usize,
    extent: f64,
    max_deformation: f64,
    positions: Vec<Point3>,
    kinds: Vec<VertexKind>,
    tets: Vec<[u32; 4]>,
    edges: Vec<[u32; 2]>,
    vertex_site: Vec<usize>,
    site_vertex: Vec<Option<u32>>,
    site_mask: Arc<[bool]>,
}

impl TetGrid {
    /// Builds the BCC grid with `resolution` cells per axis spanning
    /// `[-extent, extent]^3`.
    pub fn bcc(resolution: usize, extent: f64) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidResolution(resolution));
        }
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(Error::Parameter(format!("grid extent must be positive, got {extent}")));
        }
        let r = resolution;
        let n1 = r + 1;
        let h = 2.0 * extent / r as f64;
        let corner = |i: usize, j: usize, k: usize| (i + n1 * (j + n1 * k)) as u32;
        let center = |i: usize, j: usize, k: usize| (n1.pow(3) + i + r * (j + r * k)) as u32;

        let mut positions = Vec::with_capacity(n1.pow(3) + r.pow(3));
        let mut kinds = Vec::with_capacity(positions.capacity());
        let mut vertex_site = Vec::with_capacity(positions.capacity());
        let side = 2 * r + 1;
        let site = |x: usize, y: usize, z: usize| x + side * (y + side * z);
        for k in 0..n1 {
            for j in 0..n1 {
                for i in 0..n1 {
                    positions.push([
                        -extent + h * i as f64,
                        -extent + h * j as f64,
                        -extent + h * k as f64,
                    ]);
                    kinds.push(VertexKind::Corner);
                    vertex_site.push(site(2 * i, 2 * j, 2 * k));
                }
            }
        }
        for k in 0..r {
            for j in 0..r {
                for i in 0..r {
                    positions.push([
                        -extent + h * (i as f64 + 0.5),
                        -extent + h * (j as f64 + 0.5),
                        -extent + h * (k as f64 + 0.5),
                    ]);
                    kinds.push(VertexKind::Center);
                    vertex_site.push(site(2 * i + 1, 2 * j + 1, 2 * k + 1));
                }
            }
        }

        let mut tets = Vec::with_capacity(12 * r * r * (r - 1));
        for axis in 0..3 {
            let (b, d) = ((axis + 1) % 3, (axis + 2) % 3);
            for k in 0..r {
                for j in 0..r {
                    for i in 0..r {
                        let c = [i, j, k];
                        if c[axis] + 1 >= r {
                            continue;
                        }
                        let mut c2 = c;
                        c2[axis] += 1;
                        let a = center(c[0], c[1], c[2]);
                        let a2 = center(c2[0], c2[1], c2[2]);
                        // Face corners in cyclic order around the shared face.
                        let quad = [(0, 0), (1, 0), (1, 1), (0, 1)].map(|(ob, od)| {
                            let mut q = [0usize; 3];
                            q[axis] = c[axis] + 1;
                            q[b] = c[b] + ob;
                            q[d] = c[d] + od;
                            corner(q[0], q[1], q[2])
                        });
                        for e in 0..4 {
                            let mut tet = [a, a2, quad[e], quad[(e + 1) % 4]];
                            let p = tet.map(|v| positions[v as usize]);
                            if geom::orient3d(p[0], p[1], p[2], p[3]) < 0.0 {
                                tet.swap(2, 3);
                            }
                            tets.push(tet);
                        }
                    }
                }
            }
        }

        let mut edges: Vec<[u32; 2]> = tets
            .iter()
            .flat_map(|t| {
                [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)].map(|(x, y)| {
                    let (u, v) = (t[x], t[y]);
                    [u.min(v), u.max(v)]
                })
            })
            .collect();
        edges.sort_unstable();
        edges.dedup();

        let mut site_vertex = vec![None; side.pow(3)];
        for (v, &s) in vertex_site.iter().enumerate() {
            site_vertex[s] = Some(v as u32);
        }
        let site_mask: Arc<[bool]> = site_vertex.iter().map(Option::is_some).collect();

        Ok(Self {
            resolution,
            extent,
            max_deformation: DEFAULT_DEFORMATION_SCALE * h,
            positions,
            kinds,
            tets,
            edges,
            vertex_site,
            site_vertex,
            site_mask,
        })
    }

    /// Sets the deformation bound to `scale` cell edge lengths.
    pub fn with_deformation_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Parameter(format!(
                "deformation scale must be positive, got {scale}"
            )));
        }
        self.max_deformation = scale * self.cell_size();
        Ok(self)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    /// Cell edge length `h`.
    pub fn cell_size(&self) -> f64 {
        2.0 * self.extent / self.resolution as f64
    }

    pub fn max_deformation(&self) -> f64 {
        self.max_deformation
    }

    pub fn num_vertices(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn kinds(&self) -> &[VertexKind] {
        &self.kinds
    }

    pub fn tets(&self) -> &[[u32; 4]] {
        &self.tets
    }

    pub fn edges(&self) -> &[[u32; 2]] {
        &self.edges
    }

    /// Side length of the cubic embedding lattice, `2R + 1`.
    pub fn lattice_side(&self) -> usize {
        2 * self.resolution + 1
    }

    pub fn vertex_site(&self, v: usize) -> usize {
        self.vertex_site[v]
    }

    pub fn site_vertex(&self, site: usize) -> Option<usize> {
        self.site_vertex[site].map(|v| v as usize)
    }

    /// Occupancy mask of the embedding lattice.
    pub fn site_mask(&self) -> &Arc<[bool]> {
        &self.site_mask
    }

    /// Rest positions displaced by the state's deformation.
    pub fn deformed_positions(&self, state: &GridState) -> Vec<Point3> {
        self.positions
            .iter()
            .zip(state.deformation())
            .map(|(p, d)| [p[0] + d[0] as f64, p[1] + d[1] as f64, p[2] + d[2] as f64])
            .collect()
    }

    pub fn tet_volume(&self, positions: &[Point3], tet: usize) -> f64 {
        let t = self.tets[tet];
        geom::tet_volume(
            positions[t[0] as usize],
            positions[t[1] as usize],
            positions[t[2] as usize],
            positions[t[3] as usize],
        )
    }

    pub(crate) fn check_state(&self, state: &GridState) -> Result<()> {
        if state.len() != self.num_vertices() {
            return Err(Error::Dimension {
                expected: self.num_vertices(),
                actual: state.len(),
            });
        }
        Ok(())
    }

    /// Vertex count `(R+1)^3 + R^3`.
    pub fn expected_vertex_count(r: usize) -> usize {
        (r + 1).pow(3) + r.pow(3)
    }

    /// Tetrahedron count `12 R^2 (R-1)`.
    pub fn expected_tet_count(r: usize) -> usize {
        12 * r * r * (r - 1)
    }
}
