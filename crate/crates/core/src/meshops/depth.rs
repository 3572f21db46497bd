//! Pinhole depth rendering by ray casting, and the `DPTH` depth blob.
//!
//! Blob layout (little-endian): magic `DPTH`, then `f32` focal length,
//! width, height, eye `xyz`, target `xyz`, up `xyz`, then `width * height`
//! row-major `f32` depths with misses stored as `-1`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::{InsideTester, TriMesh};
use crate::error::{Error, Result};
use crate::geom::{self, Point3};

pub const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub eye: Point3,
    pub target: Point3,
    pub up: Point3,
    /// Focal length in pixels.
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

struct Frame {
    forward: Point3,
    right: Point3,
    up: Point3,
}

impl Camera {
    fn frame(&self) -> Result<Frame> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::Parameter(format!("focal length must be positive, got {}", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Parameter("image must have at least one pixel".into()));
        }
        let f = geom::sub(self.target, self.eye);
        if geom::norm(f) == 0.0 {
            return Err(Error::Parameter("camera eye and target coincide".into()));
        }
        let forward = geom::normalize(f);
        let right = geom::cross(forward, self.up);
        if geom::norm(right) < 1e-12 {
            return Err(Error::Parameter("camera up vector is parallel to the view direction".into()));
        }
        let right = geom::normalize(right);
        Ok(Frame {
            forward,
            right,
            up: geom::cross(right, forward),
        })
    }

    /// Unit direction of the ray through the center of pixel `(px, py)`.
    pub fn pixel_ray(&self, px: usize, py: usize) -> Result<Point3> {
        let f = self.frame()?;
        Ok(self.ray_in_frame(&f, px, py))
    }

    fn ray_in_frame(&self, f: &Frame, px: usize, py: usize) -> Point3 {
        let x = px as f64 + 0.5 - 0.5 * self.width as f64;
        let y = py as f64 + 0.5 - 0.5 * self.height as f64;
        geom::normalize(geom::add(
            geom::add(geom::scale(f.forward, self.focal), geom::scale(f.right, x)),
            geom::scale(f.up, -y),
        ))
    }

    /// Pixel containing the projection of `p` and the distance from the
    /// eye, or `None` when `p` is behind the camera or off-image.
    pub fn project(&self, p: Point3) -> Result<Option<(usize, usize, f64)>> {
        let f = self.frame()?;
        let d = geom::sub(p, self.eye);
        let z = geom::dot(d, f.forward);
        if z <= 0.0 {
            return Ok(None);
        }
        let u = self.focal * geom::dot(d, f.right) / z + 0.5 * self.width as f64;
        let v = -self.focal * geom::dot(d, f.up) / z + 0.5 * self.height as f64;
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return Ok(None);
        }
        Ok(Some((u as usize, v as usize, geom::norm(d))))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthView {
    pub camera: Camera,
    /// Euclidean ray-hit distance per pixel, `+inf` on miss.
    pub depth: Vec<f64>,
}

impl DepthView {
    pub fn hit(&self, px: usize, py: usize) -> bool {
        self.depth[py * self.camera.width + px].is_finite()
    }

    pub fn depth_at(&self, px: usize, py: usize) -> f64 {
        self.depth[py * self.camera.width + px]
    }

    pub fn hit_mask(&self) -> Vec<bool> {
        self.depth.iter().map(|d| d.is_finite()).collect()
    }

    pub fn hit_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }

    /// 3D points of all hit pixels.
    pub fn back_project(&self) -> Result<Vec<Point3>> {
        let f = self.camera.frame()?;
        let w = self.camera.width;
        Ok(self
            .depth
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_finite())
            .map(|(i, &d)| {
                let dir = self.camera.ray_in_frame(&f, i % w, i / w);
                geom::add(self.camera.eye, geom::scale(dir, d))
            })
            .collect())
    }
}

/// Renders the per-pixel nearest-hit distance of `mesh`.
pub fn raycast_depth(mesh: &TriMesh, camera: &Camera) -> Result<DepthView> {
    let frame = camera.frame()?;
    if mesh.is_empty() {
        return Err(Error::Geometry("cannot render an empty mesh".into()));
    }
    let tester = InsideTester::new(mesh);
    let w = camera.width;
    let depth: Vec<f64> = (0..camera.height)
        .into_par_iter()
        .flat_map_iter(|py| {
            let tester = &tester;
            let frame = &frame;
            (0..w).map(move |px| {
                let dir = camera.ray_in_frame(frame, px, py);
                tester
                    .first_hit(camera.eye, dir)
                    .map_or(f64::INFINITY, |h| h.t)
            })
        })
        .collect();
    Ok(DepthView {
        camera: *camera,
        depth,
    })
}

pub fn encode_depth(view: &DepthView) -> Vec<u8> {
    let c = &view.camera;
    let mut buf = Vec::with_capacity(4 + 4 * (12 + view.depth.len()));
    buf.extend_from_slice(DEPTH_MAGIC);
    let header = [
        c.focal,
        c.width as f64,
        c.height as f64,
        c.eye[0],
        c.eye[1],
        c.eye[2],
        c.target[0],
        c.target[1],
        c.target[2],
        c.up[0],
        c.up[1],
        c.up[2],
    ];
    for v in header {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &d in &view.depth {
        let v = if d.is_finite() { d as f32 } else { -1.0 };
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthView> {
    let f = |i: usize| -> Result<f64> {
        bytes
            .get(4 + 4 * i..8 + 4 * i)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .ok_or_else(|| Error::Format("truncated depth blob".into()))
    };
    if bytes.get(0..4) != Some(&DEPTH_MAGIC[..]) {
        return Err(Error::Format("bad depth magic".into()));
    }
    let (width, height) = (f(1)? as usize, f(2)? as usize);
    let camera = Camera {
        focal: f(0)?,
        width,
        height,
        eye: [f(3)?, f(4)?, f(5)?],
        target: [f(6)?, f(7)?, f(8)?],
        up: [f(9)?, f(10)?, f(11)?],
    };
    if bytes.len() != 4 + 4 * (12 + width * height) {
        return Err(Error::Format("depth blob size does not match header".into()));
    }
    let depth = (0..width * height)
        .map(|i| f(12 + i).map(|d| if d < 0.0 { f64::INFINITY } else { d }))
        .collect::<Result<_>>()?;
    Ok(DepthView { camera, depth })
}

pub fn write_depth(view: &DepthView, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_depth(view)).map_err(|e| Error::file(path, e))
}

pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthView> {
    let path = path.as_ref();
    decode_depth(&fs::read(path).map_err(|e| Error::file(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes;

    fn camera(eye: Point3, target: Point3) -> Camera {
        Camera {
            eye,
            target,
            up: [0.0, 1.0, 0.0],
            focal: 40.0,
            width: 33,
            height: 33,
        }
    }

    #[test]
    fn sphere_center_depth() {
        let m = shapes::uv_sphere([0.0; 3], 1.0, 64, 128);
        let v = raycast_depth(&m, &camera([0.0, 0.0, 3.0], [0.0; 3])).unwrap();
        assert!((v.depth_at(16, 16) - 2.0).abs() < 1e-3, "{}", v.depth_at(16, 16));
        assert!(!v.hit(0, 0));
    }

    #[test]
    fn looking_away_misses_everything() {
        let m = shapes::uv_sphere([0.0; 3], 1.0, 16, 32);
        let v = raycast_depth(&m, &camera([0.0, 0.0, 3.0], [0.0, 0.0, 6.0])).unwrap();
        assert_eq!(v.hit_count(), 0);
    }

    #[test]
    fn deterministic_and_validated() {
        let m = shapes::box_mesh([0.0; 3], [0.5; 3], 2);
        let cam = camera([1.5, 1.2, 2.0], [0.0; 3]);
        let a = raycast_depth(&m, &cam).unwrap();
        let b = raycast_depth(&m, &cam).unwrap();
        assert!(a.depth.iter().zip(&b.depth).all(|(x, y)| x.to_bits() == y.to_bits()));
        let bad = Camera { focal: 0.0, ..cam };
        assert!(matches!(raycast_depth(&m, &bad), Err(Error::Parameter(_))));
    }

    #[test]
    fn hits_back_project_onto_surface_and_agree_with_inside_test() {
        let m = shapes::uv_sphere([0.0; 3], 0.7, 24, 48);
        let cam = camera([0.3, 0.2, 2.5], [0.0; 3]);
        let v = raycast_depth(&m, &cam).unwrap();
        let tester = InsideTester::new(&m);
        let f = cam.frame().unwrap();
        for py in 0..cam.height {
            for px in 0..cam.width {
                if !v.hit(px, py) {
                    continue;
                }
                let dir = cam.ray_in_frame(&f, px, py);
                let d = v.depth_at(px, py);
                let on = geom::add(cam.eye, geom::scale(dir, d));
                assert!((geom::norm(on) - 0.7).abs() < 0.01);
                // slightly past the hit is inside the closed surface
                let past = geom::add(cam.eye, geom::scale(dir, d + 1e-4));
                assert!(tester.classify(past).inside);
                let before = geom::add(cam.eye, geom::scale(dir, d - 1e-4));
                assert!(!tester.classify(before).inside);
            }
        }
    }

    #[test]
    fn projection_inverts_pixel_rays() {
        let cam = camera([0.0, 0.0, 3.0], [0.0; 3]);
        let dir = cam.pixel_ray(5, 20).unwrap();
        let p = geom::add(cam.eye, geom::scale(dir, 2.0));
        let (px, py, d) = cam.project(p).unwrap().unwrap();
        assert_eq!((px, py), (5, 20));
        assert!((d - 2.0).abs() < 1e-12);
        assert!(cam.project([0.0, 0.0, 5.0]).unwrap().is_none());
    }

    #[test]
    fn blob_round_trip() {
        let m = shapes::uv_sphere([0.0; 3], 0.5, 8, 16);
        let v = raycast_depth(&m, &camera([0.0, 0.0, 2.0], [0.0; 3])).unwrap();
        let b = encode_depth(&v);
        assert_eq!(&b[..4], b"DPTH");
        let back = decode_depth(&b).unwrap();
        assert_eq!(back.hit_mask(), v.hit_mask());
        for (a, b) in back.depth.iter().zip(&v.depth) {
            if b.is_finite() {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!(decode_depth(&b[..b.len() - 1]).is_err());
    }
}
