//! Fitting grid states to ground-truth geometry: geometric sign fields
//! followed by Chamfer-driven optimization of the deformations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Point3};
use crate::marching::{extract_mesh, SurfaceTopology};
use crate::meshops::{
    load_obj, normalize_to_box, sample_point, sample_surface, sample_surface_locations, DepthView, InsideTester,
    Normalization, TriMesh,
};
use crate::metrics::{chamfer, NearestIndex};
use crate::tetgrid::{write_tetg, GridState, TetGrid};

/// Halvings tried before an update is rejected.
const MAX_HALVINGS: usize = 8;
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 50;
/// Fraction of split inside/outside votes above which a warning is raised.
const SPLIT_VOTE_WARNING: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: usize,
    /// Surface points drawn per side for each Chamfer evaluation.
    pub samples: usize,
    /// SDF regularizer weight, decayed linearly from start to end. Only
    /// recorded: with frozen signs the term is constant.
    pub sdf_weight_start: f64,
    pub sdf_weight_end: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            iterations: 500,
            samples: 4096,
            sdf_weight_start: 0.2,
            sdf_weight_end: 0.01,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(format!("fit config: {m}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.beta1 <= 0.0 || self.beta2 <= 0.0 {
            return bad("moment coefficients must lie in (0, 1)");
        }
        if self.samples == 0 {
            return bad("sample count must be positive");
        }
        if !(self.sdf_weight_end > 0.0) || self.sdf_weight_end > self.sdf_weight_start {
            return bad("SDF weight schedule must be positive and non-increasing");
        }
        Ok(())
    }

    /// SDF regularizer weight at iteration `i`.
    pub fn sdf_weight(&self, i: usize) -> f64 {
        if self.iterations <= 1 {
            return self.sdf_weight_start;
        }
        let u = (i as f64 / (self.iterations - 1) as f64).min(1.0);
        self.sdf_weight_start + u * (self.sdf_weight_end - self.sdf_weight_start)
    }
}

/// One optimizer iteration: the loss on the iteration's samples before and
/// after the accepted update, and the number of step halvings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitStep {
    pub before: f64,
    pub after: f64,
    pub halvings: usize,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Chamfer distance of the sign-only (midpoint) surface.
    pub initial_chamfer: f64,
    pub final_chamfer: f64,
    /// Sign-pass loss followed by the per-iteration loss after each update.
    pub trace: Vec<f64>,
    pub steps: Vec<FitStep>,
    pub iterations: usize,
    /// Vertices whose sign differs between the sign pass and the result.
    pub sign_flips: usize,
    pub split_votes: usize,
    pub warnings: Vec<String>,
}

/// Result of the sign pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SignFit {
    pub state: GridState,
    /// Vertices whose inside/outside rays disagreed.
    pub split_votes: usize,
    pub warnings: Vec<String>,
}

/// Normalized sign field from exact inside/outside tests at the rest
/// positions: `-1` inside, `+1` outside, zero deformation.
pub fn fit_signs(grid: &TetGrid, gt: &TriMesh) -> Result<SignFit> {
    let Some((lo, hi)) = gt.bounds().filter(|_| !gt.faces().is_empty()) else {
        return Err(Error::Geometry("cannot fit an empty mesh".into()));
    };
    let e = grid.extent();
    if lo.iter().chain(&hi).any(|c| c.abs() > e) {
        return Err(Error::Geometry(format!(
            "mesh bounds {lo:?}..{hi:?} exceed the grid extent {e}"
        )));
    }
    let tester = InsideTester::new(gt);
    let votes: Vec<_> = grid.positions().par_iter().map(|&p| tester.classify(p)).collect();
    let split_votes = votes.iter().filter(|c| c.split()).count();
    let sdf = votes.iter().map(|c| if c.inside { -1.0 } else { 1.0 }).collect();
    let state = GridState::normalized(vec![[0.0; 3]; grid.num_vertices()], sdf)?;
    let mut warnings = Vec::new();
    if split_votes as f64 > SPLIT_VOTE_WARNING * votes.len() as f64 {
        warnings.push(format!(
            "{split_votes} of {} vertices had split inside/outside votes; the mesh may be open",
            votes.len()
        ));
    }
    Ok(SignFit {
        state,
        split_votes,
        warnings,
    })
}

/// The part of the zero surface being optimized, with vertices as
/// midpoints of deformed crossing edges.
struct SurfaceProblem<'a> {
    rest: &'a [Point3],
    edges: Vec<[usize; 2]>,
    faces: Vec<[usize; 3]>,
}

impl<'a> SurfaceProblem<'a> {
    /// Uses the faces of `topo` accepted by `keep`, re-indexing edges.
    fn new(grid: &'a TetGrid, topo: &SurfaceTopology, keep: impl Fn(&[u32; 3]) -> bool) -> Self {
        let mut remap = vec![usize::MAX; topo.edges.len()];
        let mut edges = Vec::new();
        let mut faces = Vec::new();
        for f in topo.faces.iter().filter(|f| keep(f)) {
            faces.push(f.map(|e| {
                let e = e as usize;
                if remap[e] == usize::MAX {
                    remap[e] = edges.len();
                    let [a, b] = topo.edges[e];
                    edges.push([a as usize, b as usize]);
                }
                remap[e]
            }));
        }
        Self {
            rest: grid.positions(),
            edges,
            faces,
        }
    }

    fn vertices(&self, d: &[Point3]) -> Vec<Point3> {
        self.edges
            .iter()
            .map(|&[a, b]| geom::midpoint(geom::add(self.rest[a], d[a]), geom::add(self.rest[b], d[b])))
            .collect()
    }

    fn mesh(&self, d: &[Point3]) -> TriMesh {
        TriMesh::new(self.vertices(d), self.faces.clone()).expect("surface faces index crossing edges")
    }

    /// Chamfer loss of fixed surface samples against `target`, and its
    /// gradient with respect to all deformations when requested.
    fn loss(
        &self,
        d: &[Point3],
        samples: &[crate::meshops::SurfaceSample],
        target: &[Point3],
        target_index: &NearestIndex,
        grad: Option<&mut [Point3]>,
    ) -> f64 {
        let v = self.vertices(d);
        let x: Vec<Point3> = samples
            .iter()
            .map(|s| {
                let f = self.faces[s.face];
                [0, 1, 2].map(|c| s.weights[0] * v[f[0]][c] + s.weights[1] * v[f[1]][c] + s.weights[2] * v[f[2]][c])
            })
            .collect();
        let x_index = NearestIndex::new(&x).expect("samples are non-empty");
        let fwd: Vec<(usize, f64)> = x.par_iter().map(|p| target_index.nearest(p)).collect();
        let bwd: Vec<(usize, f64)> = target.par_iter().map(|p| x_index.nearest(p)).collect();
        let (nx, ny) = (x.len() as f64, target.len() as f64);
        let loss = fwd.iter().map(|m| m.1).sum::<f64>() / nx + bwd.iter().map(|m| m.1).sum::<f64>() / ny;
        if let Some(grad) = grad {
            let mut gx = vec![[0.0; 3]; x.len()];
            for (j, &(k, _)) in fwd.iter().enumerate() {
                gx[j] = geom::scale(geom::sub(x[j], target[k]), 2.0 / nx);
            }
            for (i, &(j, _)) in bwd.iter().enumerate() {
                gx[j] = geom::add(gx[j], geom::scale(geom::sub(x[j], target[i]), 2.0 / ny));
            }
            let mut gv = vec![[0.0; 3]; v.len()];
            for (s, g) in samples.iter().zip(&gx) {
                for (k, &vi) in self.faces[s.face].iter().enumerate() {
                    gv[vi] = geom::add(gv[vi], geom::scale(*g, s.weights[k]));
                }
            }
            grad.iter_mut().for_each(|g| *g = [0.0; 3]);
            for (&[a, b], g) in self.edges.iter().zip(&gv) {
                let half = geom::scale(*g, 0.5);
                grad[a] = geom::add(grad[a], half);
                grad[b] = geom::add(grad[b], half);
            }
        }
        loss
    }
}

struct Adam {
    m: Vec<Point3>,
    v: Vec<Point3>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![[0.0; 3]; n],
            v: vec![[0.0; 3]; n],
            t: 0,
        }
    }

    fn direction(&mut self, g: &[Point3], cfg: &FitConfig) -> Vec<Point3> {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        let mut out = vec![[0.0; 3]; g.len()];
        for i in 0..g.len() {
            for c in 0..3 {
                self.m[i][c] = b1 * self.m[i][c] + (1.0 - b1) * g[i][c];
                self.v[i][c] = b2 * self.v[i][c] + (1.0 - b2) * g[i][c] * g[i][c];
                out[i][c] = -cfg.learning_rate * (self.m[i][c] / c1) / ((self.v[i][c] / c2).sqrt() + 1e-8);
            }
        }
        out
    }
}

/// Target point source: a mesh resampled every iteration or a fixed cloud.
enum Target<'a> {
    Mesh(&'a TriMesh),
    Cloud(&'a [Point3]),
}

fn run_optimizer(
    grid: &TetGrid,
    state: &GridState,
    problem: &SurfaceProblem,
    movable: &[bool],
    target: Target,
    cfg: &FitConfig,
) -> Result<(GridState, Vec<f64>, Vec<FitStep>)> {
    let max_d = grid.max_deformation();
    let mut d: Vec<Point3> = state.deformation().iter().map(|v| v.map(f64::from)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(d.len());
    let mut grad = vec![[0.0; 3]; d.len()];
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut steps = Vec::with_capacity(cfg.iterations);
    let mut initial = None;
    let mut above = 0;
    for it in 0..cfg.iterations {
        let samples = sample_surface_locations(&problem.mesh(&d), cfg.samples, &mut rng)?;
        let tgt: Vec<Point3> = match target {
            Target::Mesh(m) => {
                let locs = sample_surface_locations(m, cfg.samples, &mut rng)?;
                locs.iter().map(|s| sample_point(m, s)).collect()
            }
            Target::Cloud(c) => c.to_vec(),
        };
        let index = NearestIndex::new(&tgt)?;
        let before = problem.loss(&d, &samples, &tgt, &index, Some(&mut grad));
        if !before.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                trace,
            });
        }
        let initial = *initial.get_or_insert(before);
        if trace.is_empty() {
            trace.push(before);
        }
        for (g, &m) in grad.iter_mut().zip(movable) {
            if !m {
                *g = [0.0; 3];
            }
        }
        let dir = adam.direction(&grad, cfg);
        let mut scale = 1.0;
        let mut record = FitStep {
            before,
            after: before,
            halvings: 0,
            accepted: false,
        };
        for halvings in 0..=MAX_HALVINGS {
            let trial: Vec<Point3> = d
                .iter()
                .zip(&dir)
                .map(|(p, s)| [0, 1, 2].map(|c| (p[c] + scale * s[c]).clamp(-max_d, max_d)))
                .collect();
            let after = problem.loss(&trial, &samples, &tgt, &index, None);
            if after <= before {
                d = trial;
                record = FitStep {
                    before,
                    after,
                    halvings,
                    accepted: true,
                };
                break;
            }
            scale *= 0.5;
        }
        trace.push(record.after);
        steps.push(record);
        if record.before > DIVERGENCE_FACTOR * initial {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence {
                    iteration: it,
                    trace,
                });
            }
        } else {
            above = 0;
        }
    }
    let mut out = state.clone();
    for (o, p) in out.deformation_mut().iter_mut().zip(&d) {
        *o = p.map(|c| c as f32);
    }
    out.clip_in_place(max_d);
    Ok((out, trace, steps))
}

/// Chamfer distance between the surfaces of `state` and `gt`, estimated
/// with `n` samples per side.
pub fn surface_chamfer(grid: &TetGrid, state: &GridState, gt: &TriMesh, n: usize, seed: u64) -> Result<f64> {
    let mesh = extract_mesh(grid, state)?;
    if mesh.faces().is_empty() {
        return Err(Error::Geometry("sign field has no zero crossing".into()));
    }
    chamfer(&sample_surface(&mesh, n, seed)?, &sample_surface(gt, n, seed ^ 0x9e37_79b9)?)
}

/// Optimizes deformations so the midpoint surface matches `gt` in the
/// Chamfer sense; signs are left untouched.
pub fn optimize_deformations(
    grid: &TetGrid,
    state: &GridState,
    gt: &TriMesh,
    cfg: &FitConfig,
) -> Result<(GridState, FitReport)> {
    cfg.validate()?;
    grid.check_state(state)?;
    if !state.is_normalized() {
        return Err(Error::State("deformation fitting requires a normalized SDF".into()));
    }
    if gt.faces().is_empty() {
        return Err(Error::Geometry("cannot fit an empty mesh".into()));
    }
    let topo = SurfaceTopology::from_state(grid, state);
    if topo.faces.is_empty() {
        return Err(Error::Geometry("sign field has no zero crossing".into()));
    }
    let problem = SurfaceProblem::new(grid, &topo, |_| true);
    let movable = vec![true; grid.num_vertices()];
    let eval_seed = cfg.seed.wrapping_add(1);
    let initial_chamfer = surface_chamfer(grid, state, gt, cfg.samples, eval_seed)?;
    let (out, mut trace, steps) = run_optimizer(grid, state, &problem, &movable, Target::Mesh(gt), cfg)?;
    let final_chamfer = if cfg.iterations == 0 {
        initial_chamfer
    } else {
        surface_chamfer(grid, &out, gt, cfg.samples, eval_seed)?
    };
    if trace.is_empty() {
        trace.push(initial_chamfer);
    }
    let report = FitReport {
        initial_chamfer,
        final_chamfer,
        trace,
        steps,
        iterations: cfg.iterations,
        sign_flips: sign_flips(state, &out),
        split_votes: 0,
        warnings: Vec::new(),
    };
    Ok((out, report))
}

fn sign_flips(a: &GridState, b: &GridState) -> usize {
    a.sdf().iter().zip(b.sdf()).filter(|(x, y)| (**x < 0.0) != (**y < 0.0)).count()
}

/// Sign pass followed by deformation optimization.
pub fn fit_mesh(grid: &TetGrid, gt: &TriMesh, cfg: &FitConfig) -> Result<(GridState, FitReport)> {
    let signs = fit_signs(grid, gt)?;
    let (state, mut report) = optimize_deformations(grid, &signs.state, gt, cfg)?;
    report.split_votes = signs.split_votes;
    report.warnings = signs.warnings;
    Ok((state, report))
}

/// Where a dataset item comes from.
#[derive(Clone, Debug)]
pub enum FitSource {
    Mesh(TriMesh),
    Obj(PathBuf),
}

#[derive(Clone, Debug)]
pub struct FitItem {
    pub id: String,
    pub source: FitSource,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetOptions {
    /// Directory for `<id>.tetg` files and `fit_report.jsonl`.
    pub out_dir: Option<PathBuf>,
    /// Rescale each mesh into `[-w, w]^3` before fitting.
    pub normalize_half_width: Option<f64>,
}

pub struct FitOutcome {
    pub state: GridState,
    pub report: FitReport,
    pub normalization: Option<Normalization>,
}

/// One line of the dataset fitting report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub id: String,
    pub final_chamfer: Option<f64>,
    pub iterations: usize,
    pub warnings: Vec<String>,
    pub error: Option<String>,
    pub normalization: Option<Normalization>,
}

pub const FIT_REPORT_FILE: &str = "fit_report.jsonl";

fn fit_item(grid: &TetGrid, item: &FitItem, cfg: &FitConfig, opts: &DatasetOptions) -> Result<FitOutcome> {
    let mesh = match &item.source {
        FitSource::Mesh(m) => m.clone(),
        FitSource::Obj(p) => load_obj(p)?,
    };
    let (mesh, normalization) = match opts.normalize_half_width {
        Some(w) => {
            let (m, n) = normalize_to_box(&mesh, w)?;
            (m, Some(n))
        }
        None => (mesh, None),
    };
    let (state, report) = fit_mesh(grid, &mesh, cfg)?;
    if let Some(dir) = &opts.out_dir {
        write_tetg(dir.join(format!("{}.tetg", item.id)), grid.resolution(), &state)?;
    }
    Ok(FitOutcome {
        state,
        report,
        normalization,
    })
}

/// Fits every item independently and in parallel. Item `i` uses seed
/// `cfg.seed + i`. Failures are recorded per item; only a batch where
/// every item fails is an error.
pub fn fit_dataset(
    items: &[FitItem],
    grid: &TetGrid,
    cfg: &FitConfig,
    opts: &DatasetOptions,
) -> Result<Vec<(String, Result<FitOutcome>)>> {
    if items.is_empty() {
        return Err(Error::Parameter("no meshes to fit".into()));
    }
    cfg.validate()?;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let results: Vec<(String, Result<FitOutcome>)> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let cfg = FitConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            (item.id.clone(), fit_item(grid, item, &cfg, opts))
        })
        .collect();
    let failed = results.iter().filter(|r| r.1.is_err()).count();
    for (id, r) in &results {
        if let Err(e) = r {
            log::warn!("fitting {id} failed: {e}");
        }
    }
    if let Some(dir) = &opts.out_dir {
        write_fit_report(&dir.join(FIT_REPORT_FILE), &results)?;
    }
    if failed == results.len() {
        return Err(Error::Batch(failed));
    }
    Ok(results)
}

fn write_fit_report(path: &Path, results: &[(String, Result<FitOutcome>)]) -> Result<()> {
    let mut text = String::new();
    for (id, r) in results {
        let record = match r {
            Ok(o) => FitRecord {
                id: id.clone(),
                final_chamfer: Some(o.report.final_chamfer),
                iterations: o.report.iterations,
                warnings: o.report.warnings.clone(),
                error: None,
                normalization: o.normalization,
            },
            Err(e) => FitRecord {
                id: id.clone(),
                final_chamfer: None,
                iterations: 0,
                warnings: Vec::new(),
                error: Some(e.to_string()),
                normalization: None,
            },
        };
        text.push_str(&serde_json::to_string(&record).expect("record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

/// Partial grid state observed from a single depth view.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleViewFit {
    pub state: GridState,
    /// Per-vertex: `true` where the value is determined by the view.
    pub known: Vec<bool>,
    /// Per-vertex: free space in front of the observed surface.
    pub carved: Vec<bool>,
    pub steps: Vec<FitStep>,
}

/// Signs and visibility of grid vertices from one depth view, then
/// deformation refinement of the visible surface toward the
/// back-projected hits.
///
/// Vertices in front of the observed depth by more than one cell edge, or
/// on rays that miss, are carved (`+1`, known). Within one cell edge of
/// the observed depth they are `+1` in front and `-1` behind. A tetrahedron
/// is visible iff one of its vertices projects to a hit pixel no deeper
/// than one cell edge behind the observed depth; vertices of the other
/// tetrahedra are unknown unless carved.
pub fn fit_singleview(grid: &TetGrid, view: &DepthView, cfg: &FitConfig) -> Result<SingleViewFit> {
    cfg.validate()?;
    if view.hit_count() == 0 {
        return Err(Error::Visibility("depth view has no hit pixel".into()));
    }
    let h = grid.cell_size();
    let n = grid.num_vertices();
    let mut sdf = vec![1.0f32; n];
    let mut carved = vec![false; n];
    let mut sees = vec![false; n];
    let mut band = vec![false; n];
    for (v, &p) in grid.positions().iter().enumerate() {
        let Some((px, py, dist)) = view.camera.project(p)? else {
            continue;
        };
        let observed = view.depth_at(px, py);
        if !observed.is_finite() {
            carved[v] = true;
            continue;
        }
        sees[v] = dist <= observed + h;
        if dist < observed - h {
            carved[v] = true;
        } else if dist <= observed + h {
            band[v] = true;
            if dist > observed {
                sdf[v] = -1.0;
            }
        } else {
            sdf[v] = -1.0;
        }
    }
    let mut known = vec![true; n];
    for t in grid.tets() {
        if !t.iter().any(|&v| sees[v as usize]) {
            for &v in t {
                known[v as usize] = false;
            }
        }
    }
    for v in 0..n {
        known[v] |= carved[v];
    }
    let state = GridState::normalized(vec![[0.0; 3]; n], sdf)?;

    let topo = SurfaceTopology::from_state(grid, &state);
    let problem = SurfaceProblem::new(grid, &topo, |f| {
        f.iter().all(|&e| {
            let [a, b] = topo.edges[e as usize];
            known[a as usize] && known[b as usize]
        })
    });
    if problem.faces.is_empty() || cfg.iterations == 0 {
        return Ok(SingleViewFit {
            state,
            known,
            carved,
            steps: Vec::new(),
        });
    }
    let hits = view.back_project()?;
    let movable: Vec<bool> = known.clone();
    let (state, _, steps) = run_optimizer(grid, &state, &problem, &movable, Target::Cloud(&hits), cfg)?;
    Ok(SingleViewFit {
        state,
        known,
        carved,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshops::Camera;
    use crate::shapes;

    fn sphere_setup() -> (TetGrid, TriMesh) {
        (TetGrid::bcc(16, 1.0).unwrap(), shapes::uv_sphere([0.0; 3], 0.6, 48, 96))
    }

    #[test]
    fn sphere_signs_match_analytic() {
        let (grid, gt) = sphere_setup();
        let fit = fit_signs(&grid, &gt).unwrap();
        assert!(fit.state.is_normalized());
        assert!(fit.warnings.is_empty());
        let r_in = 0.6 * (std::f64::consts::PI / 96.0).cos();
        for (p, &s) in grid.positions().iter().zip(fit.state.sdf()) {
            let d = geom::norm(*p);
            // the tessellation lies between the inscribed and true radius
            if d < r_in || d > 0.6 {
                assert_eq!(s, if d < 0.6 { -1.0 } else { 1.0 }, "{p:?}");
            }
        }
        // idempotent
        assert_eq!(fit_signs(&grid, &gt).unwrap(), fit);
    }

    #[test]
    fn region_outside_mesh_is_positive_and_empty_mesh_fails() {
        let grid = TetGrid::bcc(8, 1.0).unwrap();
        let gt = shapes::box_mesh([0.5; 3], [0.3; 3], 1);
        let fit = fit_signs(&grid, &gt).unwrap();
        for (p, &s) in grid.positions().iter().zip(fit.state.sdf()) {
            if p.iter().all(|&c| c < 0.0) {
                assert_eq!(s, 1.0);
            }
        }
        let empty = TriMesh::default();
        assert!(matches!(fit_signs(&grid, &empty), Err(Error::Geometry(_))));
        let far = shapes::uv_sphere([3.0, 0.0, 0.0], 0.5, 8, 16);
        assert!(matches!(fit_signs(&grid, &far), Err(Error::Geometry(_))));
    }

    #[test]
    fn zero_iterations_leave_state_unchanged() {
        let (grid, gt) = sphere_setup();
        let signs = fit_signs(&grid, &gt).unwrap().state;
        let cfg = FitConfig {
            iterations: 0,
            ..FitConfig::default()
        };
        let (out, report) = optimize_deformations(&grid, &signs, &gt, &cfg).unwrap();
        assert_eq!(out, signs);
        assert_eq!(report.trace, vec![report.initial_chamfer]);
        assert!(report.steps.is_empty());
    }

    #[test]
    fn cube_on_grid_planes_improves() {
        let grid = TetGrid::bcc(8, 1.0).unwrap();
        let gt = shapes::box_mesh([0.0; 3], [0.5; 3], 4);
        let cfg = FitConfig {
            iterations: 300,
            samples: 2048,
            learning_rate: 2e-3,
            ..FitConfig::default()
        };
        let (state, report) = fit_mesh(&grid, &gt, &cfg).unwrap();
        assert!(report.final_chamfer <= 0.7 * report.initial_chamfer, "{report:?}");
        for s in &report.steps {
            assert!(s.after <= s.before);
        }
        assert_eq!(report.sign_flips, 0);
        let m = grid.max_deformation() as f32;
        assert!(state.deformation().iter().flatten().all(|c| c.abs() <= m));
    }

    #[test]
    fn surface_is_affine_in_deformations() {
        let (grid, gt) = sphere_setup();
        let signs = fit_signs(&grid, &gt).unwrap().state;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let small = 0.05 * grid.cell_size();
        let perturbed = |rng: &mut ChaCha8Rng| {
            let mut s = signs.clone();
            for d in s.deformation_mut() {
                *d = [0; 3].map(|_| rng.random_range(-small..small) as f32);
            }
            s
        };
        let (s0, s1, s2) = (perturbed(&mut rng), perturbed(&mut rng), perturbed(&mut rng));
        let mut s3 = signs.clone();
        for i in 0..s3.len() {
            for c in 0..3 {
                let v = s1.deformation()[i][c] as f64 + s2.deformation()[i][c] as f64 - s0.deformation()[i][c] as f64;
                s3.deformation_mut()[i][c] = v as f32;
            }
        }
        let [m0, m1, m2, m3] = [&s0, &s1, &s2, &s3].map(|s| extract_mesh(&grid, s).unwrap());
        assert_eq!(m3.faces(), m0.faces());
        for k in 0..m0.vertices().len() {
            for c in 0..3 {
                let expect = m1.vertices()[k][c] + m2.vertices()[k][c] - m0.vertices()[k][c];
                // f32 storage of the combined deformation bounds the error
                assert!((m3.vertices()[k][c] - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let grid = TetGrid::bcc(4, 1.0).unwrap();
        let gt = shapes::uv_sphere([0.05, 0.0, 0.0], 0.55, 16, 32);
        let signs = fit_signs(&grid, &gt).unwrap().state;
        let topo = SurfaceTopology::from_state(&grid, &signs);
        let problem = SurfaceProblem::new(&grid, &topo, |_| true);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = vec![[0.0; 3]; grid.num_vertices()];
        let samples = sample_surface_locations(&problem.mesh(&d), 200, &mut rng).unwrap();
        let tgt = sample_surface(&gt, 200, 9).unwrap().points().to_vec();
        let idx = NearestIndex::new(&tgt).unwrap();
        let mut g = vec![[0.0; 3]; d.len()];
        problem.loss(&d, &samples, &tgt, &idx, Some(&mut g));
        let eps = 1e-7;
        let mut checked = 0;
        for &[a, _] in problem.edges.iter().take(10) {
            for c in 0..3 {
                let mut dp = d.clone();
                dp[a][c] += eps;
                let mut dm = d.clone();
                dm[a][c] -= eps;
                let fd = (problem.loss(&dp, &samples, &tgt, &idx, None) - problem.loss(&dm, &samples, &tgt, &idx, None)) / (2.0 * eps);
                assert!((fd - g[a][c]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[a][c]);
                checked += 1;
            }
        }
        assert_eq!(checked, 30);
    }

    #[test]
    fn dataset_records_failures_and_is_deterministic() {
        let grid = TetGrid::bcc(6, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let items = vec![
            FitItem {
                id: "a".into(),
                source: FitSource::Mesh(shapes::uv_sphere([0.0; 3], 0.5, 12, 24)),
            },
            FitItem {
                id: "b".into(),
                source: FitSource::Obj(dir.path().join("missing.obj")),
            },
            FitItem {
                id: "c".into(),
                source: FitSource::Mesh(shapes::box_mesh([0.0; 3], [0.4; 3], 2)),
            },
        ];
        let cfg = FitConfig {
            iterations: 20,
            samples: 512,
            ..FitConfig::default()
        };
        let opts = DatasetOptions {
            out_dir: Some(dir.path().join("out")),
            normalize_half_width: Some(0.9),
        };
        let r1 = fit_dataset(&items, &grid, &cfg, &opts).unwrap();
        assert_eq!(r1.iter().filter(|r| r.1.is_ok()).count(), 2);
        assert!(dir.path().join("out/a.tetg").exists());
        assert!(!dir.path().join("out/b.tetg").exists());
        let report = fs::read_to_string(dir.path().join("out").join(FIT_REPORT_FILE)).unwrap();
        let records: Vec<FitRecord> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), 3);
        assert!(records[1].error.is_some());
        let r2 = fit_dataset(&items, &grid, &cfg, &DatasetOptions { out_dir: None, ..opts }).unwrap();
        for (x, y) in r1.iter().zip(&r2) {
            if let (Ok(x), Ok(y)) = (&x.1, &y.1) {
                assert_eq!(x.state, y.state);
            }
        }
        let bad = vec![items[1].clone()];
        assert!(matches!(fit_dataset(&bad, &grid, &cfg, &DatasetOptions::default()), Err(Error::Batch(1))));
    }

    fn front_camera() -> Camera {
        Camera {
            eye: [0.0, 0.0, 3.0],
            target: [0.0; 3],
            up: [0.0, 1.0, 0.0],
            focal: 60.0,
            width: 64,
            height: 64,
        }
    }

    #[test]
    fn single_view_of_sphere() {
        let grid = TetGrid::bcc(12, 1.0).unwrap();
        let gt = shapes::uv_sphere([0.0; 3], 0.6, 32, 64);
        let view = crate::meshops::raycast_depth(&gt, &front_camera()).unwrap();
        let cfg = FitConfig {
            iterations: 30,
            samples: 1024,
            ..FitConfig::default()
        };
        let fit = fit_singleview(&grid, &view, &cfg).unwrap();
        let h = grid.cell_size();
        for (v, p) in grid.positions().iter().enumerate() {
            let r = geom::norm(*p);
            let on_sphere = (r - 0.6).abs() < 0.5 * h;
            if on_sphere && p[2] > 0.3 {
                assert!(fit.known[v], "front vertex {p:?} should be known");
            }
            if r < 0.6 - 2.0 * h && p[2] < -0.2 {
                assert!(!fit.known[v], "back interior vertex {p:?} should be unknown");
            }
            // carved vertices are never unknown
            assert!(!fit.carved[v] || fit.known[v]);
        }
        for s in &fit.steps {
            assert!(s.after <= s.before);
        }
    }

    #[test]
    fn free_space_is_carved_and_misses_fail() {
        let grid = TetGrid::bcc(8, 1.0).unwrap();
        let gt = shapes::uv_sphere([0.0; 3], 0.5, 16, 32);
        let cam = front_camera();
        let view = crate::meshops::raycast_depth(&gt, &cam).unwrap();
        let cfg = FitConfig {
            iterations: 0,
            ..FitConfig::default()
        };
        let fit = fit_singleview(&grid, &view, &cfg).unwrap();
        // the grid vertex on the view axis halfway to the surface
        let v = grid
            .positions()
            .iter()
            .position(|p| p[0] == 0.0 && p[1] == 0.0 && p[2] == 1.0)
            .unwrap();
        assert_eq!(fit.state.sdf()[v], 1.0);
        assert!(fit.carved[v] && fit.known[v]);
        let away = Camera {
            target: [0.0, 0.0, 6.0],
            ..cam
        };
        let empty = crate::meshops::raycast_depth(&gt, &away).unwrap();
        assert!(matches!(fit_singleview(&grid, &empty, &cfg), Err(Error::Visibility(_))));
    }
}
