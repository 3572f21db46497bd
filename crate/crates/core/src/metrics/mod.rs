//! Point-cloud distances and set-level generative metrics.

mod emd;
mod report;

use std::collections::HashSet;

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{self, Point3};
use crate::meshops::PointCloud;

pub use emd::{auction, emd_points, hungarian, EmdMode, EmdResult, AUCTION_GAP, EXACT_LIMIT};
pub use report::{evaluate, EvalConfig, MetricsReport};

pub const DEFAULT_CLOUD_SIZE: usize = 2048;
pub const DEFAULT_VOXEL_RES: usize = 28;

/// Static kd-tree over a point set for nearest-neighbor queries.
pub struct NearestIndex {
    tree: ImmutableKdTree<f64, u32, 3, 32>,
}

impl NearestIndex {
    pub fn new(points: &[Point3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Parameter("nearest-neighbor index over no points".into()));
        }
        Ok(Self {
            tree: ImmutableKdTree::new_from_slice(points),
        })
    }

    /// Index of the nearest stored point and its squared distance.
    pub fn nearest(&self, q: &Point3) -> (usize, f64) {
        let n = self.tree.nearest_one::<SquaredEuclidean>(q);
        (n.item as usize, n.distance)
    }
}

/// One direction of the Chamfer distance: mean squared distance from each
/// point of `from` to its nearest point in `to`.
pub fn one_sided_chamfer(from: &[Point3], to: &NearestIndex) -> f64 {
    let d: Vec<f64> = from.par_iter().map(|p| to.nearest(p).1).collect();
    d.iter().sum::<f64>() / from.len() as f64
}

pub fn chamfer_points(a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Parameter("Chamfer distance of an empty cloud".into()));
    }
    let (ia, ib) = (NearestIndex::new(a)?, NearestIndex::new(b)?);
    Ok(one_sided_chamfer(a, &ib) + one_sided_chamfer(b, &ia))
}

pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_points(a.points(), b.points())
}

pub fn emd(a: &PointCloud, b: &PointCloud, mode: EmdMode) -> Result<f64> {
    Ok(emd_points(a.points(), b.points(), mode)?.value)
}

/// A distance between two point clouds, selectable by name.
pub trait ShapeDistance: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &PointCloud, b: &PointCloud) -> Result<f64>;
}

pub struct ChamferDistance;

impl ShapeDistance for ChamferDistance {
    fn name(&self) -> &str {
        "cd"
    }

    fn distance(&self, a: &PointCloud, b: &PointCloud) -> Result<f64> {
        chamfer(a, b)
    }
}

pub struct EarthMover(pub EmdMode);

impl ShapeDistance for EarthMover {
    fn name(&self) -> &str {
        match self.0 {
            EmdMode::Approximate => "emd",
            EmdMode::Exact => "emd-exact",
        }
    }

    fn distance(&self, a: &PointCloud, b: &PointCloud) -> Result<f64> {
        emd(a, b, self.0)
    }
}

/// Named shape distances.
pub struct DistanceRegistry {
    entries: Vec<Box<dyn ShapeDistance>>,
}

impl Default for DistanceRegistry {
    fn default() -> Self {
        let mut r = Self { entries: Vec::new() };
        r.register(Box::new(ChamferDistance));
        r.register(Box::new(EarthMover(EmdMode::Approximate)));
        r.register(Box::new(EarthMover(EmdMode::Exact)));
        r
    }
}

impl DistanceRegistry {
    /// Adds a distance, replacing any existing entry with the same name.
    pub fn register(&mut self, d: Box<dyn ShapeDistance>) {
        self.entries.retain(|e| e.name() != d.name());
        self.entries.push(d);
    }

    pub fn get(&self, name: &str) -> Result<&dyn ShapeDistance> {
        self.entries
            .iter()
            .find(|e| e.name() == name)
            .map(|e| e.as_ref())
            .ok_or_else(|| Error::Parameter(format!("unknown shape distance `{name}` (known: {})", self.names().join(", "))))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name()).collect()
    }
}

/// Point clouds of equal size with source ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSet {
    clouds: Vec<PointCloud>,
    ids: Vec<String>,
}

impl ShapeSet {
    pub fn new(clouds: Vec<PointCloud>, ids: Vec<String>) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::Parameter("empty shape set".into()));
        }
        if ids.len() != clouds.len() {
            return Err(Error::Dimension {
                expected: clouds.len(),
                actual: ids.len(),
            });
        }
        let n = clouds[0].len();
        if let Some(c) = clouds.iter().find(|c| c.len() != n) {
            return Err(Error::Parameter(format!(
                "shape set clouds must have equal size: {} vs {n}",
                c.len()
            )));
        }
        Ok(Self { clouds, ids })
    }

    /// Ids default to the position in the list.
    pub fn from_clouds(clouds: Vec<PointCloud>) -> Result<Self> {
        let ids = (0..clouds.len()).map(|i| i.to_string()).collect();
        Self::new(clouds, ids)
    }

    pub fn clouds(&self) -> &[PointCloud] {
        &self.clouds
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn cloud_size(&self) -> usize {
        self.clouds[0].len()
    }
}

/// Dense `rows x cols` matrix of pairwise distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn compute(rows: &ShapeSet, cols: &ShapeSet, dist: &dyn ShapeDistance) -> Result<Self> {
        let nc = cols.len();
        let data = (0..rows.len() * nc)
            .into_par_iter()
            .map(|k| dist.distance(&rows.clouds[k / nc], &cols.clouds[k % nc]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rows: rows.len(),
            cols: nc,
            data,
        })
    }

    /// Pairwise distances within one set; symmetric, computed once per pair.
    pub fn compute_within(set: &ShapeSet, dist: &dyn ShapeDistance) -> Result<Self> {
        let n = set.len();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let values = pairs
            .par_iter()
            .map(|&(i, j)| dist.distance(&set.clouds[i], &set.clouds[j]))
            .collect::<Result<Vec<_>>>()?;
        let mut data = vec![0.0; n * n];
        for (&(i, j), v) in pairs.iter().zip(values) {
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
        Ok(Self { rows: n, cols: n, data })
    }
}

/// Index and value of the smallest entry; ties go to the lower index.
fn argmin(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best
}

/// Mean over references of the distance to the closest generated shape,
/// from a `gen x ref` matrix.
pub fn mmd_from(d_gen_ref: &DistanceMatrix) -> f64 {
    let total: f64 = (0..d_gen_ref.cols)
        .map(|r| argmin((0..d_gen_ref.rows).map(|g| d_gen_ref.get(g, r))).unwrap().1)
        .sum();
    total / d_gen_ref.cols as f64
}

/// Fraction of references that are the nearest reference of some
/// generated shape, from a `gen x ref` matrix.
pub fn coverage_from(d_gen_ref: &DistanceMatrix) -> f64 {
    let covered: HashSet<usize> = (0..d_gen_ref.rows)
        .map(|g| argmin((0..d_gen_ref.cols).map(|r| d_gen_ref.get(g, r))).unwrap().0)
        .collect();
    covered.len() as f64 / d_gen_ref.cols as f64
}

/// Leave-one-out 1-NN accuracy over the union `gen ++ ref`.
pub fn one_nna_from(d_gen_gen: &DistanceMatrix, d_ref_ref: &DistanceMatrix, d_gen_ref: &DistanceMatrix) -> f64 {
    let (ng, nr) = (d_gen_ref.rows, d_gen_ref.cols);
    let n = ng + nr;
    let d = |i: usize, j: usize| -> f64 {
        match (i < ng, j < ng) {
            (true, true) => d_gen_gen.get(i, j),
            (false, false) => d_ref_ref.get(i - ng, j - ng),
            (true, false) => d_gen_ref.get(i, j - ng),
            (false, true) => d_gen_ref.get(j, i - ng),
        }
    };
    let correct = (0..n)
        .filter(|&i| {
            let mut best: Option<(usize, f64)> = None;
            for j in (0..n).filter(|&j| j != i) {
                let v = d(i, j);
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((j, v));
                }
            }
            let j = best.expect("union has at least two elements").0;
            (j < ng) == (i < ng)
        })
        .count();
    correct as f64 / n as f64
}

pub fn mmd(gen: &ShapeSet, reference: &ShapeSet, dist: &dyn ShapeDistance) -> Result<f64> {
    Ok(mmd_from(&DistanceMatrix::compute(gen, reference, dist)?))
}

pub fn coverage(gen: &ShapeSet, reference: &ShapeSet, dist: &dyn ShapeDistance) -> Result<f64> {
    Ok(coverage_from(&DistanceMatrix::compute(gen, reference, dist)?))
}

pub fn one_nna(gen: &ShapeSet, reference: &ShapeSet, dist: &dyn ShapeDistance) -> Result<f64> {
    Ok(one_nna_from(
        &DistanceMatrix::compute_within(gen, dist)?,
        &DistanceMatrix::compute_within(reference, dist)?,
        &DistanceMatrix::compute(gen, reference, dist)?,
    ))
}

/// Closest dataset shape to `query`; ties go to the lower index.
pub fn nearest_neighbor(query: &PointCloud, dataset: &ShapeSet, dist: &dyn ShapeDistance) -> Result<(usize, f64)> {
    let d = dataset
        .clouds
        .par_iter()
        .map(|c| dist.distance(query, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmin(d.into_iter()).expect("shape sets are non-empty"))
}

/// Occupancy histogram of pooled points over `res^3` voxels of
/// `[-1, 1]^3`, plus the number of points clipped into range.
pub fn occupancy_histogram(set: &ShapeSet, res: usize) -> (Vec<f64>, usize) {
    let mut hist = vec![0.0; res * res * res];
    let mut clipped = 0;
    for p in set.clouds.iter().flat_map(|c| c.points()) {
        if p.iter().any(|c| c.abs() > 1.0) {
            clipped += 1;
        }
        let idx = p.map(|c| ((((c.clamp(-1.0, 1.0) + 1.0) * 0.5) * res as f64) as usize).min(res - 1));
        hist[idx[0] + res * (idx[1] + res * idx[2])] += 1.0;
    }
    (hist, clipped)
}

/// Jensen-Shannon divergence (natural log) of two histograms, each
/// normalized to sum to one.
pub fn jsd_histograms(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            expected: p.len(),
            actual: q.len(),
        });
    }
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if !(sp > 0.0 && sq > 0.0) || p.iter().chain(q).any(|&x| x < 0.0) {
        return Err(Error::Parameter("histograms must be non-negative with positive mass".into()));
    }
    let kl = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a / sp, b / sq);
        let m = 0.5 * (a + b);
        total += 0.5 * (kl(a, m) + kl(b, m));
    }
    Ok(total.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JsdResult {
    pub value: f64,
    /// Points that fell outside `[-1, 1]^3` and were clipped.
    pub clipped: usize,
}

pub fn jsd(gen: &ShapeSet, reference: &ShapeSet, voxel_res: usize) -> Result<JsdResult> {
    if voxel_res == 0 {
        return Err(Error::Parameter("voxel resolution must be positive".into()));
    }
    let (p, cp) = occupancy_histogram(gen, voxel_res);
    let (q, cq) = occupancy_histogram(reference, voxel_res);
    Ok(JsdResult {
        value: jsd_histograms(&p, &q)?,
        clipped: cp + cq,
    })
}

/// Brute-force squared nearest distance, used as a reference in tests.
pub fn brute_force_nearest(q: Point3, points: &[Point3]) -> f64 {
    points.iter().map(|p| geom::dist2(q, *p)).fold(f64::INFINITY, f64::min)
}
