use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    coverage_from, jsd, mmd_from, one_nna_from, ChamferDistance, DistanceMatrix, EarthMover, EmdMode, ShapeDistance,
    ShapeSet, DEFAULT_VOXEL_RES,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    /// Skip the EMD columns, which dominate the cost on large sets.
    pub with_emd: bool,
    pub emd_mode: EmdMode,
    pub voxel_res: usize,
    /// Seed used to sample the clouds, recorded in the report.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            with_emd: true,
            emd_mode: EmdMode::Approximate,
            voxel_res: DEFAULT_VOXEL_RES,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mmd_cd: f64,
    pub mmd_emd: Option<f64>,
    pub cov_cd: f64,
    pub cov_emd: Option<f64>,
    pub nna_cd: f64,
    pub nna_emd: Option<f64>,
    pub jsd: f64,
    pub jsd_clipped: usize,
    pub gen_size: usize,
    pub ref_size: usize,
    pub cloud_size: usize,
    pub seed: u64,
}

struct SetMetrics {
    mmd: f64,
    cov: f64,
    nna: f64,
}

fn set_metrics(gen: &ShapeSet, reference: &ShapeSet, dist: &dyn ShapeDistance) -> Result<SetMetrics> {
    let gr = DistanceMatrix::compute(gen, reference, dist)?;
    Ok(SetMetrics {
        mmd: mmd_from(&gr),
        cov: coverage_from(&gr),
        nna: one_nna_from(
            &DistanceMatrix::compute_within(gen, dist)?,
            &DistanceMatrix::compute_within(reference, dist)?,
            &gr,
        ),
    })
}

pub fn evaluate(gen: &ShapeSet, reference: &ShapeSet, cfg: &EvalConfig) -> Result<MetricsReport> {
    if cfg.with_emd && gen.cloud_size() != reference.cloud_size() {
        return Err(Error::Parameter(format!(
            "EMD needs equal cloud sizes across sets, got {} and {}",
            gen.cloud_size(),
            reference.cloud_size()
        )));
    }
    let cd = set_metrics(gen, reference, &ChamferDistance)?;
    let emd = if cfg.with_emd {
        Some(set_metrics(gen, reference, &EarthMover(cfg.emd_mode))?)
    } else {
        None
    };
    let j = jsd(gen, reference, cfg.voxel_res)?;
    Ok(MetricsReport {
        mmd_cd: cd.mmd,
        mmd_emd: emd.as_ref().map(|m| m.mmd),
        cov_cd: cd.cov,
        cov_emd: emd.as_ref().map(|m| m.cov),
        nna_cd: cd.nna,
        nna_emd: emd.as_ref().map(|m| m.nna),
        jsd: j.value,
        jsd_clipped: j.clipped,
        gen_size: gen.len(),
        ref_size: reference.len(),
        cloud_size: gen.cloud_size(),
        seed: cfg.seed,
    })
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>12} {:>12}", "metric", "CD", "EMD");
        let _ = writeln!(s, "{:<8} {:>12.6} {:>12}", "MMD", self.mmd_cd, opt(self.mmd_emd));
        let _ = writeln!(s, "{:<8} {:>12.6} {:>12}", "COV", self.cov_cd, opt(self.cov_emd));
        let _ = writeln!(s, "{:<8} {:>12.6} {:>12}", "1-NNA", self.nna_cd, opt(self.nna_emd));
        let _ = writeln!(s, "{:<8} {:>12.6}", "JSD", self.jsd);
        let _ = writeln!(
            s,
            "generated {} / reference {} / {} points per cloud / seed {}",
            self.gen_size, self.ref_size, self.cloud_size, self.seed
        );
        if self.jsd_clipped > 0 {
            let _ = writeln!(s, "warning: {} points clipped into [-1, 1]^3", self.jsd_clipped);
        }
        s
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
