use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::{DenoiserNet, ParamKind};
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::lattice::DiffusionTensor;

/// Central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-4;
const PARAMS_PER_TENSOR: usize = 10;
/// Denominator floor, below which both gradients count as zero.
const ERROR_FLOOR: f64 = 1e-5;
const CHECK_SIDE: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub layer: usize,
    pub kind: ParamKind,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// `layer N <kind>` for every tensor with an entry above tolerance.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn loss(net: &DenoiserNet, x: &DiffusionTensor, t: usize, sched: &NoiseSchedule, target: &[f64]) -> Result<f64> {
    let (out, _) = net.forward_with_cache(x, t, sched)?;
    Ok(0.5
        * out
            .data()
            .iter()
            .zip(target)
            .enumerate()
            .filter(|(i, _)| x.element_active(*i))
            .map(|(_, (a, b))| (a - b) * (a - b))
            .sum::<f64>())
}

/// Compares backpropagated gradients against central differences for
/// a few parameters of every tensor of every layer, on a random masked
/// input and the loss `½ Σ (ε̂ - target)²`.
///
/// Runs in double precision on a copy of `net`, without the `f32`
/// rounding applied by training.
pub fn grad_check(net: &DenoiserNet, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites = CHECK_SIDE.pow(3);
    let channels = net.config().data_channels;
    let mask: Vec<bool> = (0..sites).map(|_| rng.random_bool(0.7)).collect();
    let data = (0..channels * sites).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = DiffusionTensor::from_data(CHECK_SIDE, channels, data, mask.into())?;
    let target: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t = rng.random_range(1..1000);
    let sched = NoiseSchedule::default();

    let (out, cache) = net.forward_with_cache(&x, t, &sched)?;
    let upstream: Vec<f64> = out.data().iter().zip(&target).map(|(a, b)| a - b).collect();
    let analytic = net.backward_with(&cache, &upstream)?;

    let mut probe = net.clone();
    probe.inject_gradient_fault(None);
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for layer in 0..net.num_layers() {
        for kind in ParamKind::ALL {
            let range = net.param_range(layer, kind);
            let mut failed = false;
            for _ in 0..PARAMS_PER_TENSOR.min(range.len()) {
                let index = rng.random_range(range.clone());
                let base = probe.params()[index];
                probe.params_mut()[index] = base + GRAD_CHECK_STEP;
                let up = loss(&probe, &x, t, &sched, &target)?;
                probe.params_mut()[index] = base - GRAD_CHECK_STEP;
                let down = loss(&probe, &x, t, &sched, &target)?;
                probe.params_mut()[index] = base;
                let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
                let a = analytic[index];
                let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ERROR_FLOOR);
                failed |= rel_error > tolerance;
                entries.push(GradCheckEntry {
                    layer,
                    kind,
                    index,
                    analytic: a,
                    numeric,
                    rel_error,
                });
            }
            if failed {
                failures.push(format!("layer {layer} {}", kind.label()));
            }
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        tolerance,
        failures,
    })
}
