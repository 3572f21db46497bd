//! ε-predictors: an analytic Gaussian oracle and a trainable volumetric
//! convolutional denoiser.

mod checkpoint;
mod gradcheck;
mod net;
mod train;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::lattice::DiffusionTensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, GridSpec, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport, GRAD_CHECK_STEP};
pub use net::{time_embedding, DenoiserNet, ForwardCache, Head, NetConfig, ParamKind};
pub use train::{smoothed_loss, train, AdamState, TrainConfig, TrainOutcome};

/// Predicts the noise in `x_t` at step `t`. Outputs at mask-0 sites are
/// ignored by every consumer.
pub trait ScoreModel: Send + Sync {
    fn name(&self) -> &str;

    fn trainable(&self) -> bool {
        false
    }

    fn eval(&self, x_t: &DiffusionTensor, t: usize, sched: &NoiseSchedule) -> Result<DiffusionTensor>;
}

/// Exact minimizer of the denoising loss for data `N(μ, diag σ²)`:
/// `ε̂ = (x_t - √ᾱ_t μ) √(1-ᾱ_t) / (ᾱ_t σ² + 1 - ᾱ_t)`, elementwise.
pub fn oracle_gaussian_eps(
    x_t: &DiffusionTensor,
    t: usize,
    sched: &NoiseSchedule,
    mean: &[f64],
    var: &[f64],
) -> Result<DiffusionTensor> {
    if mean.len() != x_t.len() || var.len() != x_t.len() {
        return Err(Error::Dimension {
            expected: x_t.len(),
            actual: mean.len().min(var.len()),
        });
    }
    if t == 0 || t > sched.steps() {
        return Err(Error::Parameter(format!("timestep {t} outside 1..={}", sched.steps())));
    }
    let ab = sched.alpha_bar(t);
    let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(mean.iter().zip(var))
        .map(|(&x, (&m, &v))| (x - sa * m) * s1 / (ab * v + 1.0 - ab))
        .collect();
    x_t.with_data(data)
}

/// Analytic ε-predictor for Gaussian data with diagonal covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOracle {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                actual: var.len(),
            });
        }
        if var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Parameter("oracle variances must be non-negative".into()));
        }
        Ok(Self { mean, var })
    }

    /// Data concentrated at `x`.
    pub fn point_mass(x: &DiffusionTensor) -> Self {
        Self {
            mean: x.data().to_vec(),
            var: vec![0.0; x.len()],
        }
    }

    pub fn isotropic(mean: &DiffusionTensor, var: f64) -> Result<Self> {
        Self::new(mean.data().to_vec(), vec![var; mean.len()])
    }
}

impl ScoreModel for GaussianOracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn eval(&self, x_t: &DiffusionTensor, t: usize, sched: &NoiseSchedule) -> Result<DiffusionTensor> {
        oracle_gaussian_eps(x_t, t, sched, &self.mean, &self.var)
    }
}
