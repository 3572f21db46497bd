//! Discrete-time denoising diffusion over lattice tensors in the
//! ε-parametrization.

mod sampler;
mod trajectory;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lattice::DiffusionTensor;
use crate::scoremodel::ScoreModel;
use crate::tetgrid::embed::SDF_CHANNEL;
use crate::tetgrid::{CubicEmbedding, GridState, TetGrid};

pub use sampler::{
    timesteps, Ddim, Ddpm, SampleContext, Sampler, SamplerParams, SamplerRegistry, Spacing, DEFAULT_DDIM_STEPS,
};
pub use trajectory::{TrajectoryDump, TrajectoryObserver, TrajectoryRecorder, TRAJECTORY_INDEX};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Step below which conditioned completion stops replacing known sites.
pub const DEFAULT_UNFREEZE_T: usize = 50;

/// Linear β schedule with cached products. Index `t` runs over `0..=T`;
/// `t = 0` is the data itself (`ᾱ_0 = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::Parameter(format!("schedule needs T >= 2, got {t_max}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let mut betas = vec![0.0];
    let mut alpha_bars = vec![1.0];
    for t in 1..=t_max {
        let u = (t - 1) as f64 / (t_max - 1) as f64;
        let b = beta_start + u * (beta_end - beta_start);
        betas.push(b);
        alpha_bars.push(alpha_bars[t - 1] * (1.0 - b));
    }
    Ok(NoiseSchedule {
        t_max,
        beta_start,
        beta_end,
        betas,
        alpha_bars,
    })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.t_max
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t].sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t]).sqrt()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::Parameter(format!("timestep {t} outside 0..={}", self.t_max)));
        }
        Ok(())
    }
}

/// Standard normal draws at active elements, zero elsewhere.
pub fn standard_normal_like<R: RngCore + ?Sized>(template: &DiffusionTensor, rng: &mut R) -> DiffusionTensor {
    let mut out = template.clone();
    let sites = template.sites();
    let mask = template.mask().clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = if mask[i % sites] { rng.sample(StandardNormal) } else { 0.0 };
    }
    out
}

/// Closed-form marginal `x_t = √ᾱ_t x₀ + √(1-ᾱ_t) ε`.
pub fn forward_sample(
    x0: &DiffusionTensor,
    t: usize,
    eps: &DiffusionTensor,
    sched: &NoiseSchedule,
) -> Result<DiffusionTensor> {
    x0.check_shape(eps)?;
    sched.check_t(t)?;
    let (a, b) = (sched.sqrt_alpha_bar(t), sched.sqrt_one_minus_alpha_bar(t));
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    x0.with_data(data)
}

/// `x̂₀ = (x_t - √(1-ᾱ_t) ε̂) / √ᾱ_t`, optionally clipped to `[-1, 1]`.
pub fn predict_x0(
    x_t: &DiffusionTensor,
    t: usize,
    eps_hat: &DiffusionTensor,
    sched: &NoiseSchedule,
    clip: bool,
) -> Result<DiffusionTensor> {
    x_t.check_shape(eps_hat)?;
    sched.check_t(t)?;
    let (a, b) = (sched.sqrt_alpha_bar(t), sched.sqrt_one_minus_alpha_bar(t));
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x, e)| {
            let v = (x - b * e) / a;
            if clip {
                v.clamp(-1.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    x_t.with_data(data)
}

/// Copy with every value clamped to `[-1, 1]`.
pub fn clip_unit(x: &DiffusionTensor) -> DiffusionTensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    out
}

/// Sum of squared ε-errors over active elements, and their count.
fn masked_sq_error(eps: &DiffusionTensor, eps_hat: &DiffusionTensor) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..eps.len() {
        if eps.element_active(i) {
            let d = eps.data()[i] - eps_hat.data()[i];
            sum += d * d;
            n += 1;
        }
    }
    (sum, n)
}

/// Masked mean squared ε-error at a fixed timestep and noise draw.
pub fn denoising_loss_at(
    model: &dyn ScoreModel,
    x0: &DiffusionTensor,
    t: usize,
    eps: &DiffusionTensor,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if t == 0 {
        return Err(Error::Parameter("denoising loss needs t >= 1".into()));
    }
    let x_t = forward_sample(x0, t, eps, sched)?;
    let eps_hat = model.eval(&x_t, t, sched)?;
    if !eps_hat.is_finite() {
        return Err(Error::Numeric { step: t });
    }
    let (sum, n) = masked_sq_error(eps, &eps_hat);
    if n == 0 {
        return Err(Error::UndefinedLoss("mask selects no element".into()));
    }
    Ok(sum / n as f64)
}

/// Masked mean squared ε-error with `t` uniform on `1..=T` and fresh noise
/// per batch item.
pub fn denoising_loss<R: RngCore + ?Sized>(
    model: &dyn ScoreModel,
    batch: &[DiffusionTensor],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for x0 in batch {
        let t = rng.random_range(1..=sched.steps());
        let eps = standard_normal_like(x0, rng);
        let x_t = forward_sample(x0, t, &eps, sched)?;
        let eps_hat = model.eval(&x_t, t, sched)?;
        if !eps_hat.is_finite() {
            return Err(Error::Numeric { step: t });
        }
        let (s, k) = masked_sq_error(&eps, &eps_hat);
        sum += s;
        n += k;
    }
    if n == 0 {
        return Err(Error::UndefinedLoss("mask selects no element".into()));
    }
    Ok(sum / n as f64)
}

/// Spherical interpolation of flattened tensors; falls back to linear
/// interpolation when the angle is below `1e-6`.
pub fn slerp(z1: &DiffusionTensor, z2: &DiffusionTensor, u: f64) -> Result<DiffusionTensor> {
    z1.check_shape(z2)?;
    let n1 = z1.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = z2.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Parameter("cannot interpolate a zero latent".into()));
    }
    let cos = (z1.data().iter().zip(z2.data()).map(|(a, b)| a * b).sum::<f64>() / (n1 * n2)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    let (w1, w2) = if omega < 1e-6 {
        (1.0 - u, u)
    } else {
        let s = omega.sin();
        (((1.0 - u) * omega).sin() / s, (u * omega).sin() / s)
    };
    z1.with_data(z1.data().iter().zip(z2.data()).map(|(a, b)| w1 * a + w2 * b).collect())
}

/// Known values and the elements they pin during sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub known: DiffusionTensor,
    /// Per element (channel-major, like the tensor data).
    pub known_mask: Vec<bool>,
    /// Replacement stops once the step index is at or below this value.
    pub unfreeze_t: usize,
}

impl Conditioning {
    pub fn new(known: DiffusionTensor, known_mask: Vec<bool>, unfreeze_t: usize) -> Result<Self> {
        if known_mask.len() != known.len() {
            return Err(Error::Dimension {
                expected: known.len(),
                actual: known_mask.len(),
            });
        }
        if let Some(i) = (0..known.len()).find(|&i| known_mask[i] && !known.element_active(i)) {
            return Err(Error::Parameter(format!(
                "known element {i} lies outside the lattice mask"
            )));
        }
        Ok(Self {
            known,
            known_mask,
            unfreeze_t,
        })
    }

    /// Per-site mask expanded to all channels.
    pub fn site_mask_to_elements(known: &DiffusionTensor, site_known: &[bool]) -> Vec<bool> {
        let sites = known.sites();
        (0..known.len()).map(|i| site_known[i % sites] && known.element_active(i)).collect()
    }

    /// Overwrites known elements of `x` with a forward draw at `t_prev`.
    pub(crate) fn replace<R: RngCore + ?Sized>(
        &self,
        x: &mut DiffusionTensor,
        t_prev: usize,
        sched: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<()> {
        let eps = standard_normal_like(&self.known, rng);
        let draw = forward_sample(&self.known, t_prev, &eps, sched)?;
        let data = x.data_mut();
        for (i, &k) in self.known_mask.iter().enumerate() {
            if k {
                data[i] = draw.data()[i];
            }
        }
        debug_assert!(self
            .known_mask
            .iter()
            .enumerate()
            .all(|(i, &k)| !k || x.data()[i] == draw.data()[i]));
        Ok(())
    }
}

/// Ancestral sampling from a standard normal latent.
pub fn ddpm_sample<R: RngCore>(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    template: &DiffusionTensor,
    rng: &mut R,
) -> Result<DiffusionTensor> {
    let latent = standard_normal_like(template, rng);
    Ddpm::default().sample(model, sched, latent, &mut SampleContext::new(rng))
}

/// Deterministic DDIM map from `latent` to a sample.
pub fn ddim_sample(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    latent: DiffusionTensor,
    steps: usize,
    spacing: Spacing,
) -> Result<DiffusionTensor> {
    Ddim::new(steps, spacing).sample(model, sched, latent, &mut SampleContext::deterministic())
}

/// Ancestral sampling with replacement conditioning.
pub fn conditional_sample<R: RngCore>(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    condition: &Conditioning,
    rng: &mut R,
) -> Result<DiffusionTensor> {
    if condition.unfreeze_t > sched.steps() {
        return Err(Error::Parameter(format!(
            "unfreeze step {} exceeds T = {}",
            condition.unfreeze_t,
            sched.steps()
        )));
    }
    let latent = standard_normal_like(&condition.known, rng);
    let mut ctx = SampleContext::new(rng);
    ctx.condition = Some(condition);
    Ddpm::default().sample(model, sched, latent, &mut ctx)
}

/// Regenerates the deformation channels of `x` while pinning its SDF
/// channel, which must hold ±1 at every active site.
pub fn refine_deformations<R: RngCore>(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    x: &DiffusionTensor,
    sampler: &dyn Sampler,
    rng: &mut R,
) -> Result<DiffusionTensor> {
    let sites = x.sites();
    let sdf = x.channel(SDF_CHANNEL);
    if let Some((site, v)) = sdf
        .iter()
        .enumerate()
        .find(|&(s, &v)| x.mask()[s] && v != 1.0 && v != -1.0)
    {
        return Err(Error::State(format!(
            "SDF channel is not normalized: {v} at site {site}"
        )));
    }
    let known_mask = (0..x.len())
        .map(|i| i / sites == SDF_CHANNEL && x.element_active(i))
        .collect();
    let condition = Conditioning::new(x.clone(), known_mask, 0)?;
    let latent = standard_normal_like(x, rng);
    let mut ctx = SampleContext::new(rng);
    ctx.condition = Some(&condition);
    sampler.sample(model, sched, latent, &mut ctx)
}

/// Grid state of a sampled tensor: SDF signs (zero counts as outside) and
/// de-scaled, clipped deformations.
pub fn finalize(x0: &DiffusionTensor, grid: &TetGrid) -> Result<GridState> {
    let emb = CubicEmbedding::from_tensor(x0.clone(), grid)?;
    let mut state = grid.extract(&emb)?.normalize_signs();
    state.clip_in_place(grid.max_deformation());
    Ok(state)
}
