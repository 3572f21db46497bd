use rand::RngCore;

use super::{clip_unit, predict_x0, standard_normal_like, Conditioning, NoiseSchedule, TrajectoryObserver};
use crate::error::{Error, Result};
use crate::lattice::DiffusionTensor;
use crate::scoremodel::ScoreModel;

pub const DEFAULT_DDIM_STEPS: usize = 100;

/// How a reduced set of DDIM timesteps is spread over `1..=T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spacing {
    Linear,
    Quadratic,
}

impl std::str::FromStr for Spacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Spacing::Linear),
            "quadratic" => Ok(Spacing::Quadratic),
            other => Err(Error::Parameter(format!("unknown timestep spacing `{other}`"))),
        }
    }
}

/// Ascending, deduplicated 0-based timesteps
/// `round(f(i/(S-1)) * (T-1))` for `i` in `0..S`, with `f(u) = u` or `u^2`.
/// Step index `τ` corresponds to the 1-based diffusion step `τ + 1`.
pub fn timesteps(t_max: usize, steps: usize, spacing: Spacing) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::Parameter(format!(
            "sampler steps must lie in 1..={t_max}, got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![t_max - 1]);
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| {
            let u = i as f64 / (steps - 1) as f64;
            let f = match spacing {
                Spacing::Linear => u,
                Spacing::Quadratic => u * u,
            };
            (f * (t_max - 1) as f64).round() as usize
        })
        .collect();
    ts.dedup();
    Ok(ts)
}

/// Per-trajectory inputs besides the model and latent.
pub struct SampleContext<'a> {
    pub rng: Option<&'a mut dyn RngCore>,
    pub condition: Option<&'a Conditioning>,
    pub observer: Option<&'a mut dyn TrajectoryObserver>,
}

impl<'a> SampleContext<'a> {
    pub fn new(rng: &'a mut dyn RngCore) -> Self {
        Self {
            rng: Some(rng),
            condition: None,
            observer: None,
        }
    }

    /// No randomness; only valid for deterministic samplers without
    /// conditioning.
    pub fn deterministic() -> Self {
        Self {
            rng: None,
            condition: None,
            observer: None,
        }
    }

    fn rng(&mut self) -> Result<&mut (dyn RngCore + 'a)> {
        self.rng
            .as_deref_mut()
            .ok_or_else(|| Error::Parameter("this sampler needs a random generator".into()))
    }

    /// Applies the step's bookkeeping after `x` moved from `t` to `t_prev`.
    fn after_step(
        &mut self,
        x: &mut DiffusionTensor,
        t: usize,
        t_prev: usize,
        x0_hat: Option<&DiffusionTensor>,
        sched: &NoiseSchedule,
    ) -> Result<()> {
        x.apply_mask();
        if !x.is_finite() {
            return Err(Error::Numeric { step: t });
        }
        if let Some(c) = self.condition {
            if t > c.unfreeze_t {
                let rng = self
                    .rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::Parameter("conditioning needs a random generator".into()))?;
                c.replace(x, t_prev, sched, rng)?;
            }
        }
        if let (Some(obs), Some(x0)) = (self.observer.as_deref_mut(), x0_hat) {
            obs.observe(t, x0)?;
        }
        Ok(())
    }
}

/// A reverse-process integrator, selectable by name.
pub trait Sampler: Send + Sync {
    fn name(&self) -> &str;

    /// Whether the output is a function of the latent alone.
    fn deterministic(&self) -> bool;

    /// Runs the reverse process from `latent` at step `T` down to data.
    fn sample(
        &self,
        model: &dyn ScoreModel,
        sched: &NoiseSchedule,
        latent: DiffusionTensor,
        ctx: &mut SampleContext,
    ) -> Result<DiffusionTensor>;
}

fn check_latent(latent: &DiffusionTensor, ctx: &SampleContext) -> Result<()> {
    if !latent.is_finite() {
        return Err(Error::Parameter("latent has non-finite values".into()));
    }
    if let Some(c) = ctx.condition {
        latent.check_shape(&c.known)?;
    }
    Ok(())
}

/// Ancestral sampler with `σ_t² = β_t` and no noise on the final step.
///
/// With `clip`, the mean is the posterior mean given x̂₀ clipped to
/// `[-1, 1]`; otherwise it is the plain ε-form
/// `(x_t - β_t/√(1-ᾱ_t) ε̂) / √α_t`. Both agree while x̂₀ stays in range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ddpm {
    pub clip: bool,
}

impl Default for Ddpm {
    fn default() -> Self {
        Self { clip: true }
    }
}

impl Sampler for Ddpm {
    fn name(&self) -> &str {
        "ddpm"
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn sample(
        &self,
        model: &dyn ScoreModel,
        sched: &NoiseSchedule,
        latent: DiffusionTensor,
        ctx: &mut SampleContext,
    ) -> Result<DiffusionTensor> {
        check_latent(&latent, ctx)?;
        ctx.rng()?;
        let mut x = latent;
        for t in (1..=sched.steps()).rev() {
            let eps = model.eval(&x, t, sched)?;
            if !eps.is_finite() {
                return Err(Error::Numeric { step: t });
            }
            let noise = if t > 1 {
                Some(standard_normal_like(&x, ctx.rng()?))
            } else {
                None
            };
            let sigma = sched.beta(t).sqrt();
            let x0_hat = predict_x0(&x, t, &eps, sched, true)?;
            let one_minus = 1.0 - sched.alpha_bar(t);
            let c0 = sched.sqrt_alpha_bar(t - 1) * sched.beta(t) / one_minus;
            let ct = sched.alpha(t).sqrt() * (1.0 - sched.alpha_bar(t - 1)) / one_minus;
            let inv = 1.0 / sched.alpha(t).sqrt();
            let coef = sched.beta(t) / sched.sqrt_one_minus_alpha_bar(t);
            {
                let data = x.data_mut();
                for (i, v) in data.iter_mut().enumerate() {
                    *v = if self.clip {
                        c0 * x0_hat.data()[i] + ct * *v
                    } else {
                        inv * (*v - coef * eps.data()[i])
                    };
                    if let Some(z) = &noise {
                        *v += sigma * z.data()[i];
                    }
                }
            }
            ctx.after_step(&mut x, t, t - 1, Some(&x0_hat), sched)?;
        }
        Ok(x)
    }
}

/// Deterministic (η = 0) sampler over a reduced timestep set. With
/// `clip`, x̂₀ is clipped to `[-1, 1]` and ε̂ re-derived from it before
/// each update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ddim {
    pub steps: usize,
    pub spacing: Spacing,
    pub clip: bool,
}

impl Ddim {
    pub fn new(steps: usize, spacing: Spacing) -> Self {
        Self {
            steps,
            spacing,
            clip: true,
        }
    }
}

impl Sampler for Ddim {
    fn name(&self) -> &str {
        "ddim"
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn sample(
        &self,
        model: &dyn ScoreModel,
        sched: &NoiseSchedule,
        latent: DiffusionTensor,
        ctx: &mut SampleContext,
    ) -> Result<DiffusionTensor> {
        check_latent(&latent, ctx)?;
        let ts: Vec<usize> = timesteps(sched.steps(), self.steps, self.spacing)?
            .into_iter()
            .map(|tau| tau + 1)
            .collect();
        let mut x = latent;
        for i in (0..ts.len()).rev() {
            let t = ts[i];
            let t_prev = if i > 0 { ts[i - 1] } else { 0 };
            let eps = model.eval(&x, t, sched)?;
            if !eps.is_finite() {
                return Err(Error::Numeric { step: t });
            }
            let x0 = predict_x0(&x, t, &eps, sched, self.clip)?;
            let (at, bt) = (sched.sqrt_alpha_bar(t), sched.sqrt_one_minus_alpha_bar(t));
            let (a, b) = (sched.sqrt_alpha_bar(t_prev), sched.sqrt_one_minus_alpha_bar(t_prev));
            {
                let data = x.data_mut();
                for (k, v) in data.iter_mut().enumerate() {
                    let e = if self.clip {
                        (*v - at * x0.data()[k]) / bt
                    } else {
                        eps.data()[k]
                    };
                    *v = a * x0.data()[k] + b * e;
                }
            }
            let shown = ctx.observer.is_some().then(|| clip_unit(&x0));
            ctx.after_step(&mut x, t, t_prev, shown.as_ref(), sched)?;
        }
        Ok(x)
    }
}

/// Sampler construction parameters; fields a sampler does not use are
/// ignored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerParams {
    pub steps: usize,
    pub spacing: Spacing,
    /// Clip x̂₀ to the data range at every step.
    pub clip: bool,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            steps: DEFAULT_DDIM_STEPS,
            spacing: Spacing::Quadratic,
            clip: true,
        }
    }
}

type SamplerFactory = fn(&SamplerParams) -> Box<dyn Sampler>;

/// Samplers registered by name.
pub struct SamplerRegistry {
    entries: Vec<(String, SamplerFactory)>,
}

impl Default for SamplerRegistry {
    fn default() -> Self {
        let mut r = Self { entries: Vec::new() };
        r.register("ddpm", |p| Box::new(Ddpm { clip: p.clip }));
        r.register("ddim", |p| {
            Box::new(Ddim {
                steps: p.steps,
                spacing: p.spacing,
                clip: p.clip,
            })
        });
        r
    }
}

impl SamplerRegistry {
    pub fn register(&mut self, name: &str, factory: SamplerFactory) {
        self.entries.retain(|(n, _)| n != name);
        self.entries.push((name.to_string(), factory));
    }

    pub fn create(&self, name: &str, params: &SamplerParams) -> Result<Box<dyn Sampler>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, f)| f(params))
            .ok_or_else(|| Error::Parameter(format!("unknown sampler `{name}` (known: {})", self.names().join(", "))))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }
}
