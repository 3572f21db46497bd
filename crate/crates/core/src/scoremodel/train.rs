use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::DenoiserNet;
use crate::diffusion::{forward_sample, standard_normal_like, NoiseSchedule};
use crate::error::{Error, Result};
use crate::lattice::DiffusionTensor;
use crate::tetgrid::{GridState, TetGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Half-width of the random global translation applied to every
    /// training item, as a fraction of the deformation bound.
    pub jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            jitter: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Parameter("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..=0.1).contains(&self.jitter) {
            return Err(Error::Parameter(format!(
                "jitter must lie in [0, 0.1], got {}",
                self.jitter
            )));
        }
        Ok(())
    }
}

const ADAM_EPS: f64 = 1e-8;

/// Adam moments, stored at `f32` precision like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let m = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            let v = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            self.m[i] = m as f32 as f64;
            self.v[i] = v as f32 as f64;
            let p = params[i] - cfg.learning_rate * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            params[i] = p as f32 as f64;
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Minibatch loss per step.
    pub trace: Vec<f64>,
    pub optimizer: AdamState,
}

/// Means of the first and last `window` entries of a loss trace.
pub fn smoothed_loss(trace: &[f64], window: usize) -> Option<(f64, f64)> {
    if window == 0 || trace.len() < window {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&trace[..window]), mean(&trace[trace.len() - window..])))
}

fn jittered(grid: &TetGrid, state: &GridState, offset: [f32; 3]) -> Result<DiffusionTensor> {
    let mut s = state.clone();
    for d in s.deformation_mut() {
        for a in 0..3 {
            d[a] += offset[a];
        }
    }
    s.clip_in_place(grid.max_deformation());
    Ok(grid.embed(&s)?.into_tensor())
}

/// Trains `net` on the denoising loss over `dataset` with Adam. Each step
/// draws its own items, translations, timesteps and noise from a stream
/// keyed by the seed and the global step count, so resuming from a saved
/// optimizer state reproduces an uninterrupted run.
pub fn train(
    net: &mut DenoiserNet,
    dataset: &[GridState],
    grid: &TetGrid,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    resume: Option<AdamState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    if let Some(i) = dataset.iter().position(|s| !s.is_normalized()) {
        return Err(Error::State(format!("training item {i} has unnormalized SDF values")));
    }
    let mut adam = resume.unwrap_or_else(|| AdamState::new(net.num_params()));
    if adam.m.len() != net.num_params() || adam.v.len() != net.num_params() {
        return Err(Error::Dimension {
            expected: net.num_params(),
            actual: adam.m.len(),
        });
    }
    let amp = (cfg.jitter * grid.max_deformation()) as f32;
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let step = adam.step;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step);
        let mut items = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..dataset.len());
            let offset = if amp > 0.0 {
                [0; 3].map(|_: i32| rng.random_range(-amp..=amp))
            } else {
                [0.0; 3]
            };
            let x0 = jittered(grid, &dataset[idx], offset)?;
            let t = rng.random_range(1..=sched.steps());
            let eps = standard_normal_like(&x0, &mut rng);
            items.push((x0, t, eps));
        }
        let model = &*net;
        let results: Vec<Result<(f64, Vec<f64>)>> = items
            .par_iter()
            .map(|(x0, t, eps)| {
                let x_t = forward_sample(x0, *t, eps, sched)?;
                let (out, cache) = model.forward_with_cache(&x_t, *t, sched)?;
                let active = (0..out.len()).filter(|&i| out.element_active(i)).count();
                if active == 0 {
                    return Err(Error::UndefinedLoss("mask selects no element".into()));
                }
                let scale = 2.0 / (active as f64 * cfg.batch_size as f64);
                let mut loss = 0.0;
                let upstream: Vec<f64> = (0..out.len())
                    .map(|i| {
                        if !out.element_active(i) {
                            return 0.0;
                        }
                        let d = out.data()[i] - eps.data()[i];
                        loss += d * d;
                        scale * d
                    })
                    .collect();
                let grad = model.backward_with(&cache, &upstream)?;
                Ok((loss / active as f64, grad))
            })
            .collect();
        let mut grad = vec![0.0; net.num_params()];
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        loss /= cfg.batch_size as f64;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric { step: step as usize });
        }
        adam.update(net.params_mut(), &grad, cfg);
        trace.push(loss);
        if (step + 1) % 100 == 0 {
            log::info!("step {} loss {:.5}", step + 1, loss);
        }
    }
    Ok(TrainOutcome {
        trace,
        optimizer: adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoremodel::NetConfig;

    fn setup() -> (TetGrid, Vec<GridState>) {
        let grid = TetGrid::bcc(4, 1.0).unwrap();
        let sdf = grid
            .positions()
            .iter()
            .map(|p| if p.iter().map(|c| c * c).sum::<f64>() < 0.25 { -1.0 } else { 1.0 })
            .collect();
        let s = GridState::normalized(vec![[0.0; 3]; grid.num_vertices()], sdf).unwrap();
        (grid, vec![s])
    }

    fn small_net() -> DenoiserNet {
        DenoiserNet::new(
            NetConfig {
                hidden: vec![8],
                ..NetConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn loss_decreases_on_a_single_shape() {
        let (grid, data) = setup();
        let sched = NoiseSchedule::default();
        let mut net = small_net();
        let cfg = TrainConfig {
            steps: 300,
            batch_size: 2,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let out = train(&mut net, &data, &grid, &sched, &cfg, None).unwrap();
        let (first, last) = smoothed_loss(&out.trace, 50).unwrap();
        assert!(last < 0.8 * first, "{first} -> {last}");
        assert!(net.params().iter().all(|&p| p == p as f32 as f64));
    }

    #[test]
    fn resuming_matches_an_uninterrupted_run() {
        let (grid, data) = setup();
        let sched = NoiseSchedule::default();
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut whole = small_net();
        let full = train(&mut whole, &data, &grid, &sched, &cfg, None).unwrap();
        let half = TrainConfig { steps: 3, ..cfg.clone() };
        let mut split = small_net();
        let a = train(&mut split, &data, &grid, &sched, &half, None).unwrap();
        let b = train(&mut split, &data, &grid, &sched, &half, Some(a.optimizer)).unwrap();
        assert_eq!(whole, split);
        assert_eq!(full.trace, [a.trace, b.trace].concat());
    }

    #[test]
    fn rejects_bad_input() {
        let (grid, data) = setup();
        let sched = NoiseSchedule::default();
        let mut net = small_net();
        let bad = TrainConfig {
            jitter: 0.2,
            ..TrainConfig::default()
        };
        assert!(train(&mut net, &data, &grid, &sched, &bad, None).is_err());
        assert!(train(&mut net, &[], &grid, &sched, &TrainConfig::default(), None).is_err());
        let raw = GridState::zeros(grid.num_vertices());
        let mut raw = raw;
        raw.sdf_mut()[0] = 0.3;
        assert!(matches!(
            train(&mut net, &[raw], &grid, &sched, &TrainConfig::default(), None),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn zero_steps_leave_the_network_unchanged() {
        let (grid, data) = setup();
        let sched = NoiseSchedule::default();
        let mut net = small_net();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train(&mut net, &data, &grid, &sched, &cfg, None).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(net, small_net());
    }

    #[test]
    fn same_seed_gives_identical_trace() {
        let (grid, data) = setup();
        let sched = NoiseSchedule::default();
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = small_net();
            let out = train(&mut net, &data, &grid, &sched, &cfg, None).unwrap();
            (net, out.trace)
        };
        assert_eq!(run(), run());
        let other = TrainConfig { seed: 10, ..cfg.clone() };
        let mut net = small_net();
        assert_ne!(train(&mut net, &data, &grid, &sched, &other, None).unwrap().trace, run().1);
    }

    /// Masked squared error and its gradient for one fixed item.
    fn frozen_loss(net: &DenoiserNet, x_t: &DiffusionTensor, t: usize, eps: &DiffusionTensor) -> (f64, Vec<f64>) {
        let sched = NoiseSchedule::default();
        let (out, cache) = net.forward_with_cache(x_t, t, &sched).unwrap();
        let mut loss = 0.0;
        let upstream: Vec<f64> = (0..out.len())
            .map(|i| {
                if !out.element_active(i) {
                    return 0.0;
                }
                let d = out.data()[i] - eps.data()[i];
                loss += d * d;
                2.0 * d
            })
            .collect();
        (loss, net.backward_with(&cache, &upstream).unwrap())
    }

    fn frozen_item(seed: u64) -> (DiffusionTensor, usize, DiffusionTensor) {
        let (grid, data) = setup();
        let x0 = grid.embed(&data[0]).unwrap().into_tensor();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = standard_normal_like(&x0, &mut rng);
        let x_t = forward_sample(&x0, 300, &eps, &NoiseSchedule::default()).unwrap();
        (x_t, 300, eps)
    }

    #[test]
    fn frozen_batch_loss_is_non_increasing() {
        let (x_t, t, eps) = frozen_item(4);
        let mut net = small_net();
        let cfg = TrainConfig {
            learning_rate: 1e-4,
            ..TrainConfig::default()
        };
        let mut adam = AdamState::new(net.num_params());
        let (mut prev, _) = frozen_loss(&net, &x_t, t, &eps);
        let start = prev;
        for step in 0..100 {
            let (_, grad) = frozen_loss(&net, &x_t, t, &eps);
            adam.update(net.params_mut(), &grad, &cfg);
            let (loss, _) = frozen_loss(&net, &x_t, t, &eps);
            assert!(loss <= prev, "step {step}: {prev} -> {loss}");
            prev = loss;
        }
        assert!(prev < start);
    }

    #[test]
    fn masked_inputs_do_not_affect_loss_or_gradient() {
        let (x_t, t, eps) = frozen_item(5);
        let net = small_net();
        let (loss, grad) = frozen_loss(&net, &x_t, t, &eps);
        let mut noisy = x_t.clone();
        let sites = noisy.sites();
        let mask = noisy.mask().to_vec();
        for (i, v) in noisy.data_mut().iter_mut().enumerate() {
            if !mask[i % sites] {
                *v = 7.0;
            }
        }
        let mut eps_noisy = eps.clone();
        for (i, v) in eps_noisy.data_mut().iter_mut().enumerate() {
            if !mask[i % sites] {
                *v = -3.0;
            }
        }
        let (loss2, grad2) = frozen_loss(&net, &noisy, t, &eps_noisy);
        assert!((loss - loss2).abs() <= 1e-12);
        assert!(grad.iter().zip(&grad2).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn smoothed_loss_windows() {
        assert_eq!(smoothed_loss(&[1.0, 2.0, 3.0, 4.0], 2), Some((1.5, 3.5)));
        assert_eq!(smoothed_loss(&[1.0], 2), None);
    }
}
