use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ScoreModel;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::lattice::DiffusionTensor;
use crate::tetgrid::embed::DATA_CHANNELS;

/// Architecture of the convolutional denoiser.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub data_channels: usize,
    /// Output widths of the hidden layers.
    pub hidden: Vec<usize>,
    /// Odd cubic kernel size.
    pub kernel: usize,
    /// Width of the sinusoidal time embedding.
    pub time_dim: usize,
    /// Per-layer kernel dilation, including the output layer; empty means
    /// all ones.
    pub dilations: Vec<usize>,
    pub head: Head,
    /// Feed normalized lattice coordinates to the first layer, trading
    /// translation equivariance for absolute position.
    pub coords: bool,
}

/// How the last layer's output `F` becomes ε̂.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// `ε̂ = F`.
    #[default]
    Epsilon,
    /// `F` predicts the velocity `√ᾱ_t ε - √(1-ᾱ_t) x₀`, so
    /// `ε̂ = √(1-ᾱ_t) x_t + √ᾱ_t F`. At high noise the prediction
    /// defaults to `ε̂ ≈ x_t` instead of amplifying errors in x̂₀.
    Velocity,
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(Head::Epsilon),
            "velocity" => Ok(Head::Velocity),
            other => Err(Error::Parameter(format!("unknown output head `{other}`"))),
        }
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            data_channels: DATA_CHANNELS,
            hidden: vec![16, 16],
            kernel: 3,
            time_dim: 16,
            dilations: Vec::new(),
            head: Head::Epsilon,
            coords: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_channels == 0 {
            return Err(Error::Parameter("network needs at least one data channel".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Parameter(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.time_dim == 0 || self.time_dim % 2 == 1 {
            return Err(Error::Parameter(format!(
                "time embedding width must be even and positive, got {}",
                self.time_dim
            )));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Parameter("hidden layers must be non-empty".into()));
        }
        if !self.dilations.is_empty() && self.dilations.len() != self.hidden.len() + 1 {
            return Err(Error::Parameter(format!(
                "need one dilation per layer ({}), got {}",
                self.hidden.len() + 1,
                self.dilations.len()
            )));
        }
        if self.dilations.contains(&0) {
            return Err(Error::Parameter("dilations must be positive".into()));
        }
        Ok(())
    }

    fn dilation(&self, layer: usize) -> usize {
        self.dilations.get(layer).copied().unwrap_or(1)
    }

    /// Lattice sites seen on each side of an output site.
    pub fn receptive_radius(&self) -> usize {
        (0..=self.hidden.len()).map(|l| self.dilation(l) * (self.kernel / 2)).sum()
    }
}

/// Which tensor of a layer a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    TimeWeight,
}

impl ParamKind {
    pub const ALL: [ParamKind; 3] = [ParamKind::ConvWeight, ParamKind::ConvBias, ParamKind::TimeWeight];

    pub fn label(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "conv weight",
            ParamKind::ConvBias => "conv bias",
            ParamKind::TimeWeight => "time weight",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    cin: usize,
    cout: usize,
    /// Input includes the occupancy mask as an extra channel.
    mask_in: bool,
    /// Input ends with three coordinate channels.
    coords_in: bool,
    act: bool,
    dilation: usize,
    w: usize,
    b: usize,
    tw: usize,
}

impl Layer {
    fn fan_in(&self, k: usize) -> usize {
        self.cin * k * k * k
    }
}

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    side: usize,
    /// Scale from the last layer's output to ε̂.
    out_scale: f64,
    mask: Vec<f64>,
    temb: Vec<f64>,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

/// `k`-cubed same-padded convolutions with SiLU between layers. The
/// occupancy mask enters as an extra input channel of the first and last
/// layer, and a sinusoidal time embedding is projected to per-channel
/// biases of every layer.
#[derive(Clone, Debug)]
pub struct DenoiserNet {
    cfg: NetConfig,
    layers: Vec<Layer>,
    params: Vec<f64>,
    cache: Option<ForwardCache>,
    fault: Option<usize>,
}

impl PartialEq for DenoiserNet {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.params == other.params
    }
}

/// `[sin(t ω_j), cos(t ω_j)]` with `ω_j = 10000^(-j/(D/2))`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let w = 10000f64.powf(-(j as f64) / half as f64);
        out[j] = (t as f64 * w).sin();
        out[half + j] = (t as f64 * w).cos();
    }
    out
}

/// `x`, `y` and `z` of every site, scaled to `[-1, 1]`.
fn coordinate_channels(n: usize) -> Vec<f64> {
    let scale = |i: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    let sites = n * n * n;
    let mut out = vec![0.0; 3 * sites];
    for s in 0..sites {
        out[s] = scale(s % n);
        out[sites + s] = scale(s / n % n);
        out[2 * sites + s] = scale(s / (n * n));
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn im2col(input: &[f64], cin: usize, n: usize, k: usize, dil: usize, cols: &mut [f64]) {
    let sites = n * n * n;
    let p = (k / 2) as isize;
    let dl = dil as isize;
    let ni = n as isize;
    for c in 0..cin {
        let src = &input[c * sites..(c + 1) * sites];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = ((c * k + kz) * k + ky) * k + kx;
                    let row = &mut cols[r * sites..(r + 1) * sites];
                    let (dz, dy, dx) = ((kz as isize - p) * dl, (ky as isize - p) * dl, (kx as isize - p) * dl);
                    let (x0, x1) = ((-dx).clamp(0, ni) as usize, (ni - dx).clamp(0, ni) as usize);
                    for z in 0..n {
                        let zz = z as isize + dz;
                        for y in 0..n {
                            let yy = y as isize + dy;
                            let dst = &mut row[(z * n + y) * n..(z * n + y + 1) * n];
                            if zz < 0 || zz >= ni || yy < 0 || yy >= ni {
                                dst.fill(0.0);
                                continue;
                            }
                            let base = (zz as usize * n + yy as usize) * n;
                            dst[..x0].fill(0.0);
                            dst[x1..].fill(0.0);
                            for x in x0..x1 {
                                dst[x] = src[(base as isize + x as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(cols: &[f64], cin: usize, n: usize, k: usize, dil: usize, out: &mut [f64]) {
    let sites = n * n * n;
    let p = (k / 2) as isize;
    let dl = dil as isize;
    let ni = n as isize;
    out.fill(0.0);
    for c in 0..cin {
        let dst = &mut out[c * sites..(c + 1) * sites];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = ((c * k + kz) * k + ky) * k + kx;
                    let row = &cols[r * sites..(r + 1) * sites];
                    let (dz, dy, dx) = ((kz as isize - p) * dl, (ky as isize - p) * dl, (kx as isize - p) * dl);
                    let (x0, x1) = ((-dx).clamp(0, ni) as usize, (ni - dx).clamp(0, ni) as usize);
                    for z in 0..n {
                        let zz = z as isize + dz;
                        if zz < 0 || zz >= ni {
                            continue;
                        }
                        for y in 0..n {
                            let yy = y as isize + dy;
                            if yy < 0 || yy >= ni {
                                continue;
                            }
                            let base = (zz as usize * n + yy as usize) * n;
                            let src = &row[(z * n + y) * n..(z * n + y + 1) * n];
                            for x in x0..x1 {
                                dst[(base as isize + x as isize + dx) as usize] += src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `C = A B` for row-major `A` (m×k, strides `rsa`, `csa`) and `B` (k×n).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index the strides address, and `c`
    // does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl DenoiserNet {
    /// All parameters zero: the network predicts ε̂ = 0.
    pub fn zeros(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let k3 = cfg.kernel.pow(3);
        let mut widths = cfg.hidden.clone();
        widths.push(cfg.data_channels);
        let last = widths.len() - 1;
        let mut layers = Vec::with_capacity(widths.len());
        let mut offset = 0;
        let mut prev = cfg.data_channels;
        for (l, &cout) in widths.iter().enumerate() {
            let mask_in = l == 0 || l == last;
            let coords_in = l == 0 && cfg.coords;
            let cin = prev + usize::from(mask_in) + 3 * usize::from(coords_in);
            let w = offset;
            let b = w + cout * cin * k3;
            let tw = b + cout;
            offset = tw + cout * cfg.time_dim;
            layers.push(Layer {
                cin,
                cout,
                mask_in,
                coords_in,
                act: l != last,
                dilation: cfg.dilation(l),
                w,
                b,
                tw,
            });
            prev = cout;
        }
        Ok(Self {
            cfg,
            layers,
            params: vec![0.0; offset],
            cache: None,
            fault: None,
        })
    }

    /// He-normal conv weights scaled down on the output layer, small time
    /// weights and zero biases, all rounded to `f32`.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = net.cfg.kernel;
        let last = net.layers.len() - 1;
        for (l, layer) in net.layers.clone().iter().enumerate() {
            let gain = if l == last { 0.1 } else { 1.0 };
            let std = gain * (2.0 / layer.fan_in(k) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut net.params[layer.w..layer.b] {
                *p = normal.sample(&mut rng) as f32 as f64;
            }
            let tnormal = Normal::new(0.0, 0.1 / (net.cfg.time_dim as f64).sqrt()).expect("positive std");
            for p in &mut net.params[layer.tw..layer.tw + layer.cout * net.cfg.time_dim] {
                *p = tnormal.sample(&mut rng) as f32 as f64;
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Replaces the parameter vector; values are rounded to `f32`.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params = params.into_iter().map(|p| p as f32 as f64).collect();
        self.cache = None;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        self.cache = None;
        &mut self.params
    }

    /// Index range of one parameter tensor of `layer`.
    pub fn param_range(&self, layer: usize, kind: ParamKind) -> Range<usize> {
        let l = &self.layers[layer];
        match kind {
            ParamKind::ConvWeight => l.w..l.b,
            ParamKind::ConvBias => l.b..l.tw,
            ParamKind::TimeWeight => l.tw..l.tw + l.cout * self.cfg.time_dim,
        }
    }

    /// Corrupts the conv weight gradient of `layer` so that gradient
    /// checking can be shown to catch it.
    #[doc(hidden)]
    pub fn inject_gradient_fault(&mut self, layer: Option<usize>) {
        self.fault = layer;
    }

    fn check_input(&self, x: &DiffusionTensor) -> Result<()> {
        if x.channels() != self.cfg.data_channels {
            return Err(Error::Dimension {
                expected: self.cfg.data_channels,
                actual: x.channels(),
            });
        }
        if !x.is_finite() {
            return Err(Error::Parameter("network input has non-finite values".into()));
        }
        Ok(())
    }

    fn run(
        &self,
        x: &DiffusionTensor,
        t: usize,
        sched: &NoiseSchedule,
        keep: bool,
    ) -> Result<(DiffusionTensor, Option<ForwardCache>)> {
        self.check_input(x)?;
        sched.check_t(t)?;
        let n = x.side();
        let sites = x.sites();
        let k = self.cfg.kernel;
        let d = self.cfg.time_dim;
        let mask: Vec<f64> = x.mask().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let temb = time_embedding(t, d);
        let mut h = x.data().to_vec();
        for (i, v) in h.iter_mut().enumerate() {
            *v *= mask[i % sites];
        }
        let mut inputs = Vec::new();
        let mut pres = Vec::new();
        let mut cols = Vec::new();
        for layer in &self.layers {
            let mut input = h;
            if layer.mask_in {
                input.extend_from_slice(&mask);
            }
            if layer.coords_in {
                input.extend(coordinate_channels(n));
            }
            let rows = layer.fan_in(k);
            cols.resize(rows * sites, 0.0);
            im2col(&input, layer.cin, n, k, layer.dilation, &mut cols);
            let mut z = vec![0.0; layer.cout * sites];
            gemm(layer.cout, rows, sites, &self.params[layer.w..layer.b], rows, 1, &cols, sites, 1, &mut z);
            for o in 0..layer.cout {
                let tw = &self.params[layer.tw + o * d..layer.tw + (o + 1) * d];
                let bias = self.params[layer.b + o] + tw.iter().zip(&temb).map(|(w, e)| w * e).sum::<f64>();
                z[o * sites..(o + 1) * sites].iter_mut().for_each(|v| *v += bias);
            }
            h = if layer.act {
                z.iter().map(|&v| v * sigmoid(v)).collect()
            } else {
                z.clone()
            };
            if keep {
                inputs.push(input);
                pres.push(z);
            }
        }
        let out_scale = match self.cfg.head {
            Head::Epsilon => 1.0,
            Head::Velocity => {
                let (skip, scale) = (sched.sqrt_one_minus_alpha_bar(t), sched.sqrt_alpha_bar(t));
                for (v, xv) in h.iter_mut().zip(x.data()) {
                    *v = skip * xv + scale * *v;
                }
                scale
            }
        };
        let out = DiffusionTensor::from_data(n, self.cfg.data_channels, h, x.mask().clone())?;
        let cache = keep.then(|| ForwardCache {
            side: n,
            out_scale,
            mask,
            temb,
            inputs,
            pre: pres,
        });
        Ok((out, cache))
    }

    /// Forward pass that also returns the activations needed by
    /// [`DenoiserNet::backward_with`].
    pub fn forward_with_cache(
        &self,
        x: &DiffusionTensor,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<(DiffusionTensor, ForwardCache)> {
        let (out, cache) = self.run(x, t, sched, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    /// Forward pass that keeps its activations for [`DenoiserNet::backward`].
    pub fn forward(&mut self, x: &DiffusionTensor, t: usize, sched: &NoiseSchedule) -> Result<DiffusionTensor> {
        let (out, cache) = self.forward_with_cache(x, t, sched)?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Gradient of the parameters given `∂L/∂ε̂` for the most recent
    /// [`DenoiserNet::forward`]. Consumes the stored activations.
    pub fn backward(&mut self, upstream: &[f64]) -> Result<Vec<f64>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a preceding forward".into()))?;
        self.backward_with(&cache, upstream)
    }

    /// Gradient of the parameters given `∂L/∂ε̂` for the pass that produced
    /// `cache`. Upstream values at mask-0 sites are ignored.
    pub fn backward_with(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>> {
        let n = cache.side;
        let sites = n * n * n;
        let k = self.cfg.kernel;
        let d = self.cfg.time_dim;
        let expected = self.cfg.data_channels * sites;
        if upstream.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: upstream.len(),
            });
        }
        let mut g: Vec<f64> = upstream
            .iter()
            .enumerate()
            .map(|(i, v)| v * cache.mask[i % sites] * cache.out_scale)
            .collect();
        let mut grad = vec![0.0; self.params.len()];
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.act {
                for (gv, &z) in g.iter_mut().zip(&cache.pre[l]) {
                    let s = sigmoid(z);
                    *gv *= s * (1.0 + z * (1.0 - s));
                }
            }
            let rows = layer.fan_in(k);
            cols.resize(rows * sites, 0.0);
            im2col(&cache.inputs[l], layer.cin, n, k, layer.dilation, &mut cols);
            gemm(layer.cout, sites, rows, &g, sites, 1, &cols, 1, sites, &mut grad[layer.w..layer.b]);
            if self.fault == Some(l) {
                grad[layer.w..layer.b].iter_mut().for_each(|v| *v *= 1.5);
            }
            for o in 0..layer.cout {
                let s: f64 = g[o * sites..(o + 1) * sites].iter().sum();
                grad[layer.b + o] = s;
                for j in 0..d {
                    grad[layer.tw + o * d + j] = s * cache.temb[j];
                }
            }
            if l > 0 {
                dcols.resize(rows * sites, 0.0);
                gemm(rows, layer.cout, sites, &self.params[layer.w..layer.b], 1, rows, &g, sites, 1, &mut dcols);
                let mut gin = vec![0.0; layer.cin * sites];
                col2im(&dcols, layer.cin, n, k, layer.dilation, &mut gin);
                let data_in = layer.cin - usize::from(layer.mask_in) - 3 * usize::from(layer.coords_in);
                gin.truncate(data_in * sites);
                g = gin;
            }
        }
        Ok(grad)
    }
}

impl ScoreModel for DenoiserNet {
    fn name(&self) -> &str {
        "conv"
    }

    fn trainable(&self) -> bool {
        true
    }

    fn eval(&self, x_t: &DiffusionTensor, t: usize, sched: &NoiseSchedule) -> Result<DiffusionTensor> {
        Ok(self.run(x_t, t, sched, false)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(side: usize, seed: u64, full: bool) -> DiffusionTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites = side.pow(3);
        let mask: Vec<bool> = (0..sites).map(|s| full || s % 3 != 0).collect();
        let data = (0..4 * sites).map(|_| rng.random_range(-1.0..1.0)).collect();
        DiffusionTensor::from_data(side, 4, data, mask.into()).unwrap()
    }

    /// Direct nested-loop convolution of one layer without bias.
    fn naive_conv(input: &[f64], cin: usize, w: &[f64], cout: usize, n: usize, k: usize, dil: isize) -> Vec<f64> {
        let sites = n * n * n;
        let p = (k / 2) as isize;
        let mut out = vec![0.0; cout * sites];
        for o in 0..cout {
            for z in 0..n as isize {
                for y in 0..n as isize {
                    for x in 0..n as isize {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for kz in 0..k as isize {
                                for ky in 0..k as isize {
                                    for kx in 0..k as isize {
                                        let (zz, yy, xx) = (z + (kz - p) * dil, y + (ky - p) * dil, x + (kx - p) * dil);
                                        if [zz, yy, xx].iter().any(|&v| v < 0 || v >= n as isize) {
                                            continue;
                                        }
                                        let wi = ((o * cin + c) * k + kz as usize) * k * k + ky as usize * k + kx as usize;
                                        let si = c * sites + ((zz as usize * n + yy as usize) * n + xx as usize);
                                        acc += w[wi] * input[si];
                                    }
                                }
                            }
                        }
                        out[o * sites + ((z as usize * n + y as usize) * n + x as usize)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let (n, cin, cout) = (5, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input: Vec<f64> = (0..cin * n * n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (k, dil) in [(3, 1), (3, 2), (1, 1), (5, 1), (3, 6)] {
            let w: Vec<f64> = (0..cout * cin * k * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rows = cin * k * k * k;
            let mut cols = vec![0.0; rows * n * n * n];
            im2col(&input, cin, n, k, dil, &mut cols);
            let mut z = vec![0.0; cout * n * n * n];
            gemm(cout, rows, n * n * n, &w, rows, 1, &cols, n * n * n, 1, &mut z);
            let direct = naive_conv(&input, cin, &w, cout, n, k, dil as isize);
            for (a, b) in z.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12, "k={k} dil={dil}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (n, k, cin) = (4, 3, 2);
        let rows = cin * k * k * k;
        let sites = n * n * n;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..cin * sites).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..rows * sites).map(|_| rng.random_range(-1.0..1.0)).collect();
        for dil in [1, 2, 3] {
            let mut cols = vec![0.0; rows * sites];
            im2col(&x, cin, n, k, dil, &mut cols);
            let mut back = vec![0.0; cin * sites];
            col2im(&y, cin, n, k, dil, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_network_predicts_zero() {
        let net = DenoiserNet::zeros(NetConfig::default()).unwrap();
        let x = random_tensor(5, 3, false);
        let out = net.eval(&x, 10, &NoiseSchedule::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_masked_and_input_at_masked_sites_is_ignored() {
        let net = DenoiserNet::new(NetConfig::default(), 4).unwrap();
        let sched = NoiseSchedule::default();
        let x = random_tensor(5, 5, false);
        let out = net.eval(&x, 500, &sched).unwrap();
        let sites = x.sites();
        for i in 0..out.len() {
            if !x.mask()[i % sites] {
                assert_eq!(out.data()[i], 0.0);
            }
        }
        // a tensor whose masked entries were mutated behind the mask
        let mut y = x.clone();
        for i in 0..y.len() {
            if !x.mask()[i % sites] {
                y.data_mut()[i] = 5.0;
            }
        }
        assert_eq!(net.eval(&y, 500, &sched).unwrap(), out);
    }

    #[test]
    fn translation_equivariant_in_interior() {
        let net = DenoiserNet::new(NetConfig::default(), 6).unwrap();
        let sched = NoiseSchedule::default();
        let n = 11;
        let x = random_tensor(n, 7, true);
        let mut shifted = x.clone();
        for c in 0..4 {
            for z in 0..n {
                for y in 0..n {
                    for xx in 0..n {
                        let src = if xx == 0 { 0.0 } else { x.data()[x.index(c, x.site_index(xx - 1, y, z))] };
                        let i = x.index(c, x.site_index(xx, y, z));
                        shifted.data_mut()[i] = src;
                    }
                }
            }
        }
        let a = net.eval(&x, 300, &sched).unwrap();
        let b = net.eval(&shifted, 300, &sched).unwrap();
        // receptive field radius is 3; stay clear of every boundary
        for c in 0..4 {
            for z in 3..n - 3 {
                for y in 3..n - 3 {
                    for xx in 4..n - 3 {
                        let va = a.data()[a.index(c, a.site_index(xx - 1, y, z))];
                        let vb = b.data()[b.index(c, b.site_index(xx, y, z))];
                        assert!((va - vb).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn single_layer_gradient_matches_hand_derivative() {
        // one 1x1x1 layer: out = w0 x + w1 m + b + tw . e(t)
        let cfg = NetConfig {
            data_channels: 1,
            hidden: vec![],
            kernel: 1,
            time_dim: 2,
            dilations: vec![],
            head: Head::Epsilon,
            coords: false,
        };
        let mut net = DenoiserNet::zeros(cfg).unwrap();
        net.set_params(vec![0.5, -0.25, 0.125, 0.0, 0.0]).unwrap();
        let mask: Vec<bool> = vec![true, true, false, true, true, true, true, true];
        let data = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let x = DiffusionTensor::from_data(2, 1, data.clone(), mask.clone().into()).unwrap();
        let out = net.forward(&x, 0, &NoiseSchedule::default()).unwrap();
        let target = vec![0.3; 8];
        let up: Vec<f64> = out.data().iter().zip(&target).map(|(a, b)| a - b).collect();
        let g = net.backward(&up).unwrap();
        let residual = |i: usize| 0.5 * data[i] - 0.25 + 0.125 + 1.0 * 0.0 - 0.3;
        let active: Vec<usize> = (0..8).filter(|&i| mask[i]).collect();
        let dw0: f64 = active.iter().map(|&i| residual(i) * data[i]).sum();
        let db: f64 = active.iter().map(|&i| residual(i)).sum();
        assert!((g[0] - dw0).abs() < 1e-15);
        assert!((g[1] - db).abs() < 1e-15, "mask channel weight sees ones");
        assert!((g[2] - db).abs() < 1e-15);
        // e(0) = [sin 0, cos 0]
        assert_eq!(g[3], 0.0);
        assert!((g[4] - db).abs() < 1e-15);
    }

    #[test]
    fn velocity_head_skips_the_input() {
        let sched = NoiseSchedule::default();
        let net = DenoiserNet::zeros(NetConfig {
            head: Head::Velocity,
            ..NetConfig::default()
        })
        .unwrap();
        let x = random_tensor(4, 23, false);
        for t in [1, 500, 1000] {
            let out = net.eval(&x, t, &sched).unwrap();
            let a = sched.sqrt_one_minus_alpha_bar(t);
            assert!(out.data().iter().zip(x.data()).all(|(o, v)| (o - a * v).abs() < 1e-15));
        }
        assert_eq!("velocity".parse::<Head>().unwrap(), Head::Velocity);
    }

    #[test]
    fn coordinate_channels_span_the_lattice() {
        let c = coordinate_channels(3);
        assert_eq!(&c[..3], &[-1.0, 0.0, 1.0]);
        assert_eq!(c[27 + 3], 0.0);
        assert_eq!(c[54 + 26], 1.0);
        let cfg = NetConfig {
            coords: true,
            ..NetConfig::default()
        };
        let net = DenoiserNet::zeros(cfg).unwrap();
        assert_eq!(net.param_range(0, ParamKind::ConvWeight).len(), 16 * 8 * 27);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut net = DenoiserNet::new(NetConfig::default(), 20).unwrap();
        let x = random_tensor(4, 21, false);
        net.forward(&x, 7, &NoiseSchedule::default()).unwrap();
        let g = net.backward(&vec![0.0; x.len()]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dilation_widens_the_receptive_field() {
        let cfg = NetConfig {
            dilations: vec![1, 2, 4],
            ..NetConfig::default()
        };
        assert_eq!(cfg.receptive_radius(), 7);
        assert_eq!(NetConfig::default().receptive_radius(), 3);
        assert!(NetConfig {
            dilations: vec![1, 2],
            ..NetConfig::default()
        }
        .validate()
        .is_err());
        let net = DenoiserNet::new(cfg, 22).unwrap();
        let sched = NoiseSchedule::default();
        let n = 15;
        let base = DiffusionTensor::zeros(n, 4, DiffusionTensor::full_mask(n)).unwrap();
        let mut poked = base.clone();
        let i = poked.index(0, poked.site_index(7, 7, 7));
        poked.data_mut()[i] = 1.0;
        let (a, b) = (net.eval(&base, 5, &sched).unwrap(), net.eval(&poked, 5, &sched).unwrap());
        let far = a.index(0, a.site_index(0, 7, 7));
        assert_ne!(a.data()[far], b.data()[far], "site 7 lattice steps away is reached");
        let out_of_reach = DiffusionTensor::zeros(17, 4, DiffusionTensor::full_mask(17)).unwrap();
        let mut poke2 = out_of_reach.clone();
        let j = poke2.index(0, poke2.site_index(15, 8, 8));
        poke2.data_mut()[j] = 1.0;
        let (c, d) = (net.eval(&out_of_reach, 5, &sched).unwrap(), net.eval(&poke2, 5, &sched).unwrap());
        let k = c.index(0, c.site_index(7, 8, 8));
        assert_eq!(c.data()[k], d.data()[k], "site 8 lattice steps away is not");
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = DenoiserNet::zeros(NetConfig::default()).unwrap();
        assert!(matches!(net.backward(&[0.0]), Err(Error::State(_))));
        let x = random_tensor(4, 8, true);
        net.forward(&x, 3, &NoiseSchedule::default()).unwrap();
        assert!(matches!(net.backward(&[0.0]), Err(Error::Dimension { .. })));
        assert!(net.backward(&vec![0.0; x.len()]).is_err(), "cache is consumed");
    }

    #[test]
    fn layout_and_validation() {
        let net = DenoiserNet::zeros(NetConfig::default()).unwrap();
        assert_eq!(net.num_layers(), 3);
        // (5*27+1+16)*16 + (16*27+1+16)*16 + (17*27+1+16)*4
        assert_eq!(net.num_params(), (5 * 27 + 17) * 16 + (16 * 27 + 17) * 16 + (17 * 27 + 17) * 4);
        let bad = NetConfig {
            kernel: 2,
            ..NetConfig::default()
        };
        assert!(DenoiserNet::zeros(bad).is_err());
        let x = DiffusionTensor::zeros(4, 3, DiffusionTensor::full_mask(4)).unwrap();
        assert!(net.eval(&x, 1, &NoiseSchedule::default()).is_err());
    }

    #[test]
    fn time_embedding_values() {
        let e = time_embedding(0, 4);
        assert_eq!(e, vec![0.0, 0.0, 1.0, 1.0]);
        let e = time_embedding(3, 4);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[1] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }
}
