//! Pipeline configuration.
//!
//! A config file holds `section.key = value` lines (TOML dotted keys, so
//! `[section]` tables work too). Missing keys take their defaults, unknown
//! keys are rejected, and `--set key=value` overrides win over file values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tetdiff::diffusion::{make_schedule, NoiseSchedule, SamplerParams, SamplerRegistry, Spacing};
use tetdiff::fitting::FitConfig;
use tetdiff::metrics::{EmdMode, EvalConfig};
use tetdiff::scoremodel::{GridSpec, Head, NetConfig, TrainConfig};
use tetdiff::tetgrid::embed::DATA_CHANNELS;
use tetdiff::tetgrid::{TetGrid, DEFAULT_DEFORMATION_SCALE};
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` expects {expected}, got `{found}`")]
    Type {
        key: String,
        expected: &'static str,
        found: String,
    },
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub resolution: usize,
    pub extent: f64,
    /// Deformation bound as a multiple of the cell edge.
    pub deformation_scale: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            resolution: 8,
            extent: 1.0,
            deformation_scale: DEFAULT_DEFORMATION_SCALE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    #[serde(rename = "T")]
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampler: String,
    /// Reduced step count for DDIM.
    pub steps: usize,
    pub spacing: String,
    pub clip: bool,
    /// Step at which replacement conditioning stops during completion.
    pub unfreeze_t: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            t_max: tetdiff::diffusion::DEFAULT_T,
            beta_start: tetdiff::diffusion::DEFAULT_BETA_START,
            beta_end: tetdiff::diffusion::DEFAULT_BETA_END,
            sampler: "ddim".into(),
            steps: tetdiff::diffusion::DEFAULT_DDIM_STEPS,
            spacing: "quadratic".into(),
            clip: true,
            unfreeze_t: tetdiff::diffusion::DEFAULT_UNFREEZE_T,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessSection {
    pub smooth_lambda: f64,
    pub smooth_steps: usize,
    pub component_fraction: f64,
    /// Regenerate deformations for the sampled signs before extraction.
    pub refine: bool,
}

impl Default for PostprocessSection {
    fn default() -> Self {
        Self {
            smooth_lambda: tetdiff::meshops::DEFAULT_SMOOTH_LAMBDA,
            smooth_steps: tetdiff::meshops::DEFAULT_SMOOTH_STEPS,
            component_fraction: tetdiff::meshops::DEFAULT_COMPONENT_FRACTION,
            refine: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Points sampled per shape.
    pub cloud_size: usize,
    pub voxel_res: usize,
    pub emd: bool,
    pub emd_exact: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            cloud_size: tetdiff::metrics::DEFAULT_CLOUD_SIZE,
            voxel_res: tetdiff::metrics::DEFAULT_VOXEL_RES,
            emd: true,
            emd_exact: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Directory of fitted `.tetg` states.
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data: "data".into(),
            checkpoint: "model.mdck".into(),
            out: "out".into(),
        }
    }
}

/// Denoiser used when the config does not override it: three dilated
/// hidden layers with coordinate inputs and a velocity head.
pub fn default_model() -> NetConfig {
    NetConfig {
        hidden: vec![16, 16, 16],
        dilations: vec![1, 2, 4, 1],
        head: Head::Velocity,
        coords: true,
        ..NetConfig::default()
    }
}

fn default_train() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Base seed for network initialization, sampling and evaluation.
    pub seed: u64,
    pub grid: GridSection,
    pub fit: FitConfig,
    pub diffusion: DiffusionSection,
    pub train: TrainConfig,
    pub model: NetConfig,
    pub postprocess: PostprocessSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: GridSection::default(),
            fit: FitConfig::default(),
            diffusion: DiffusionSection::default(),
            train: default_train(),
            model: default_model(),
            postprocess: PostprocessSection::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }
}

fn invalid(key: &str, message: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.to_string(),
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.grid_spec().build().map_err(|e| invalid("grid", e))?;
        self.fit.validate().map_err(|e| invalid("fit", e))?;
        let d = &self.diffusion;
        if d.t_max == 0 {
            return Err(invalid("diffusion.T", "must be positive"));
        }
        make_schedule(d.t_max, d.beta_start, d.beta_end).map_err(|e| invalid("diffusion.beta_start", e))?;
        if !SamplerRegistry::default().names().contains(&d.sampler.as_str()) {
            return Err(invalid("diffusion.sampler", format!("unknown sampler `{}`", d.sampler)));
        }
        d.spacing.parse::<Spacing>().map_err(|e| invalid("diffusion.spacing", e))?;
        if d.steps == 0 || d.steps > d.t_max {
            return Err(invalid("diffusion.steps", format!("must lie in 1..={}", d.t_max)));
        }
        if d.unfreeze_t > d.t_max {
            return Err(invalid("diffusion.unfreeze_t", format!("must not exceed T = {}", d.t_max)));
        }
        self.train.validate().map_err(|e| invalid("train", e))?;
        self.model.validate().map_err(|e| invalid("model", e))?;
        if self.model.data_channels != DATA_CHANNELS {
            return Err(invalid("model.data_channels", format!("grid states have {DATA_CHANNELS} channels")));
        }
        let p = &self.postprocess;
        if !(p.smooth_lambda > 0.0 && p.smooth_lambda <= 1.0) {
            return Err(invalid("postprocess.smooth_lambda", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&p.component_fraction) {
            return Err(invalid("postprocess.component_fraction", "must lie in [0, 1)"));
        }
        if self.eval.cloud_size == 0 {
            return Err(invalid("eval.cloud_size", "must be positive"));
        }
        if self.eval.voxel_res == 0 {
            return Err(invalid("eval.voxel_res", "must be positive"));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            resolution: self.grid.resolution,
            extent: self.grid.extent,
            deformation_scale: self.grid.deformation_scale,
        }
    }

    pub fn grid(&self) -> tetdiff::Result<TetGrid> {
        self.grid_spec().build()
    }

    pub fn schedule(&self) -> tetdiff::Result<NoiseSchedule> {
        make_schedule(self.diffusion.t_max, self.diffusion.beta_start, self.diffusion.beta_end)
    }

    pub fn sampler_params(&self) -> tetdiff::Result<SamplerParams> {
        Ok(SamplerParams {
            steps: self.diffusion.steps,
            spacing: self.diffusion.spacing.parse()?,
            clip: self.diffusion.clip,
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            with_emd: self.eval.emd,
            emd_mode: if self.eval.emd_exact {
                EmdMode::Exact
            } else {
                EmdMode::Approximate
            },
            voxel_res: self.eval.voxel_res,
            seed: self.seed,
        }
    }
}

/// Leaves of a table as dotted keys, in document order.
fn leaves(table: &Table, prefix: &str, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => leaves(t, &key, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a number",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

/// Checks `value` against the default at `key` and stores it.
fn assign(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut table = &mut *root;
    for p in parts {
        table = match table.get_mut(p) {
            Some(Value::Table(t)) => t,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        };
    }
    let slot = table.get_mut(last).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
    let mismatch = |expected| ConfigError::Type {
        key: key.into(),
        expected,
        found: value.to_string(),
    };
    let value = match (&*slot, value.clone()) {
        (Value::Integer(_), Value::Integer(i)) if i < 0 => {
            return Err(invalid(key, format!("must be a non-negative integer, got {i}")));
        }
        (Value::Integer(_), v @ Value::Integer(_)) => v,
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (Value::Float(_), v @ Value::Float(_)) => v,
        (Value::String(_), v @ Value::String(_)) => v,
        (Value::Boolean(_), v @ Value::Boolean(_)) => v,
        (Value::Array(_), Value::Array(items)) => {
            if let Some(bad) = items.iter().find(|v| !matches!(v, Value::Integer(i) if *i >= 0)) {
                return Err(ConfigError::Type {
                    key: key.into(),
                    expected: "an array of non-negative integers",
                    found: bad.to_string(),
                });
            }
            Value::Array(items)
        }
        (expected, _) => return Err(mismatch(kind(expected))),
    };
    *slot = value;
    Ok(())
}

/// Parses one `key=value` override. Values that are not valid TOML are
/// taken as bare strings.
fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| ConfigError::Syntax(format!("override `{text}` is not of the form key=value")))?;
    let key = key.trim().to_string();
    let raw = value.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key is present"),
        Err(_) => Value::String(raw.into()),
    };
    Ok((key, value))
}

/// Defaults, then the file's values, then `overrides`, then validation.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<Config> {
    let file: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let mut root = match Value::try_from(Config::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    };
    let mut entries = Vec::new();
    leaves(&file, "", &mut entries);
    for o in overrides {
        entries.push(parse_override(o)?);
    }
    for (key, value) in entries {
        assign(&mut root, &key, value)?;
    }
    let cfg: Config = Value::Table(root)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|source| ConfigError::Io {
            path: p.to_path_buf(),
            source,
        })?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}
