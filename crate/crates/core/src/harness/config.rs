//! Versioned TOML experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{KernelSpec, TargetReturn};
use crate::safe_opt::{Distance, Grid, PlsConfig, PriorMean};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Synthetic,
    Cmdp,
    TheoryCheck,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Synthetic => "synthetic",
            ExperimentKind::Cmdp => "cmdp",
            ExperimentKind::TheoryCheck => "theory-check",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub threshold: f64,
    #[serde(default = "default_delta")]
    pub failure_probability: f64,
    /// Defaults to `0.05 · threshold`.
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub lipschitz: f64,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default = "default_episodes")]
    pub episodes_per_eval: usize,
    #[serde(default = "default_iters")]
    pub max_exploration_iters: usize,
    #[serde(default = "default_iters")]
    pub max_maximization_iters: usize,
    pub noise_r: Option<f64>,
    pub noise_g: Option<f64>,
    #[serde(default)]
    pub prior_mean: PriorMean,
    /// Target return of the known-safe seed; the nearest grid point is used.
    pub initial_safe: Option<[f64; 2]>,
}

fn default_delta() -> f64 {
    0.1
}

fn default_episodes() -> usize {
    20
}

fn default_iters() -> usize {
    50
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub r_min: f64,
    pub r_max: f64,
    pub r_points: usize,
    pub g_min: f64,
    pub g_max: f64,
    pub g_points: usize,
}

impl GridSection {
    pub fn build(&self) -> Result<Grid> {
        Grid::lattice(
            (self.r_min, self.r_max),
            self.r_points,
            (self.g_min, self.g_max),
            self.g_points,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    /// Constant added to the reward sample path.
    #[serde(default)]
    pub reward_offset: f64,
    /// Constant added to the cost sample path.
    pub cost_offset: f64,
    /// Standard deviation of Gaussian observation noise.
    pub noise_std: f64,
    /// Required slack `b − J_g` at the seed point.
    #[serde(default)]
    pub seed_margin: f64,
    /// Redraws allowed until the seed point is safe.
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

fn default_attempts() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmdpSection {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    pub dataset_size: usize,
    pub bin_width_r: f64,
    pub bin_width_g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    pub instances: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub max_horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSection {
    pub r_min: f64,
    pub r_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    #[serde(default = "default_name")]
    pub name: String,
    pub seeds: usize,
    #[serde(default)]
    pub master_seed: u64,
    pub output_dir: Option<PathBuf>,
    pub optimizer: Option<OptimizerSection>,
    pub grid: Option<GridSection>,
    pub kernel_r: Option<KernelSpec>,
    pub kernel_g: Option<KernelSpec>,
    pub synthetic: Option<SyntheticSection>,
    pub cmdp: Option<CmdpSection>,
    pub theory: Option<TheorySection>,
    /// Reward anchors; taken from the offline dataset when absent.
    pub normalization: Option<NormalizationSection>,
    /// Directory of the config file, for resolving relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
    #[serde(skip)]
    pub source: PathBuf,
}

fn default_name() -> String {
    "experiment".into()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, source: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: source.to_path_buf(),
            field: offending_field(e.message()),
            message: e.message().trim().to_string(),
        })?;
        cfg.source = source.to_path_buf();
        cfg.base_dir = source.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    fn field_err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Config {
            path: self.source.clone(),
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn require<'a, T>(&self, v: &'a Option<T>, field: &str) -> Result<&'a T> {
        v.as_ref()
            .ok_or_else(|| self.field_err(field, format!("required for kind `{}`", self.kind.as_str())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(self.field_err(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        if self.seeds == 0 {
            return Err(self.field_err("seeds", "must be >= 1"));
        }
        if let Some(n) = &self.normalization {
            if !(n.r_max > n.r_min) {
                return Err(self.field_err("normalization", "r_max must exceed r_min"));
            }
        }
        match self.kind {
            ExperimentKind::TheoryCheck => {
                let t = self.require(&self.theory, "theory")?;
                if t.instances == 0 || t.max_states == 0 || t.max_actions == 0 || t.max_horizon == 0 {
                    return Err(self.field_err("theory", "all sizes must be >= 1"));
                }
            }
            kind => {
                let opt = self.require(&self.optimizer, "optimizer")?;
                self.require(&self.grid, "grid")?
                    .build()
                    .map_err(|e| self.field_err("grid", e.to_string()))?;
                for (name, k) in [("kernel_r", &self.kernel_r), ("kernel_g", &self.kernel_g)] {
                    self.require(k, name)?
                        .validate()
                        .map_err(|e| self.field_err(name, e.to_string()))?;
                }
                if kind == ExperimentKind::Synthetic {
                    let s = self.require(&self.synthetic, "synthetic")?;
                    if !(s.noise_std >= 0.0) {
                        return Err(self.field_err("synthetic.noise_std", "must be >= 0"));
                    }
                    if !(s.seed_margin >= 0.0) {
                        return Err(self.field_err("synthetic.seed_margin", "must be >= 0"));
                    }
                    self.require(&opt.initial_safe, "optimizer.initial_safe")?;
                } else {
                    let c = self.require(&self.cmdp, "cmdp")?;
                    if c.dataset_size == 0 {
                        return Err(self.field_err("cmdp.dataset_size", "must be >= 1"));
                    }
                    if !self.cmdp_path().unwrap().exists() {
                        return Err(self.field_err("cmdp.path", format!("{} not found", c.path.display())));
                    }
                }
                self.pls_config(vec![0])
                    .map_err(|e| self.field_err("optimizer", e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn cmdp_path(&self) -> Option<PathBuf> {
        self.cmdp.as_ref().map(|c| self.base_dir.join(&c.path))
    }

    pub fn grid(&self) -> Result<Grid> {
        self.require(&self.grid, "grid")?.build()
    }

    /// Optimizer settings with the given seed set.
    pub fn pls_config(&self, initial_safe_set: Vec<usize>) -> Result<PlsConfig> {
        let opt = self.require(&self.optimizer, "optimizer")?;
        let mut cfg = PlsConfig::new(
            self.grid()?,
            opt.threshold,
            initial_safe_set,
            *self.require(&self.kernel_r, "kernel_r")?,
            *self.require(&self.kernel_g, "kernel_g")?,
        );
        cfg.failure_probability = opt.failure_probability;
        if let Some(t) = opt.tolerance {
            cfg.tolerance = t;
        }
        cfg.lipschitz = opt.lipschitz;
        cfg.distance = opt.distance;
        cfg.episodes_per_eval = opt.episodes_per_eval;
        cfg.max_exploration_iters = opt.max_exploration_iters;
        cfg.max_maximization_iters = opt.max_maximization_iters;
        cfg.noise_r = opt.noise_r;
        cfg.noise_g = opt.noise_g;
        cfg.prior_mean = opt.prior_mean;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn initial_safe_point(&self) -> Option<TargetReturn> {
        self.optimizer
            .as_ref()
            .and_then(|o| o.initial_safe)
            .map(|[r, g]| TargetReturn::new(r, g))
    }
}

fn offending_field(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".to_string())
}
