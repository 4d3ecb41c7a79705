//! Experiment configuration: TOML schema, defaults and validation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoherence::{CouplingForm, KernelSpec};
use crate::error::{Error, Result};
use crate::estimator::{Constraint, FitSettings};
use crate::geometry::{DirectionSpec, LatticeGeometry, MetricChart, MetricField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Sample,
    Fit,
    Consistency,
    Fisher,
    CramerRao,
    RefPrior,
    HeatTrace,
    SdFit,
    Decohere,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Fit => "fit",
            Command::Consistency => "consistency",
            Command::Fisher => "fisher",
            Command::CramerRao => "cramer-rao",
            Command::RefPrior => "ref-prior",
            Command::HeatTrace => "heat-trace",
            Command::SdFit => "sd-fit",
            Command::Decohere => "decohere",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| Error::Config(format!("unknown command `{name}`")))
    }

    fn needs_chart(self) -> bool {
        matches!(
            self,
            Command::Fit | Command::Consistency | Command::Fisher | Command::CramerRao | Command::RefPrior
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub extents: Vec<usize>,
    #[serde(default = "one")]
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cosine {
    pub amplitude: f64,
    #[serde(default)]
    pub axis: usize,
    #[serde(default = "one_usize")]
    pub mode: usize,
}

/// Base metric. `conformal` sets `ω = omega + amplitude·cos(2π mode x/n)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MetricConfig {
    #[default]
    Flat,
    Conformal {
        #[serde(default)]
        omega: f64,
        #[serde(default)]
        cosine: Option<Cosine>,
    },
    FullSym {
        #[serde(default = "one")]
        g11: f64,
        #[serde(default)]
        g12: f64,
        #[serde(default = "one")]
        g22: f64,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartConfig {
    pub lower: f64,
    pub upper: f64,
    pub directions: Vec<DirectionSpec>,
    /// Truth used to generate data; zeros when absent.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub samples: usize,
    #[serde(default = "no_constraint")]
    pub constraint: Constraint,
    #[serde(default = "default_fit_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub counts: Vec<usize>,
    pub replicas: usize,
    #[serde(default = "default_fit_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_slope")]
    pub slope_target: f64,
    #[serde(default = "default_slope_tolerance")]
    pub slope_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisherConfig {
    /// Monte Carlo cross-check sample count; skipped when zero.
    #[serde(default)]
    pub mc_samples: usize,
    #[serde(default = "default_fisher_tolerance")]
    pub rel_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CramerRaoConfig {
    pub samples_per_fit: usize,
    pub replicas: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default = "default_efficiency_range")]
    pub efficiency_range: [f64; 2],
    #[serde(default = "default_fit_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefPriorConfig {
    pub n_obs: Vec<usize>,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_prior_tol")]
    pub tol: f64,
    #[serde(default = "default_prior_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tv_threshold")]
    pub tv_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatTraceConfig {
    pub s_min: f64,
    pub s_max: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "yes")]
    pub include_zero_mode: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdFitConfig {
    #[serde(default)]
    pub window: Option<[f64; 2]>,
    #[serde(default = "default_volume_tolerance")]
    pub volume_tolerance: f64,
    #[serde(default = "default_curvature_tolerance")]
    pub curvature_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecohereConfig {
    pub kernel: KernelSpec,
    #[serde(default)]
    pub coupling: CouplingForm,
    /// Monte Carlo draws for the oracle; skipped when zero.
    #[serde(default = "default_draws")]
    pub draws: usize,
    /// Oracle amplitude; by default chosen so that `ε·sd(c) = 0.3`.
    #[serde(default)]
    pub amplitude: Option<f64>,
    #[serde(default = "default_oracle_tolerance")]
    pub rel_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub metric: MetricConfig,
    #[serde(default)]
    pub chart: Option<ChartConfig>,
    #[serde(default)]
    pub sample: Option<SampleConfig>,
    #[serde(default)]
    pub fit: Option<FitConfig>,
    #[serde(default)]
    pub consistency: Option<ConsistencyConfig>,
    #[serde(default)]
    pub fisher: Option<FisherConfig>,
    #[serde(default)]
    pub cramer_rao: Option<CramerRaoConfig>,
    #[serde(default)]
    pub ref_prior: Option<RefPriorConfig>,
    #[serde(default)]
    pub heat_trace: Option<HeatTraceConfig>,
    #[serde(default)]
    pub sd_fit: Option<SdFitConfig>,
    #[serde(default)]
    pub decohere: Option<DecohereConfig>,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn no_constraint() -> Constraint {
    Constraint::None
}
fn default_fit_tolerance() -> f64 {
    FitSettings::default().tolerance
}
fn default_max_iterations() -> usize {
    FitSettings::default().max_iterations
}
fn default_slope() -> f64 {
    -0.5
}
fn default_slope_tolerance() -> f64 {
    0.1
}
fn default_fisher_tolerance() -> f64 {
    0.05
}
fn default_bootstrap() -> usize {
    200
}
fn default_efficiency_range() -> [f64; 2] {
    [0.85, 1.20]
}
fn default_grid() -> usize {
    101
}
fn default_bins() -> usize {
    400
}
fn default_prior_tol() -> f64 {
    1e-6
}
fn default_prior_iter() -> usize {
    200_000
}
fn default_tv_threshold() -> f64 {
    0.05
}
fn default_points() -> usize {
    64
}
fn default_volume_tolerance() -> f64 {
    0.01
}
fn default_curvature_tolerance() -> f64 {
    0.10
}
fn default_draws() -> usize {
    100_000
}
fn default_oracle_tolerance() -> f64 {
    0.02
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Objects built from a validated configuration.
#[derive(Debug, Clone)]
pub struct Setup {
    pub geometry: LatticeGeometry,
    pub base: MetricField,
    pub chart: Option<MetricChart>,
    pub theta0: Vec<f64>,
}

impl Setup {
    /// The metric data are drawn from: the chart at `theta0`, else the base.
    pub fn truth(&self) -> Result<MetricField> {
        match &self.chart {
            Some(c) => c.metric(&self.theta0),
            None => Ok(self.base.clone()),
        }
    }

    pub fn chart(&self) -> Result<&MetricChart> {
        self.chart
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a [chart] section".into()))
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn require<'a, T>(section: &'a Option<T>, name: &str, command: Command) -> Result<&'a T> {
    section
        .as_ref()
        .ok_or_else(|| invalid(format!("command `{}` needs a [{name}] section", command.name())))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text)?;
        if let MetricConfig::File { path: metric } = &mut config.metric {
            if metric.is_relative() {
                if let Some(dir) = path.parent() {
                    *metric = dir.join(&*metric);
                }
            }
        }
        Ok(config)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output location.
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut canonical = self.clone();
        canonical.output = PathBuf::new();
        let json = serde_json::to_string(&canonical)?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }

    fn build_metric(&self, geometry: &LatticeGeometry) -> Result<MetricField> {
        match &self.metric {
            MetricConfig::Flat => Ok(MetricField::flat(geometry)),
            MetricConfig::Conformal { omega, cosine } => {
                let values = (0..geometry.site_count())
                    .map(|x| {
                        let wave = cosine.as_ref().map_or(0.0, |c| {
                            let n = geometry.extents()[c.axis] as f64;
                            c.amplitude * (2.0 * PI * c.mode as f64 * geometry.coords(x)[c.axis] as f64 / n).cos()
                        });
                        omega + wave
                    })
                    .collect();
                if let Some(c) = cosine {
                    if c.axis >= geometry.dim() {
                        return Err(invalid(format!("cosine axis {} out of range", c.axis)));
                    }
                }
                MetricField::conformal(geometry, values)
            }
            MetricConfig::FullSym { g11, g12, g22 } => {
                let per_site = if geometry.dim() == 1 {
                    if *g12 != 0.0 || *g22 != 1.0 {
                        return Err(invalid("one-dimensional full metrics only take g11"));
                    }
                    vec![*g11]
                } else {
                    vec![*g11, *g12, *g22]
                };
                MetricField::full_sym(geometry, per_site.repeat(geometry.site_count()))
            }
            MetricConfig::File { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| invalid(format!("cannot read metric file {}: {e}", path.display())))?;
                let metric = MetricField::from_json(&text)?;
                if metric.geometry() != geometry {
                    return Err(invalid("metric file lattice differs from [lattice]"));
                }
                Ok(metric)
            }
        }
    }

    /// Check every section the command uses and build the lattice, metric
    /// and chart. Nothing expensive runs here.
    pub fn validate(&self) -> Result<Setup> {
        let geometry = LatticeGeometry::new(self.lattice.extents.clone(), self.lattice.spacing)
            .map_err(|e| invalid(format!("[lattice]: {e}")))?;
        let base = self.build_metric(&geometry).map_err(|e| match e {
            Error::Config(_) => e,
            other => invalid(format!("[metric]: {other}")),
        })?;
        let chart = match &self.chart {
            Some(c) => Some(
                MetricChart::from_specs(base.clone(), &c.directions, c.lower, c.upper)
                    .map_err(|e| invalid(format!("[chart]: {e}")))?,
            ),
            None => None,
        };
        let theta0 = match (&chart, &self.chart) {
            (Some(ch), Some(cfg)) => {
                let t = cfg.theta0.clone().unwrap_or_else(|| vec![0.0; ch.dimension()]);
                if t.len() != ch.dimension() {
                    return Err(invalid(format!(
                        "[chart]: theta0 has {} entries for {} directions",
                        t.len(),
                        ch.dimension()
                    )));
                }
                if !ch.contains(&t) {
                    return Err(invalid(format!("[chart]: theta0 {t:?} is outside the chart bounds")));
                }
                ch.metric(&t).map_err(|e| invalid(format!("[chart]: {e}")))?;
                t
            }
            _ => Vec::new(),
        };
        let cmd = self.command;
        if cmd.needs_chart() && chart.is_none() {
            return Err(invalid(format!("command `{}` needs a [chart] section", cmd.name())));
        }
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(invalid(format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        match cmd {
            Command::Sample => positive(require(&self.sample, "sample", cmd)?.count, "sample.count")?,
            Command::Fit => {
                let f = require(&self.fit, "fit", cmd)?;
                positive(f.samples, "fit.samples")?;
                positive(f.max_iterations, "fit.max_iterations")?;
                if let Constraint::FixedVolume { target } = f.constraint {
                    if !(target > 0.0) {
                        return Err(invalid("fit.constraint target volume must be positive"));
                    }
                }
            }
            Command::Consistency => {
                let c = require(&self.consistency, "consistency", cmd)?;
                if c.counts.len() < 2 || c.counts.windows(2).any(|w| w[0] >= w[1]) || c.counts[0] == 0 {
                    return Err(invalid("consistency.counts must be positive and strictly increasing, at least two"));
                }
                if c.replicas < 2 {
                    return Err(invalid("consistency.replicas must be at least 2"));
                }
            }
            Command::Fisher => {
                let f = require(&self.fisher, "fisher", cmd)?;
                if f.mc_samples != 0 && f.mc_samples < 100 {
                    return Err(invalid("fisher.mc_samples must be 0 or at least 100"));
                }
            }
            Command::CramerRao => {
                let c = require(&self.cramer_rao, "cramer_rao", cmd)?;
                positive(c.samples_per_fit, "cramer_rao.samples_per_fit")?;
                positive(c.bootstrap, "cramer_rao.bootstrap")?;
                if c.replicas < 3 {
                    return Err(invalid("cramer_rao.replicas must be at least 3"));
                }
                if !(c.efficiency_range[0] < c.efficiency_range[1]) {
                    return Err(invalid("cramer_rao.efficiency_range must be increasing"));
                }
            }
            Command::RefPrior => {
                let r = require(&self.ref_prior, "ref_prior", cmd)?;
                if r.n_obs.is_empty() || r.n_obs.contains(&0) {
                    return Err(invalid("ref_prior.n_obs must be a nonempty list of positive counts"));
                }
                if r.grid < 2 || r.bins < 3 || !(r.tol > 0.0) {
                    return Err(invalid("ref_prior needs grid ≥ 2, bins ≥ 3 and tol > 0"));
                }
                if chart.as_ref().map(|c| c.dimension()) != Some(1) {
                    return Err(invalid("ref-prior needs a one-parameter chart"));
                }
            }
            Command::HeatTrace => {
                let h = require(&self.heat_trace, "heat_trace", cmd)?;
                if !(h.s_min > 0.0 && h.s_min < h.s_max) || h.points < 2 {
                    return Err(invalid("heat_trace needs 0 < s_min < s_max and points ≥ 2"));
                }
            }
            Command::SdFit => {
                let s = require(&self.sd_fit, "sd_fit", cmd)?;
                if geometry.dim() != 2 {
                    return Err(invalid("sd-fit needs a two-dimensional lattice"));
                }
                if let Some([lo, hi]) = s.window {
                    if !(lo > 0.0 && lo < hi) {
                        return Err(invalid("sd_fit.window must satisfy 0 < lo < hi"));
                    }
                }
            }
            Command::Decohere => {
                let d = require(&self.decohere, "decohere", cmd)?;
                if self.metric != MetricConfig::Flat {
                    return Err(invalid("decohere expands around the flat metric; use [metric] kind = \"flat\""));
                }
                if d.draws != 0 && d.draws < 40 {
                    return Err(invalid("decohere.draws must be 0 or at least 40"));
                }
                if let Some(eps) = d.amplitude {
                    if !(eps > 0.0) {
                        return Err(invalid("decohere.amplitude must be positive"));
                    }
                }
                if matches!(d.kernel, KernelSpec::Dense) {
                    return Err(invalid("decohere.kernel: dense kernels cannot be given in a config"));
                }
                if matches!(d.kernel, KernelSpec::Chart { .. }) && chart.is_none() {
                    return Err(invalid("decohere.kernel of kind chart needs a [chart] section"));
                }
            }
        }
        Ok(Setup {
            geometry,
            base,
            chart,
            theta0,
        })
    }
}
