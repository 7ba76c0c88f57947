//! Experiment configuration files.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use rwre_core::ballisticity::{IncrementLaw, RhoOptions};
use rwre_core::env_model::LawDescriptor;
use rwre_core::exact_solver::SolveMethod;
use rwre_core::kalikow::{FamilySpec, DEFAULT_MAX_ENUMERATION};
use rwre_core::lattice::{RegionSpec, Site};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Moments,
    Green,
    KalikowDrift,
    EpsK,
    Theorem2,
    Theorem3,
    ConditionP,
    Prop31,
    Fluctuations,
    Rho,
    Velocity,
    Freedman,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Moments => "moments",
            ExperimentKind::Green => "green",
            ExperimentKind::KalikowDrift => "kalikow-drift",
            ExperimentKind::EpsK => "eps-k",
            ExperimentKind::Theorem2 => "theorem2",
            ExperimentKind::Theorem3 => "theorem3",
            ExperimentKind::ConditionP => "condition-p",
            ExperimentKind::Prop31 => "prop31",
            ExperimentKind::Fluctuations => "fluctuations",
            ExperimentKind::Rho => "rho",
            ExperimentKind::Velocity => "velocity",
            ExperimentKind::Freedman => "freedman",
        }
    }

    fn needs_law(self) -> bool {
        self != ExperimentKind::Freedman
    }

    fn needs_region(self) -> bool {
        matches!(self, ExperimentKind::Green | ExperimentKind::KalikowDrift)
    }
}

/// Top level of a config file.
///
/// ```toml
/// kind = "moments"
/// seed = 7
///
/// [law]
/// family = "signed-axis-kick"
/// d = 3
/// a = 0.01
///
/// [params]
/// rho = 0.3
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Option<ExperimentKind>,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub law: Option<LawDescriptor>,
    pub region: Option<RegionSpec>,
    #[serde(default)]
    pub params: toml::Table,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
    }

    /// Checks the parts every experiment of `kind` relies on.
    pub fn validate(&self, kind: ExperimentKind) -> Result<(), CliError> {
        if let Some(k) = self.kind {
            if k != kind {
                return Err(CliError::Validation(format!(
                    "config declares kind `{}` but the `{}` subcommand was run",
                    k.name(),
                    kind.name()
                )));
            }
        }
        if kind.needs_law() {
            let law = self
                .law
                .as_ref()
                .ok_or_else(|| CliError::Validation("missing [law] table".into()))?;
            if law.dim() < 2 {
                return Err(CliError::Validation(format!(
                    "law.d = {}: the model requires d >= 2",
                    law.dim()
                )));
            }
        }
        if kind.needs_region() && self.region.is_none() {
            return Err(CliError::Validation(format!(
                "`{}` needs a [region] table",
                kind.name()
            )));
        }
        Ok(())
    }

    /// `validate` plus a parse of the `[params]` table for `kind`.
    pub fn check(&self, kind: ExperimentKind) -> Result<(), CliError> {
        self.validate(kind)?;
        match kind {
            ExperimentKind::Moments => self.params::<MomentsParams>().map(drop),
            ExperimentKind::Green => self.params::<GreenParams>().map(drop),
            ExperimentKind::KalikowDrift => self.params::<KalikowDriftParams>().map(drop),
            ExperimentKind::EpsK | ExperimentKind::Theorem2 => {
                self.params::<EpsKParams>().map(drop)
            }
            ExperimentKind::Theorem3 => self.params::<Theorem3Params>().map(drop),
            ExperimentKind::ConditionP => self.params::<ConditionPParams>().map(drop),
            ExperimentKind::Prop31 => self.params::<Prop31Params>().map(drop),
            ExperimentKind::Fluctuations => self.params::<FluctuationParams>().map(drop),
            ExperimentKind::Rho => self.params::<RhoParams>().map(drop),
            ExperimentKind::Velocity => self.params::<VelocityParams>().map(drop),
            ExperimentKind::Freedman => self.params::<FreedmanConfig>().map(drop),
        }
    }

    pub fn params<T: DeserializeOwned>(&self) -> Result<T, CliError> {
        T::deserialize(toml::Value::Table(self.params.clone()))
            .map_err(|e| CliError::Parse(format!("in [params]: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsParams {
    pub rho: Option<f64>,
    #[serde(default = "half")]
    pub eps0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreenParams {
    pub x: Option<Site>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "auto")]
    pub method: SolveMethod,
    #[serde(default)]
    pub certify: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouteChoice {
    Definition,
    Formula,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalikowDriftParams {
    pub x: Option<Site>,
    pub y: Option<Site>,
    #[serde(default = "default_n_env_kalikow")]
    pub n_env: u64,
    #[serde(default = "definition")]
    pub route: RouteChoice,
    #[serde(default)]
    pub control_variate: bool,
    #[serde(default = "default_max_enumeration")]
    pub max_enumeration: u64,
    #[serde(default)]
    pub force_monte_carlo: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsKParams {
    #[serde(default = "default_n_env_eps")]
    pub n_env: u64,
    #[serde(default = "three")]
    pub z: f64,
    #[serde(default = "default_max_enumeration")]
    pub max_enumeration: u64,
    #[serde(default)]
    pub family: FamilySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Theorem3Params {
    pub rho: f64,
    #[serde(default = "half")]
    pub eps0: f64,
    #[serde(default = "default_n_list")]
    pub n_list: Vec<i64>,
    #[serde(default = "default_n_env_t3")]
    pub n_env: u64,
    #[serde(default)]
    pub allow_failed_conditions: bool,
    #[serde(default = "three")]
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionPParams {
    #[serde(default = "default_m_values")]
    pub m_values: Vec<i64>,
    #[serde(default = "default_n_per_site")]
    pub n_per_site: u64,
    pub site_cap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop31Params {
    pub l: i64,
    /// Lateral radius; default 4 L^2.
    pub w: Option<i64>,
    #[serde(default = "default_n_env_prop")]
    pub n_env: u64,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluctuationParams {
    pub amplitudes: Vec<f64>,
    pub l: i64,
    pub w: Option<i64>,
    #[serde(default = "default_n_env_fluct")]
    pub n_env: u64,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoParams {
    pub theta: f64,
    #[serde(default = "half")]
    pub eta: f64,
    #[serde(default = "default_n_env_rho")]
    pub n_env: u64,
    #[serde(default)]
    pub options: RhoOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityParams {
    #[serde(default = "default_n_steps")]
    pub n_steps: u64,
    #[serde(default = "default_n_walks")]
    pub n_walks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreedmanConfig {
    /// Analytic evaluation point, when all three are given.
    pub u: Option<f64>,
    pub b: Option<f64>,
    pub sum_v2: Option<f64>,
    #[serde(default = "rademacher")]
    pub increments: IncrementLaw,
    #[serde(default = "default_martingale_n")]
    pub n: u64,
    #[serde(default = "default_u_grid")]
    pub u_grid: Vec<f64>,
    #[serde(default = "default_n_paths")]
    pub n_paths: u64,
}

fn half() -> f64 {
    0.5
}
fn three() -> f64 {
    3.0
}
fn default_tol() -> f64 {
    1e-10
}
fn auto() -> SolveMethod {
    SolveMethod::Auto
}
fn definition() -> RouteChoice {
    RouteChoice::Definition
}
fn default_n_env_kalikow() -> u64 {
    10_000
}
fn default_n_env_eps() -> u64 {
    2000
}
fn default_n_env_t3() -> u64 {
    4000
}
fn default_n_env_prop() -> u64 {
    500
}
fn default_n_env_fluct() -> u64 {
    2000
}
fn default_n_env_rho() -> u64 {
    100
}
fn default_max_enumeration() -> u64 {
    DEFAULT_MAX_ENUMERATION
}
fn default_n_list() -> Vec<i64> {
    vec![10, 20, 30]
}
fn default_m_values() -> Vec<i64> {
    vec![2]
}
fn default_n_per_site() -> u64 {
    10_000
}
fn default_n_steps() -> u64 {
    10_000
}
fn default_n_walks() -> u64 {
    1000
}
fn rademacher() -> IncrementLaw {
    IncrementLaw::Rademacher
}
fn default_martingale_n() -> u64 {
    200
}
fn default_u_grid() -> Vec<f64> {
    (1..=7).map(|k| 2.0 * k as f64).collect()
}
fn default_n_paths() -> u64 {
    100_000
}
