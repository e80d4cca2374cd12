//! Experiment configuration: one JSON file per run.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{BoundaryParam, BoundaryPortion, Domain, Shape, SpaceTimeGrid, SpatialGrid, DEFAULT_CFL};
use crate::linear::Potential;
use crate::linearization::FrechetOptions;
use crate::mollify::max_resolvable_rho;
use crate::nonlinearity::{Coefficient, DataSpec, Nonlinearity};
use crate::persist;
use crate::probe::ProbeOptions;
use crate::recovery::{ProbePoint, RecoveryConfig, RhoLadder};

pub const SCHEMA_VERSION: u32 = 1;

/// Names accepted in the `kind` field of a nonlinearity.
pub const CATALOG: [&str; 8] = ["zero", "linear", "quadratic", "cubic", "blowup_quadratic", "polynomial", "exponential", "table"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Forward,
    FrechetCheck,
    ProbeCertify,
    RecoverBoundary,
    RecoverNonlinearity,
    RecoverInitial,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Forward => "forward",
            Pipeline::FrechetCheck => "frechet_check",
            Pipeline::ProbeCertify => "probe_certify",
            Pipeline::RecoverBoundary => "recover_boundary",
            Pipeline::RecoverNonlinearity => "recover_nonlinearity",
            Pipeline::RecoverInitial => "recover_initial",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub shape: Shape,
    /// Defaults to three quarters of the injectivity threshold.
    #[serde(default)]
    pub collar_width: Option<f64>,
}

impl DomainSpec {
    pub fn build(&self) -> Result<Domain> {
        match self.collar_width {
            Some(w) => Domain::new(self.shape, w),
            None => Domain::with_default_collar(self.shape),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Nodes per side (radial rings times angles on a disk are derived from it).
    pub nodes: usize,
    /// Final time `T`.
    pub horizon: f64,
    #[serde(default)]
    pub t_prime: Option<f64>,
    #[serde(default)]
    pub cfl: Option<f64>,
    /// Overrides `cfl` when present.
    #[serde(default)]
    pub dt: Option<f64>,
}

impl GridSpec {
    pub fn build(&self, domain: &Domain) -> Result<Arc<SpaceTimeGrid>> {
        if !(self.horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        let t_prime = self.t_prime.unwrap_or(self.horizon);
        let space = SpatialGrid::new(domain, self.nodes)?;
        let grid = match (self.dt, self.cfl) {
            (Some(dt), _) => SpaceTimeGrid::with_dt(space, dt, self.horizon, t_prime)?,
            (None, c) => {
                let cfl = c.unwrap_or(DEFAULT_CFL);
                if !(cfl > 0.0 && cfl <= 1.0) {
                    return Err(Error::Config(format!("Courant number {cfl} outside (0, 1]")));
                }
                SpaceTimeGrid::with_cfl(space, self.horizon, t_prime, cfl)?
            }
        };
        Ok(Arc::new(grid))
    }
}

/// A catalog entry, or a file holding one that the report must not echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NonlinearitySpec {
    Hidden { hidden: PathBuf },
    Catalog(Nonlinearity),
}

/// Potential given as a number or an analytic coefficient.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PotentialSpec {
    Constant(f64),
    Coefficient(Coefficient),
}

impl Default for PotentialSpec {
    fn default() -> Self {
        PotentialSpec::Constant(0.0)
    }
}

impl PotentialSpec {
    pub fn build(&self) -> Potential {
        match self {
            PotentialSpec::Constant(c) => Potential::constant(*c),
            PotentialSpec::Coefficient(c) => {
                let c = c.clone();
                Potential::analytic("config", move |t, p| c.eval(t, p))
            }
        }
    }
}

fn whole() -> BoundaryPortion {
    BoundaryPortion::Whole
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrechetSpec {
    pub base: DataSpec,
    pub direction: DataSpec,
    pub scales: Vec<f64>,
    #[serde(default = "whole")]
    pub portion: BoundaryPortion,
    #[serde(default)]
    pub options: FrechetOptions,
}

fn default_certify_rhos() -> Vec<f64> {
    vec![20.0, 40.0, 80.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySpec {
    pub q1: PotentialSpec,
    #[serde(default)]
    pub q2: PotentialSpec,
    pub t0: f64,
    pub x0: BoundaryParam,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "default_certify_rhos")]
    pub rhos: Vec<f64>,
    pub gamma: BoundaryPortion,
    #[serde(default)]
    pub options: ProbeOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub q1: PotentialSpec,
    #[serde(default)]
    pub q2: PotentialSpec,
    pub points: Vec<ProbePoint>,
    pub gamma: BoundaryPortion,
    #[serde(default)]
    pub rho_ladder: RhoLadder,
    #[serde(default)]
    pub options: ProbeOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub lambda_max: f64,
    pub per_side: usize,
    /// Use the exact interior oracle instead of evaluating the nonlinearity directly.
    #[serde(default)]
    pub oracle: bool,
    #[serde(default)]
    pub radius: Option<f64>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub pipeline: Option<Pipeline>,
    pub domain: DomainSpec,
    pub grid: GridSpec,
    #[serde(default = "zero_nonlinearity")]
    pub nonlinearity: NonlinearitySpec,
    #[serde(default)]
    pub data: Option<DataSpec>,
    #[serde(default)]
    pub frechet: Option<FrechetSpec>,
    #[serde(default)]
    pub certify: Option<CertifySpec>,
    #[serde(default)]
    pub boundary: Option<BoundarySpec>,
    #[serde(default)]
    pub recovery: Option<RecoveryConfig>,
    #[serde(default)]
    pub initial: Option<InitialSpec>,
    /// Value of `F(t, x, 0)` used to anchor the integration in the load parameter.
    #[serde(default)]
    pub anchor: f64,
    /// Relative trace noise of simulated measurements.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn zero_nonlinearity() -> NonlinearitySpec {
    NonlinearitySpec::Catalog(Nonlinearity::zero())
}

fn check_catalog(v: &Value) -> Result<()> {
    let Some(nl) = v.get("nonlinearity") else { return Ok(()) };
    if nl.get("hidden").is_some() {
        return Ok(());
    }
    match nl.get("kind").and_then(Value::as_str) {
        Some(k) if CATALOG.contains(&k) => Ok(()),
        Some(k) => Err(Error::Config(format!("unknown catalog entry '{k}' (known: {})", CATALOG.join(", ")))),
        None => Err(Error::Config("nonlinearity needs a 'kind' or a 'hidden' file".into())),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        match v.get("schema_version").and_then(Value::as_u64) {
            Some(s) if s == SCHEMA_VERSION as u64 => {}
            Some(s) => return Err(Error::Config(format!("schema_version {s} is not supported (expected {SCHEMA_VERSION})"))),
            None => return Err(Error::Config("missing schema_version".into())),
        }
        check_catalog(&v)?;
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let NonlinearitySpec::Hidden { hidden } = &mut cfg.nonlinearity {
            if hidden.is_relative() {
                if let Some(dir) = path.parent() {
                    *hidden = dir.join(&*hidden);
                }
            }
        }
        Ok(cfg)
    }

    /// The nonlinearity and whether it is hidden from the report.
    pub fn nonlinearity(&self) -> Result<(Nonlinearity, bool)> {
        match &self.nonlinearity {
            NonlinearitySpec::Catalog(f) => Ok((f.clone(), false)),
            NonlinearitySpec::Hidden { hidden } => {
                let text = fs::read_to_string(hidden).map_err(|e| Error::Config(format!("cannot read hidden nonlinearity {}: {e}", hidden.display())))?;
                let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("hidden nonlinearity: {e}")))?;
                check_catalog(&serde_json::json!({ "nonlinearity": v }))?;
                let f = serde_json::from_value(v).map_err(|e| Error::Config(format!("hidden nonlinearity: {e}")))?;
                Ok((f, true))
            }
        }
    }

    /// Content hash of everything that affects the numbers (not the output location).
    pub fn content_hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        let hidden = match &self.nonlinearity {
            NonlinearitySpec::Hidden { .. } => serde_json::to_vec(&self.nonlinearity()?.0)?,
            NonlinearitySpec::Catalog(_) => Vec::new(),
        };
        Ok(persist::hash_parts(&[&serde_json::to_vec(&v)?, &hidden]))
    }

    fn missing(&self, section: &str, pipeline: Pipeline) -> Error {
        Error::Config(format!("pipeline {} needs a '{section}' section", pipeline.name()))
    }

    /// Checks everything that can be checked before any solve.
    pub fn validate(&self, pipeline: Pipeline) -> Result<()> {
        if let Some(p) = self.pipeline {
            if p != pipeline {
                return Err(Error::Config(format!("config is for pipeline {}, invoked as {}", p.name(), pipeline.name())));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be a non-negative number, got {}", self.noise)));
        }
        let domain = self.domain.build()?;
        let grid = self.grid.build(&domain)?;
        self.nonlinearity()?;
        match pipeline {
            Pipeline::Forward => {
                self.data.as_ref().ok_or_else(|| self.missing("data", pipeline))?;
            }
            Pipeline::FrechetCheck => {
                let s = self.frechet.as_ref().ok_or_else(|| self.missing("frechet", pipeline))?;
                if s.scales.len() < 2 || s.scales.iter().any(|x| !(*x > 0.0)) {
                    return Err(Error::Config("frechet scales need at least two positive entries".into()));
                }
            }
            Pipeline::ProbeCertify => {
                let s = self.certify.as_ref().ok_or_else(|| self.missing("certify", pipeline))?;
                if s.rhos.is_empty() || s.rhos.iter().any(|r| !(*r > 0.0)) {
                    return Err(Error::Config("certify rhos must be positive".into()));
                }
                let limit = max_resolvable_rho(&grid, domain.dim());
                if let Some(r) = s.rhos.iter().find(|r| **r > limit) {
                    return Err(Error::Resolution { msg: format!("rho {r} exceeds the mollifier limit {limit:.3e} of the grid"), max_rho: Some(limit) });
                }
            }
            Pipeline::RecoverBoundary => {
                let s = self.boundary.as_ref().ok_or_else(|| self.missing("boundary", pipeline))?;
                if s.points.is_empty() {
                    return Err(Error::Config("boundary recovery needs at least one probe point".into()));
                }
            }
            Pipeline::RecoverNonlinearity => {
                let r = self.recovery.as_ref().ok_or_else(|| self.missing("recovery", pipeline))?;
                r.validate()?;
                if r.horizon > grid.t_final + 1e-12 {
                    return Err(Error::Config(format!("recovery horizon {} exceeds the grid horizon {}", r.horizon, grid.t_final)));
                }
            }
            Pipeline::RecoverInitial => {
                let s = self.initial.as_ref().ok_or_else(|| self.missing("initial", pipeline))?;
                if s.per_side == 0 || !(s.lambda_max > 0.0) {
                    return Err(Error::Config("initial recovery needs lambda_max > 0 and per_side >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "domain": {"shape": {"kind": "interval", "length": 3.0}},
        "grid": {"nodes": 17, "horizon": 1.0},
        "nonlinearity": {"kind": "quadratic", "alpha": {"kind": "constant", "value": 1.0}},
        "data": {"f": {"kind": "constant", "value": 0.5}, "u0": {"kind": "constant", "value": 0.5}, "u1": {"kind": "constant", "value": 0.0}}
    }"#;

    #[test]
    fn minimal_config_validates() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        c.validate(Pipeline::Forward).unwrap();
        assert!(matches!(c.validate(Pipeline::FrechetCheck), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_catalog_entry_is_rejected() {
        let text = MINIMAL.replace("\"quadratic\"", "\"quintic\"");
        match ExperimentConfig::from_json(&text) {
            Err(Error::Config(m)) => assert!(m.contains("quintic")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_version_is_checked() {
        let text = MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn courant_number_is_checked() {
        let text = MINIMAL.replace("\"horizon\": 1.0", "\"horizon\": 1.0, \"cfl\": 1.5");
        let c = ExperimentConfig::from_json(&text).unwrap();
        assert!(matches!(c.validate(Pipeline::Forward), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
        b.seed = 3;
        assert_ne!(a.content_hash().unwrap(), b.content_hash().unwrap());
    }
}
