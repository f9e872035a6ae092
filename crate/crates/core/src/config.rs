//! TOML experiment configuration and built-in matrices.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::PolicyKind;
use crate::engine::{Recording, SimConfig};
use crate::error::{Error, Result};
use crate::model::{AdversarySet, ObservationMatrix, ProblemSpec, StepSchedule};

/// Names accepted by [`named_matrix`].
pub const MATRIX_NAMES: [&str; 2] = ["ones5", "fig1_generic"];

/// Rows of the shipped generic 5x2 instance: robust for `m = 1`, not for `m = 2`.
pub const FIG1_GENERIC_ROWS: [[f64; 2]; 5] = [[1.5, -1.0], [-2.0, 1.0], [1.0, -2.0], [2.0, 1.5], [2.0, 2.0]];

/// Built-in matrices. `ones<p>` is the `p x 1` all-ones matrix.
pub fn named_matrix(name: &str) -> Result<ObservationMatrix<f64>> {
    if name == "fig1_generic" {
        return ObservationMatrix::new(FIG1_GENERIC_ROWS.iter().map(|r| r.to_vec()).collect());
    }
    if let Some(p) = name.strip_prefix("ones").and_then(|s| s.parse::<usize>().ok()) {
        return ObservationMatrix::ones(p);
    }
    Err(Error::InvalidConfig(format!(
        "unknown matrix {name:?}; expected one of {MATRIX_NAMES:?} or ones<p>"
    )))
}

/// Matrix section: a built-in name or inline rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<f64>>>,
}

impl MatrixSection {
    pub fn build(&self) -> Result<ObservationMatrix<f64>> {
        match (&self.name, &self.rows) {
            (Some(name), None) => named_matrix(name),
            (None, Some(rows)) => ObservationMatrix::new(rows.clone()),
            _ => Err(Error::InvalidConfig(
                "matrix: give exactly one of `name` or `rows`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub mu: Vec<f64>,
    /// Defaults to the identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Explicit 0-based adversary indices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversaries: Option<Vec<usize>>,
    /// Number of adversaries, taken as the last nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversary_count: Option<usize>,
    /// Defaults to `|M|`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_bound: Option<usize>,
    #[serde(default)]
    pub perturbation_bound: f64,
    #[serde(default = "default_policy")]
    pub policy: PolicyKind,
}

fn default_policy() -> PolicyKind {
    PolicyKind::Repel { magnitude: None }
}

impl ProblemSection {
    pub fn adversary_set(&self, p: usize) -> Result<AdversarySet> {
        match (&self.adversaries, self.adversary_count) {
            (Some(_), Some(_)) => Err(Error::InvalidConfig(
                "problem: give at most one of `adversaries` or `adversary_count`".into(),
            )),
            (Some(list), None) => Ok(AdversarySet::new(list.iter().copied())),
            (None, Some(k)) if k > p => Err(Error::AdversaryCount { m: k, p }),
            (None, Some(k)) => Ok(AdversarySet::last(p, k)),
            (None, None) => Ok(AdversarySet::empty()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_offset")]
    pub offset: u64,
}

fn default_alpha() -> f64 {
    0.8
}
fn default_beta() -> f64 {
    0.6
}
fn default_offset() -> u64 {
    1
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            beta: default_beta(),
            offset: default_offset(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Record every `stride`-th iterate instead of log spacing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<u64>,
    #[serde(default = "default_max_rows")]
    pub max_rows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<Vec<f64>>,
}

fn default_iterations() -> u64 {
    200_000
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_max_rows() -> usize {
    10_000
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            seeds: default_seeds(),
            stride: None,
            max_rows: default_max_rows(),
            x0: None,
            y0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_directory(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Outstanding queries at once; defaults to `p`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_in_flight: Option<usize>,
    /// Stop after this many milliseconds even if `iterations` is not reached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_ms: Option<u64>,
}

fn default_timeout_ms() -> u64 {
    1_000
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            timeout_ms: default_timeout_ms(),
            max_in_flight: None,
            window_ms: None,
        }
    }
}

/// A whole experiment file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub matrix: MatrixSection,
    pub problem: ProblemSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub net: NetSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Build and validate the simulation for the first seed.
    pub fn sim_config(&self) -> Result<SimConfig<f64>> {
        let matrix = self.matrix.build()?;
        let (p, d) = (matrix.p(), matrix.d());
        let adversaries = self.problem.adversary_set(p)?;
        let m = self.problem.m_bound.unwrap_or(adversaries.len());
        let covariance = self
            .problem
            .covariance
            .clone()
            .unwrap_or_else(|| ProblemSpec::<f64>::identity_covariance(self.problem.mu.len()));
        let spec = ProblemSpec::new(
            self.problem.mu.clone(),
            covariance,
            adversaries,
            m,
            self.problem.perturbation_bound,
        )?;
        spec.check_against(&matrix)?;
        let schedule = StepSchedule::with_offset(self.schedule.alpha, self.schedule.beta, self.schedule.offset)?;
        if self.run.seeds.is_empty() {
            return Err(Error::InvalidConfig("run.seeds must not be empty".into()));
        }
        let mut sim = SimConfig::new(matrix, spec, schedule)
            .with_adversary_policy(self.problem.policy.clone())
            .with_iterations(self.run.iterations)
            .with_seed(self.run.seeds[0]);
        sim.x0 = self.run.x0.clone().unwrap_or_else(|| vec![0.0; d]);
        sim.y0 = self.run.y0.clone().unwrap_or_else(|| vec![0.0; p]);
        sim.recording = match self.run.stride {
            Some(k) if k > 0 => Recording::Stride(k),
            Some(_) => return Err(Error::InvalidConfig("run.stride must be at least 1".into())),
            None => Recording::LogSpaced {
                max_rows: self.run.max_rows,
            },
        };
        sim.validate()?;
        Ok(sim)
    }

    /// Same experiment with `k` adversaries taken as the last nodes.
    pub fn with_adversary_count(&self, k: usize) -> Self {
        let mut out = self.clone();
        out.problem.adversaries = None;
        out.problem.adversary_count = Some(k);
        if out.problem.m_bound.is_some_and(|m| m < k) {
            out.problem.m_bound = Some(k);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG1_TOP: &str = r#"
[matrix]
name = "ones5"

[problem]
mu = [1.0]
adversary_count = 2
policy = { kind = "repel" }

[schedule]
alpha = 0.8
beta = 0.6

[run]
iterations = 1000
seeds = [0, 1, 2]
"#;

    #[test]
    fn parses_and_builds() {
        let cfg = ExperimentConfig::from_toml_str(FIG1_TOP).unwrap();
        let sim = cfg.sim_config().unwrap();
        assert_eq!(sim.matrix.p(), 5);
        assert_eq!(sim.spec.adversaries().iter().collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(sim.policies[4], PolicyKind::Repel { magnitude: None });
        assert!(sim.policies[0].is_honest());
        assert_eq!(sim.x0, vec![0.0]);
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = ExperimentConfig::from_toml_str(FIG1_TOP).unwrap();
        let text = cfg.to_toml_string().unwrap();
        let again = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.sim_config().unwrap(), again.sim_config().unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = FIG1_TOP.replace("alpha = 0.8", "alpha = 0.8\ngamma = 1.0");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
    }

    #[test]
    fn invalid_schedule_names_clause() {
        let text = FIG1_TOP.replace("beta = 0.6", "beta = 0.3");
        let err = ExperimentConfig::from_toml_str(&text).unwrap().sim_config().unwrap_err();
        assert!(matches!(err, Error::InvalidSchedule(_)), "{err}");
    }

    #[test]
    fn named_matrices() {
        assert_eq!(named_matrix("ones5").unwrap().p(), 5);
        assert_eq!(named_matrix("fig1_generic").unwrap().d(), 2);
        assert!(named_matrix("nope").is_err());
        let both = MatrixSection {
            name: Some("ones5".into()),
            rows: Some(vec![vec![1.0]]),
        };
        assert!(both.build().is_err());
    }

    #[test]
    fn too_many_adversaries() {
        let text = FIG1_TOP.replace("adversary_count = 2", "adversary_count = 6");
        assert!(ExperimentConfig::from_toml_str(&text).unwrap().sim_config().is_err());
    }
}
