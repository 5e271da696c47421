use std::path::{Path, PathBuf};

use dyadic_lab::grid::FiniteModel;
use dyadic_lab::verify::{ShiftSpec, WeightSpec, FIT_A2_MIN};
use serde::{Deserialize, Serialize};

use crate::checks::ALL_CHECKS;

pub const SEED_ENV: &str = "DYADIC_LAB_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d: u32,
    #[serde(rename = "N")]
    pub depth: u32,
}

impl ModelSpec {
    pub fn build(&self) -> Result<FiniteModel, String> {
        FiniteModel::new(self.d, self.depth).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsConfig {
    #[serde(flatten)]
    pub spec: WeightSpec,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub shift: ShiftSpec,
    pub weights: WeightsConfig,
    #[serde(default = "default_checks")]
    pub checks: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_fit_min")]
    pub fit_a2_min: f64,
}

fn default_checks() -> Vec<String> {
    ALL_CHECKS.iter().map(|s| s.to_string()).collect()
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_fit_min() -> f64 {
    FIT_A2_MIN
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec { d: 1, depth: 8 },
            shift: ShiftSpec::Petermichl { sign: 1.0, residue: None },
            weights: WeightsConfig {
                spec: WeightSpec::Power,
                params: vec![-0.9, -0.6, -0.3, 0.0, 0.3, 0.6, 0.9],
            },
            checks: default_checks(),
            seeds: default_seeds(),
            output: default_output(),
            fit_a2_min: FIT_A2_MIN,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub d: Option<u32>,
    pub depth: Option<u32>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub checks: Option<Vec<String>>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// Applies flags, then the seed environment variable, then validates.
    pub fn resolve(mut self, over: &Overrides) -> Result<Self, String> {
        if let Some(d) = over.d {
            self.model.d = d;
        }
        if let Some(n) = over.depth {
            self.model.depth = n;
        }
        if let Some(out) = &over.output {
            self.output = out.clone();
        }
        if let Some(checks) = &over.checks {
            self.checks = checks.clone();
        }
        if let Some(seed) = over.seed {
            self.seeds = vec![seed];
        }
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed = raw
                .trim()
                .parse()
                .map_err(|_| format!("{SEED_ENV} must be an unsigned integer, got `{raw}`"))?;
            self.seeds = vec![seed];
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.build()?;
        if self.seeds.is_empty() {
            return Err("at least one seed is required".into());
        }
        for c in &self.checks {
            if !ALL_CHECKS.contains(&c.as_str()) {
                return Err(format!("unknown check `{c}`; known: {}", ALL_CHECKS.join(", ")));
            }
        }
        if self.weights.params.iter().any(|p| !p.is_finite()) {
            return Err("weight parameters must be finite".into());
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }
}
