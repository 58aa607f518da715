//! Scenario configuration: flat TOML keys, per-plant defaults and
//! `key=value` overrides.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor_critic::{
    make_extrapolation_grid, CostWeights, ExtrapolationSet, Fallback, LearnerGains, QuadraticBasis,
};
use crate::barrier::SafeBox;
use crate::estimator::EstimatorGains;
use crate::plant::{plant_by_name, TransformedModel};
use crate::simulator::{Frame, InitialConditions, IntegratorSettings, Scenario};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key=value")]
    BadOverride(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Square matrix given either by its diagonal or by rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Diagonal(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn diag(values: &[f64]) -> Self {
        MatrixSpec::Diagonal(values.to_vec())
    }

    pub fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>, ConfigError> {
        match self {
            MatrixSpec::Diagonal(d) if !d.is_empty() => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d))),
            MatrixSpec::Rows(rows) if !rows.is_empty() && rows.iter().all(|r| r.len() == rows.len()) => {
                let n = rows.len();
                Ok(DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied()))
            }
            _ => Err(ConfigError::Invalid(format!("`{name}` must be a non-empty diagonal or square matrix"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Cost of the learning run's own trajectory.
    #[default]
    Learning,
    /// Cost of a fixed-weight replay with the final critic weights.
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FallbackKind {
    #[default]
    InitialActor,
    Zero,
}

/// Scenario file contents. Every key is optional in a file; missing keys take
/// the defaults of the selected plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub plant: String,
    pub basis: String,
    pub box_lower: Vec<f64>,
    pub box_upper: Vec<f64>,
    pub x0: Vec<f64>,
    pub k_c1: f64,
    pub k_c2: f64,
    pub k_a1: f64,
    pub k_a2: f64,
    pub beta: f64,
    pub gamma1: f64,
    pub beta1: MatrixSpec,
    pub y_f_bound: f64,
    pub q: MatrixSpec,
    pub r: MatrixSpec,
    pub w_c0: Vec<f64>,
    pub w_a0: Vec<f64>,
    pub gamma0: MatrixSpec,
    pub theta_hat0: Vec<f64>,
    pub n_extrap: usize,
    pub extrap_half_width: f64,
    pub seed: u64,
    pub dt: f64,
    pub t_final: f64,
    pub sample_interval: f64,
    pub fallback: FallbackKind,
    pub cost_mode: CostMode,
}

/// Keys accepted in config files and overrides, in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "plant",
    "basis",
    "box_lower",
    "box_upper",
    "x0",
    "k_c1",
    "k_c2",
    "k_a1",
    "k_a2",
    "beta",
    "gamma1",
    "beta1",
    "y_f_bound",
    "q",
    "r",
    "w_c0",
    "w_a0",
    "gamma0",
    "theta_hat0",
    "n_extrap",
    "extrap_half_width",
    "seed",
    "dt",
    "t_final",
    "sample_interval",
    "fallback",
    "cost_mode",
];

/// Gains a sweep may vary.
pub const SWEEPABLE: &[&str] = &["k_c1", "k_c2", "k_a1", "k_a2", "beta", "gamma1"];

impl SimConfig {
    pub fn two_state() -> Self {
        Self {
            plant: "two_state".into(),
            basis: "two_state_quadratic".into(),
            box_lower: vec![-7.0, -5.0],
            box_upper: vec![5.0, 7.0],
            x0: vec![-6.5, 6.5],
            k_c1: 0.3,
            k_c2: 5.0,
            k_a1: 180.0,
            k_a2: 0.0001,
            beta: 0.03,
            gamma1: 0.5,
            beta1: MatrixSpec::diag(&[50.0; 4]),
            // RK4 on the theta_hat filter needs beta1 ||Y_f||^2 dt < 2.78; 5 keeps dt = 1e-3 stable
            y_f_bound: 5.0,
            q: MatrixSpec::diag(&[10.0, 10.0]),
            r: MatrixSpec::diag(&[0.1]),
            w_c0: vec![0.5; 3],
            w_a0: vec![0.5; 3],
            gamma0: MatrixSpec::diag(&[1.0; 3]),
            theta_hat0: vec![0.0; 4],
            n_extrap: 100,
            extrap_half_width: 2.0,
            seed: 0,
            dt: 1e-4,
            t_final: 10.0,
            sample_interval: 1e-3,
            fallback: FallbackKind::InitialActor,
            cost_mode: CostMode::Learning,
        }
    }

    pub fn robot() -> Self {
        let w0 = vec![60.0, 2.0, 2.0, 2.0, 2.0, 2.0, 40.0, 2.0, 2.0, 2.0];
        Self {
            plant: "robot".into(),
            basis: "robot_quadratic".into(),
            box_lower: vec![-7.0, -7.0, -5.0, -5.0],
            box_upper: vec![5.0, 5.0, 7.0, 7.0],
            x0: vec![-5.0, -5.0, 5.0, 5.0],
            k_c1: 0.1,
            k_c2: 10.0,
            k_a1: 20.0,
            k_a2: 0.2,
            beta: 0.8,
            gamma1: 100.0,
            beta1: MatrixSpec::diag(&[100.0; 4]),
            y_f_bound: 5.0,
            q: MatrixSpec::diag(&[1.0; 4]),
            r: MatrixSpec::diag(&[1.0; 2]),
            w_c0: w0.clone(),
            w_a0: w0,
            gamma0: MatrixSpec::diag(&[10.0; 10]),
            theta_hat0: vec![5.0; 4],
            n_extrap: 100,
            extrap_half_width: 2.0,
            seed: 0,
            dt: 1e-4,
            t_final: 20.0,
            sample_interval: 1e-3,
            fallback: FallbackKind::InitialActor,
            cost_mode: CostMode::Learning,
        }
    }

    pub fn defaults_for(plant: &str) -> Result<Self, ConfigError> {
        match plant {
            "two_state" => Ok(Self::two_state()),
            "robot" => Ok(Self::robot()),
            other => Err(ConfigError::Invalid(format!("unknown plant `{other}`"))),
        }
    }

    /// Parses a config, filling missing keys from the plant defaults, then
    /// applies `key=value` overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for ov in overrides {
            let (key, value) = parse_override(ov)?;
            table.insert(key, value);
        }
        for key in table.keys() {
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        let plant = match table.get("plant") {
            Some(toml::Value::String(p)) => p.clone(),
            Some(_) => return Err(ConfigError::Invalid("`plant` must be a string".into())),
            None => return Err(ConfigError::Invalid("missing `plant`".into())),
        };
        let defaults = Self::defaults_for(&plant)?;
        let mut merged = toml::Table::try_from(&defaults).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merged.extend(table);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies one override to an already-built config.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        let text = self.to_toml_string();
        Self::from_toml_str(&text, &[format!("{key}={value}")])
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let n = self.x0.len();
        if self.box_lower.len() != n || self.box_upper.len() != n {
            return bad("x0, box_lower and box_upper must have the same length".into());
        }
        let bx = SafeBox::new(self.box_lower.clone(), self.box_upper.clone())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !bx.contains(&DVector::from_column_slice(&self.x0)) {
            return bad(format!("x0 = {:?} is not strictly inside the box", self.x0));
        }
        for (name, v) in [
            ("k_c1", self.k_c1),
            ("k_c2", self.k_c2),
            ("k_a1", self.k_a1),
            ("k_a2", self.k_a2),
            ("gamma1", self.gamma1),
            ("y_f_bound", self.y_f_bound),
            ("dt", self.dt),
            ("t_final", self.t_final),
            ("sample_interval", self.sample_interval),
            ("extrap_half_width", self.extrap_half_width),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("`{name}` must be positive, got {v}"));
            }
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("`beta` must be non-negative, got {}", self.beta));
        }
        if self.n_extrap == 0 {
            return bad("`n_extrap` must be at least 1".into());
        }
        if self.w_c0.len() != self.w_a0.len() {
            return bad("w_c0 and w_a0 must have the same length".into());
        }
        for (name, m) in [("q", &self.q), ("r", &self.r), ("beta1", &self.beta1), ("gamma0", &self.gamma0)] {
            let mat = m.to_matrix(name)?;
            if !crate::linalg::is_symmetric_pd(&mat) {
                return bad(format!("`{name}` must be symmetric positive definite"));
            }
        }
        Ok(())
    }

    /// Resolves names and numbers into a runnable scenario.
    pub fn build(&self) -> Result<Scenario, ConfigError> {
        self.validate()?;
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        let (plant, _) = plant_by_name(&self.plant).map_err(|e| invalid(&e))?;
        let bx = SafeBox::new(self.box_lower.clone(), self.box_upper.clone()).map_err(|e| invalid(&e))?;
        let model = TransformedModel::new(plant, bx).map_err(|e| invalid(&e))?;
        let n = model.plant().state_dim();
        let p = model.plant().param_dim();
        let basis = QuadraticBasis::by_name(&self.basis).map_err(|e| invalid(&e))?;
        let costs = CostWeights::new(self.q.to_matrix("q")?, self.r.to_matrix("r")?).map_err(|e| invalid(&e))?;
        let estimator =
            EstimatorGains::new(self.beta1.to_matrix("beta1")?, self.y_f_bound).map_err(|e| invalid(&e))?;
        let points = make_extrapolation_grid(n, self.n_extrap, self.extrap_half_width, self.seed);
        let extrapolation = ExtrapolationSet::new(points, &model, &basis, &costs).map_err(|e| invalid(&e))?;
        if self.theta_hat0.len() != p {
            return Err(ConfigError::Invalid(format!("theta_hat0 needs {p} entries")));
        }
        let q = model.plant().input_dim();
        let fallback = match self.fallback {
            FallbackKind::InitialActor => Fallback::InitialActor,
            FallbackKind::Zero => Fallback::Custom(Arc::new(move |_s: &DVector<f64>, _t| DVector::zeros(q))),
        };
        Ok(Scenario {
            model,
            basis: Arc::new(basis),
            costs,
            estimator,
            gains: LearnerGains {
                k_c1: self.k_c1,
                k_c2: self.k_c2,
                k_a1: self.k_a1,
                k_a2: self.k_a2,
                beta: self.beta,
                gamma1: self.gamma1,
            },
            extrapolation,
            fallback,
            init: InitialConditions {
                x0: DVector::from_column_slice(&self.x0),
                theta_hat0: DVector::from_column_slice(&self.theta_hat0),
                w_c0: DVector::from_column_slice(&self.w_c0),
                w_a0: DVector::from_column_slice(&self.w_a0),
                gamma0: self.gamma0.to_matrix("gamma0")?,
            },
            integrator: IntegratorSettings {
                dt: self.dt,
                t_final: self.t_final,
                sample_interval: self.sample_interval,
            },
            learning: true,
            frame: Frame::Transformed,
            schedule: None,
        })
    }
}

fn parse_override(raw: &str) -> Result<(String, toml::Value), ConfigError> {
    let (key, value) = raw.split_once('=').ok_or_else(|| ConfigError::BadOverride(raw.to_string()))?;
    let key = key.trim();
    let value = value.trim();
    if key.is_empty() || value.is_empty() {
        return Err(ConfigError::BadOverride(raw.to_string()));
    }
    if !CONFIG_KEYS.contains(&key) {
        return Err(ConfigError::UnknownKey(key.to_string()));
    }
    // parse as a TOML value; fall back to a bare string (plant = robot)
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    // integers are accepted where floats are expected
    let parsed = match parsed {
        toml::Value::Integer(i) if !matches!(key, "seed" | "n_extrap") => toml::Value::Float(i as f64),
        other => other,
    };
    Ok((key.to_string(), parsed))
}
