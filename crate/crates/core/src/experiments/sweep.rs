//! One-at-a-time sensitivity sweeps.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::{ConfigError, SimConfig, SWEEPABLE};
use super::{evaluate_cost, status_label};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub parameter: String,
    pub values: Vec<f64>,
    pub base: SimConfig,
}

impl SweepSpec {
    pub fn new(parameter: &str, values: Vec<f64>, base: SimConfig) -> Result<Self, ConfigError> {
        if !SWEEPABLE.contains(&parameter) {
            return Err(ConfigError::Invalid(format!(
                "cannot sweep `{parameter}`; expected one of {}",
                SWEEPABLE.join(", ")
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(ConfigError::Invalid(format!("sweep value {v} is not finite")));
        }
        Ok(Self {
            parameter: parameter.to_string(),
            values,
            base,
        })
    }

    /// Config of the `k`th row.
    pub fn config_for(&self, value: f64) -> Result<SimConfig, ConfigError> {
        self.base.with_override(&self.parameter, &format!("{value:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    /// `None` when the scored run failed.
    pub cost: Option<f64>,
    pub safety_ok: bool,
    pub status: String,
}

/// Runs every sweep value on up to `parallel` threads. Rows come back in
/// the order of `values`.
pub fn sensitivity_sweep(spec: &SweepSpec, parallel: usize) -> Result<Vec<SweepRow>, ConfigError> {
    let configs = spec
        .values
        .iter()
        .map(|&v| spec.config_for(v))
        .collect::<Result<Vec<_>, _>>()?;
    let slots: Mutex<Vec<Option<Result<SweepRow, ConfigError>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = parallel.max(1).min(configs.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= configs.len() {
                    break;
                }
                let row = evaluate_cost(&configs[k]).map(|eval| SweepRow {
                    value: spec.values[k],
                    cost: eval.cost(),
                    safety_ok: eval.safe(),
                    status: status_label(eval.scored()).to_string(),
                });
                slots.lock().expect("sweep slots")[k] = Some(row);
            });
        }
    });

    slots
        .into_inner()
        .expect("sweep slots")
        .into_iter()
        .map(|r| r.expect("every row evaluated"))
        .collect()
}
