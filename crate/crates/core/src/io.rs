//! Output files: trajectory CSV, run summary JSON and sweep tables.
//!
//! Trajectory columns, in order (indices start at 1):
//!
//! ```text
//! t, x1..xn, s1..sn, u1..uq, theta_hat1..theta_hatp, w_c1..w_cL, w_a1..w_aL,
//! bellman_error, lambda_min_yf, y_f_norm, c3, gamma_eig_min, gamma_eig_max,
//! actor_critic_gap, identity_residual, param_lyapunov, running_cost,
//! cumulative_cost, frozen, learning
//! ```
//!
//! Floats are written with 17 significant digits; `frozen` and `learning` as 0/1.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::experiments::{status_label, RunResult, SimConfig, SweepRow};
use crate::simulator::{Sample, Trajectory};

const SCALAR_COLUMNS: [&str; 13] = [
    "bellman_error",
    "lambda_min_yf",
    "y_f_norm",
    "c3",
    "gamma_eig_min",
    "gamma_eig_max",
    "actor_critic_gap",
    "identity_residual",
    "param_lyapunov",
    "running_cost",
    "cumulative_cost",
    "frozen",
    "learning",
];

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp.{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn num(out: &mut String, v: f64) {
    let _ = write!(out, ",{v:.16e}");
}

/// Header row for the dimensions of `first`.
pub fn trajectory_header(first: &Sample) -> String {
    let mut cols = vec!["t".to_string()];
    let mut family = |prefix: &str, len: usize| cols.extend((1..=len).map(|k| format!("{prefix}{k}")));
    family("x", first.x.len());
    family("s", first.s.len());
    family("u", first.u.len());
    family("theta_hat", first.theta_hat.len());
    family("w_c", first.w_c.len());
    family("w_a", first.w_a.len());
    cols.extend(SCALAR_COLUMNS.iter().map(|c| c.to_string()));
    cols.join(",")
}

pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::new();
    let Some(first) = traj.samples.first() else {
        return out;
    };
    out.push_str(&trajectory_header(first));
    out.push('\n');
    for s in &traj.samples {
        let _ = write!(out, "{:.16e}", s.t);
        for block in [&s.x, &s.s, &s.u, &s.theta_hat, &s.w_c, &s.w_a] {
            for &v in block.iter() {
                num(&mut out, v);
            }
        }
        for v in [
            s.bellman_error,
            s.lambda_min_yf,
            s.y_f_norm,
            s.c3,
            s.gamma_eig_min,
            s.gamma_eig_max,
            s.actor_critic_gap,
            s.identity_residual,
            s.param_lyapunov,
            s.running_cost,
            s.cumulative_cost,
        ] {
            num(&mut out, v);
        }
        let _ = writeln!(out, ",{},{}", u8::from(s.frozen), u8::from(s.learning));
    }
    out
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> std::io::Result<()> {
    write_atomic(path, trajectory_csv(traj).as_bytes())
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub plant: String,
    pub seed: u64,
    pub dt: f64,
    pub t_final: f64,
    pub status: String,
    pub error: Option<String>,
    /// Time of the failure, if the run aborted.
    pub error_time: Option<f64>,
    pub safety_ok: bool,
    pub samples: usize,
    /// Trapezoid of the logged running cost; `None` for aborted runs.
    pub total_cost: Option<f64>,
    pub integrated_cost: Option<f64>,
    pub t_detected: Option<f64>,
    pub c3_min: Option<f64>,
    pub frozen: Option<bool>,
    pub theta_hat: Vec<f64>,
    pub theta_true: Vec<f64>,
    pub w_c: Vec<f64>,
    pub w_a: Vec<f64>,
    /// Citation values for comparison; not recomputed here.
    pub reference_cost: Option<f64>,
    pub offline_reference_cost: Option<f64>,
    pub config: SimConfig,
}

impl Summary {
    pub fn from_run(cfg: &SimConfig, theta_true: &[f64], result: &RunResult) -> Self {
        use crate::experiments::{ROBOT_OFFLINE_COST, ROBOT_REFERENCE_COST, TWO_STATE_OFFLINE_COST, TWO_STATE_REFERENCE_COST};
        let (reference_cost, offline_reference_cost) = match cfg.plant.as_str() {
            "two_state" => (Some(TWO_STATE_REFERENCE_COST), Some(TWO_STATE_OFFLINE_COST)),
            "robot" => (Some(ROBOT_REFERENCE_COST), Some(ROBOT_OFFLINE_COST)),
            _ => (None, None),
        };
        let traj = match result {
            Ok(o) => &o.trajectory,
            Err(f) => &f.partial,
        };
        let last = traj.last();
        let vec_of = |f: fn(&Sample) -> &nalgebra::DVector<f64>| last.map(|s| f(s).as_slice().to_vec()).unwrap_or_default();
        let mut out = Self {
            plant: cfg.plant.clone(),
            seed: cfg.seed,
            dt: cfg.dt,
            t_final: cfg.t_final,
            status: status_label(result).to_string(),
            error: None,
            error_time: None,
            safety_ok: true,
            samples: traj.len(),
            total_cost: None,
            integrated_cost: None,
            t_detected: None,
            c3_min: None,
            frozen: None,
            theta_hat: vec_of(|s| &s.theta_hat),
            theta_true: theta_true.to_vec(),
            w_c: vec_of(|s| &s.w_c),
            w_a: vec_of(|s| &s.w_a),
            reference_cost,
            offline_reference_cost,
            config: cfg.clone(),
        };
        match result {
            Ok(o) => {
                let s = &o.summary;
                out.safety_ok = s.safety_ok;
                out.total_cost = Some(s.total_cost);
                out.integrated_cost = Some(s.integrated_cost);
                out.t_detected = s.t_detected;
                out.c3_min = s.c3_min;
                out.frozen = Some(s.frozen);
            }
            Err(f) => {
                out.error = Some(f.error.to_string());
                out.error_time = f.error.time();
                // learning switches on at detection, so the partial log still dates it
                out.t_detected = f.partial.samples.iter().find(|s| s.learning).map(|s| s.t);
                out.safety_ok = !matches!(f.error, crate::simulator::SimError::SafetyViolation { .. });
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }
}

pub fn write_summary(path: &Path, summary: &Summary) -> std::io::Result<()> {
    write_atomic(path, summary.to_json().as_bytes())
}

/// `parameter,value,cost,safety_ok,status`; failed runs leave `cost` empty.
pub fn sweep_csv(parameter: &str, rows: &[SweepRow]) -> String {
    let mut out = String::from("parameter,value,cost,safety_ok,status\n");
    for r in rows {
        let cost = r.cost.map(|c| format!("{c:.16e}")).unwrap_or_default();
        let _ = writeln!(out, "{parameter},{:.16e},{cost},{},{}", r.value, u8::from(r.safety_ok), r.status);
    }
    out
}

pub fn write_sweep(path: &Path, parameter: &str, rows: &[SweepRow]) -> std::io::Result<()> {
    write_atomic(path, sweep_csv(parameter, rows).as_bytes())
}
