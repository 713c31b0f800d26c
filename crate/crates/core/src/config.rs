//! Scenario configuration: TOML schema (versioned, unknown keys rejected),
//! validation, and the built-in presets.
//!
//! The full key reference lives in `docs/config-schema.md`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::escape::{ControllerVariant, SolverOptions};
use crate::model::{Attacker, SystemModel};
use crate::tracker::TrackerConfig;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub run: RunSection,
    pub model: ModelSection,
    pub scenario: ScenarioSection,
    pub attacker: AttackerSection,
    pub detector: DetectorSection,
    pub tracker: TrackerSection,
    pub escape: EscapeSection,
    pub limits: LimitsSection,
    pub robust: RobustSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub steps: usize,
    pub seed: u64,
    /// Position distance at which the goal counts as reached.
    pub goal_tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c_gps: Vec<Vec<f64>>,
    pub c_imu: Vec<Vec<f64>>,
    pub c_rssi: Vec<f64>,
    pub sigma_process: Vec<Vec<f64>>,
    pub sigma_gps: Vec<Vec<f64>>,
    pub sigma_imu: Vec<Vec<f64>>,
    pub sigma_rssi: Vec<Vec<f64>>,
    /// Genuine signal strength; derived from the attacker's effective range
    /// when omitted (`eta_genuine = c_rssi[0] * eta / r_effect^2`).
    pub eta_genuine: Option<f64>,
    pub pos_index: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerSection {
    pub position: Vec<f64>,
    pub eta: f64,
    pub spoof: Vec<f64>,
    pub r_effect: f64,
    /// Optional per-step position offsets (applied cumulatively) to exercise
    /// a moving spoofing device.
    #[serde(default)]
    pub motion: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub alpha: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerSection {
    pub window: usize,
    pub position_offset: Vec<f64>,
    pub power_prior: f64,
    pub prior_pos_std: f64,
    pub prior_power_std: f64,
    pub process_noise: Vec<f64>,
    pub power_max: f64,
    /// Innovation gate (Mahalanobis square); omit to disable.
    pub innovation_gate: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscapeSection {
    pub zeta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Prediction horizon is `k_escape + horizon_offset`.
    pub horizon_offset: usize,
    pub variant: ControllerVariant,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub max_outer: usize,
    pub max_inner: usize,
    pub grad_tol: f64,
    pub constraint_tol: f64,
    /// Cap on the escape-time search.
    pub max_escape_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsSection {
    pub v_max: f64,
    pub u_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustSection {
    pub kp: f64,
    pub kd: f64,
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what}: ragged rows")));
    }
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &data))
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                config.schema_version
            )));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Build the validated system model (deriving the genuine signal strength
    /// from the effective range when unset).
    pub fn system_model(&self) -> Result<SystemModel> {
        let c_rssi = DVector::from_vec(self.model.c_rssi.clone());
        let eta_genuine = match self.model.eta_genuine {
            Some(v) => v,
            None => {
                let c0 = *c_rssi.get(0).ok_or_else(|| {
                    Error::Config("c_rssi must have at least one entry".into())
                })?;
                c0 * self.attacker.eta / (self.attacker.r_effect * self.attacker.r_effect)
            }
        };
        // the relative channel may be absent entirely
        let m_i = self.model.c_imu.len();
        let a = to_matrix(&self.model.a, "a")?;
        let sigma_imu = if m_i == 0 {
            DMatrix::zeros(0, 0)
        } else {
            to_matrix(&self.model.sigma_imu, "sigma_imu")?
        };
        let c_imu = if m_i == 0 {
            DMatrix::zeros(0, a.nrows())
        } else {
            to_matrix(&self.model.c_imu, "c_imu")?
        };
        let model = SystemModel {
            a,
            b: to_matrix(&self.model.b, "b")?,
            c_gps: to_matrix(&self.model.c_gps, "c_gps")?,
            c_imu,
            c_rssi,
            sigma_process: to_matrix(&self.model.sigma_process, "sigma_process")?,
            sigma_gps: to_matrix(&self.model.sigma_gps, "sigma_gps")?,
            sigma_imu,
            sigma_rssi: to_matrix(&self.model.sigma_rssi, "sigma_rssi")?,
            eta_genuine,
            pos_index: self.model.pos_index.clone(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn attacker(&self) -> Attacker {
        Attacker {
            position: self.attacker.position.clone(),
            eta: self.attacker.eta,
            spoof: self.attacker.spoof.clone(),
            r_effect: self.attacker.r_effect,
        }
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            window: self.tracker.window,
            position_offset: self.tracker.position_offset.clone(),
            power_prior: self.tracker.power_prior,
            prior_pos_std: self.tracker.prior_pos_std,
            prior_power_std: self.tracker.prior_power_std,
            process_noise: self.tracker.process_noise.clone(),
            power_max: self.tracker.power_max,
            innovation_gate: self.tracker.innovation_gate,
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            max_outer: self.escape.max_outer,
            max_inner: self.escape.max_inner,
            grad_tol: self.escape.grad_tol,
            constraint_tol: self.escape.constraint_tol,
        }
    }

    /// Cross-field dimensional and range checks (fail fast at load).
    pub fn validate(&self) -> Result<()> {
        if self.run.steps == 0 {
            return Err(Error::Config("run.steps must be at least 1".into()));
        }
        let model = self.system_model()?;
        let n = model.state_dim();
        let attacker = self.attacker();
        attacker.validate(&model)?;
        if self.scenario.start.len() != n || self.scenario.goal.len() != n {
            return Err(Error::Config("start/goal must match the state dimension".into()));
        }
        if !(0.0 < self.detector.alpha && self.detector.alpha < 1.0) {
            return Err(Error::Config("detector.alpha must be in (0,1)".into()));
        }
        if !(0.0 < self.detector.delta && self.detector.delta < 1.0) {
            return Err(Error::Config("detector.delta must be in (0,1)".into()));
        }
        let n_a = model.pos_index.len();
        if self.tracker.position_offset.len() != n_a {
            return Err(Error::Config("tracker.position_offset must match position dimension".into()));
        }
        if self.tracker.process_noise.len() != n_a + 1 {
            return Err(Error::Config(
                "tracker.process_noise needs one entry per position component plus power".into(),
            ));
        }
        if self.tracker.window == 0 {
            return Err(Error::Config("tracker.window must be at least 1".into()));
        }
        if self.escape.q_diag.len() != n {
            return Err(Error::Config("escape.q_diag must match the state dimension".into()));
        }
        if self.escape.r_diag.len() != model.input_dim() {
            return Err(Error::Config("escape.r_diag must match the input dimension".into()));
        }
        if self.escape.q_diag.iter().chain(&self.escape.r_diag).any(|&v| v <= 0.0) {
            return Err(Error::Config("escape weights must be positive".into()));
        }
        if self.escape.zeta <= 0.0 {
            return Err(Error::Config("escape.zeta must be positive".into()));
        }
        if !(0.5 < self.escape.gamma && self.escape.gamma < 1.0) {
            return Err(Error::Config("escape.gamma must be in (0.5, 1)".into()));
        }
        if self.limits.u_max <= 0.0 || self.limits.v_max <= 0.0 {
            return Err(Error::Config("limits must be positive".into()));
        }
        if self.robust.kp <= 0.0 || self.robust.kd <= 0.0 {
            return Err(Error::Config("robust gains must be positive".into()));
        }
        for step in &self.attacker.motion {
            if step.len() != n_a {
                return Err(Error::Config("attacker.motion entries must match position dimension".into()));
            }
        }
        Ok(())
    }
}

/// Built-in presets addressable from the CLI.
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    match name {
        "paper-v" => Ok(paper_v()),
        "paper-v-r10" => Ok(paper_v_with_range(10.0)),
        "paper-v-r30" => Ok(paper_v_with_range(30.0)),
        "paper-v-r50" => Ok(paper_v_with_range(50.0)),
        "paper-v-r70" => Ok(paper_v_with_range(70.0)),
        "paper-v-near-start" => Ok(paper_v_near_start()),
        "paper-v-no-attack" => Ok(paper_v_no_attack()),
        other => Err(Error::Config(format!(
            "unknown preset '{other}' (available: {})",
            PRESET_NAMES.join(", ")
        ))),
    }
}

pub const PRESET_NAMES: [&str; 7] = [
    "paper-v",
    "paper-v-r10",
    "paper-v-r30",
    "paper-v-r50",
    "paper-v-r70",
    "paper-v-near-start",
    "paper-v-no-attack",
];

/// Reference scenario: planar double integrator at 0.1 s sampling flying
/// (0,0) -> (300,300) past a spoofing device at (100,100) with a 30 m
/// effective range; potential-program escape controller.
pub fn paper_v() -> ScenarioConfig {
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        run: RunSection { steps: 1200, seed: 0, goal_tolerance: 5.0 },
        model: ModelSection {
            a: vec![
                vec![1.0, 0.0, 0.1, 0.0],
                vec![0.0, 1.0, 0.0, 0.1],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
            b: vec![
                vec![0.0, 0.0],
                vec![0.0, 0.0],
                vec![0.1, 0.0],
                vec![0.0, 0.1],
            ],
            c_gps: vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]],
            c_imu: vec![vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]],
            c_rssi: vec![1.0],
            sigma_process: scaled_identity(4, 0.1),
            sigma_gps: scaled_identity(2, 1.0),
            sigma_imu: scaled_identity(2, 0.01),
            sigma_rssi: scaled_identity(1, 1.0),
            eta_genuine: None,
            pos_index: vec![0, 1],
        },
        scenario: ScenarioSection {
            start: vec![0.0, 0.0, 0.0, 0.0],
            goal: vec![300.0, 300.0, 0.0, 0.0],
        },
        attacker: AttackerSection {
            position: vec![100.0, 100.0],
            eta: 200.0,
            spoof: vec![10.0, 10.0],
            r_effect: 30.0,
            motion: vec![],
        },
        detector: DetectorSection { alpha: 0.01, delta: 0.15 },
        tracker: TrackerSection {
            window: 5,
            position_offset: vec![10.0, 10.0],
            power_prior: 100.0,
            prior_pos_std: 50.0,
            prior_power_std: 100.0,
            process_noise: vec![0.05, 0.05, 0.01],
            power_max: 1e4,
            innovation_gate: Some(100.0),
        },
        escape: EscapeSection {
            zeta: 3.0,
            alpha: 0.01,
            beta: 50_000.0,
            gamma: 0.99,
            horizon_offset: 40,
            variant: ControllerVariant::Potential,
            q_diag: vec![1e-3, 1e-3, 1e-3, 1e-3],
            r_diag: vec![0.1, 0.1],
            max_outer: 6,
            max_inner: 60,
            grad_tol: 1e-4,
            constraint_tol: 1e-6,
            max_escape_steps: 100_000,
        },
        limits: LimitsSection { v_max: 5.0, u_max: 2.0 },
        robust: RobustSection { kp: 0.2, kd: 0.9 },
    }
}

/// Range-sweep variant: same flight, effective range swapped (genuine signal
/// strength re-derived), hard-constrained escape with potential fallback, and
/// a tracker prior seeded one effective range ahead along the flight path.
pub fn paper_v_with_range(r_effect: f64) -> ScenarioConfig {
    let mut cfg = paper_v();
    cfg.attacker.r_effect = r_effect;
    cfg.run.steps = 520;
    cfg.escape.variant = ControllerVariant::TubeWithFallback;
    let along = r_effect / 2.0_f64.sqrt();
    cfg.tracker.position_offset = vec![along, along];
    cfg.tracker.prior_pos_std = 20.0;
    cfg
}

/// Attack beginning with the UAV already deep inside a 40 m effective range,
/// cruising past the device; soft-constrained escape only.
pub fn paper_v_near_start() -> ScenarioConfig {
    let mut cfg = paper_v();
    cfg.attacker.r_effect = 40.0;
    let v = 5.0 / 2.0_f64.sqrt();
    cfg.scenario.start = vec![95.0, 95.0, v, v];
    cfg.run.steps = 420;
    cfg.escape.variant = ControllerVariant::Potential;
    cfg
}

/// Spoofing device parked far outside the flight corridor: no attack ever
/// lands, used for detector calibration.
pub fn paper_v_no_attack() -> ScenarioConfig {
    let mut cfg = paper_v();
    cfg.attacker.position = vec![1.0e7, 1.0e7];
    // keep the genuine strength of the reference scenario rather than a value
    // derived from the parked device
    cfg.model.eta_genuine = Some(200.0 / 900.0);
    cfg.run.steps = 500;
    cfg
}

fn scaled_identity(n: usize, s: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { s } else { 0.0 }).collect())
        .collect()
}
