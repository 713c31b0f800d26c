//! Attacker location tracker.
//!
//! Unscented Kalman filter over the augmented attacker state
//! `[position, transmit power]` with a random-walk transition. Identifiability
//! from range-only signal strength comes from stacking the last `M`
//! measurements together with the UAV position estimates at which they were
//! taken; each sigma point is pushed through the inverse-square signal map
//! against every stored position.
//!
//! Two guards keep the filter healthy on this strongly nonlinear map: updates
//! whose innovation is wildly inconsistent with the predicted spread are
//! skipped (configurable gate), and the posterior covariance is floored onto
//! the PSD cone instead of being inflated wholesale.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::linalg::{cholesky_with_jitter, psd_floor, spd_solve, spd_solve_matrix, symmetrize};
use crate::model::SystemModel;
use crate::{Error, Result, EPS_DIST};

/// Smallest admissible power estimate.
pub const EPS_POWER: f64 = 1e-3;

/// Tracker tuning knobs.
#[derive(Debug, Clone)]
pub struct TrackerConfig {
    /// Sliding-window length M.
    pub window: usize,
    /// Offset added to the UAV position estimate to seed the position prior.
    pub position_offset: Vec<f64>,
    /// Prior power estimate.
    pub power_prior: f64,
    /// Prior standard deviation on each position component.
    pub prior_pos_std: f64,
    /// Prior standard deviation on the power component.
    pub prior_power_std: f64,
    /// Random-walk process noise (diagonal), length n_a + 1.
    pub process_noise: Vec<f64>,
    /// Upper clamp on the power estimate (transmit hardware is power-limited).
    pub power_max: f64,
    /// Skip updates whose innovation Mahalanobis square exceeds this; `None`
    /// disables the gate.
    pub innovation_gate: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            window: 5,
            position_offset: vec![10.0, 10.0],
            power_prior: 100.0,
            prior_pos_std: 50.0,
            prior_power_std: 100.0,
            process_noise: vec![0.05, 0.05, 0.01],
            power_max: 1e4,
            innovation_gate: Some(100.0),
        }
    }
}

/// One stored window entry: measurement and the UAV position estimate at
/// which it was taken.
#[derive(Debug, Clone)]
pub struct WindowEntry {
    pub y_rssi: DVector<f64>,
    pub uav_pos: DVector<f64>,
}

/// Augmented attacker estimate `[position; power]` with covariance and the
/// sliding measurement window (newest first).
#[derive(Debug, Clone)]
pub struct AttackerEstimate {
    pub z_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub sigma_process: DMatrix<f64>,
    window: VecDeque<WindowEntry>,
    config: TrackerConfig,
    /// Updates skipped by the innovation gate.
    pub gated_updates: usize,
}

impl AttackerEstimate {
    /// Seed the tracker from the UAV position estimate at detection.
    pub fn initialize(uav_pos_est: &DVector<f64>, config: TrackerConfig) -> Result<Self> {
        let n_a = uav_pos_est.len();
        if config.position_offset.len() != n_a {
            return Err(Error::Config("tracker position offset dimension mismatch".into()));
        }
        if config.process_noise.len() != n_a + 1 {
            return Err(Error::Config("tracker process noise must have n_a + 1 entries".into()));
        }
        if config.window == 0 {
            return Err(Error::Config("tracker window must be nonempty".into()));
        }
        let mut z = DVector::zeros(n_a + 1);
        for i in 0..n_a {
            z[i] = uav_pos_est[i] + config.position_offset[i];
        }
        z[n_a] = config.power_prior.max(EPS_POWER);
        let mut p = DMatrix::zeros(n_a + 1, n_a + 1);
        for i in 0..n_a {
            p[(i, i)] = config.prior_pos_std * config.prior_pos_std;
        }
        p[(n_a, n_a)] = config.prior_power_std * config.prior_power_std;
        let sigma_process =
            DMatrix::from_diagonal(&DVector::from_vec(config.process_noise.clone()));
        Ok(AttackerEstimate {
            z_hat: z,
            p,
            sigma_process,
            window: VecDeque::with_capacity(config.window),
            config,
            gated_updates: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.z_hat.len()
    }

    /// Estimated device position.
    pub fn position(&self) -> DVector<f64> {
        self.z_hat.rows(0, self.dim() - 1).into_owned()
    }

    /// Estimated transmit power.
    pub fn power(&self) -> f64 {
        self.z_hat[self.dim() - 1]
    }

    /// Position block of the covariance.
    pub fn position_covariance(&self) -> DMatrix<f64> {
        let n_a = self.dim() - 1;
        self.p.view((0, 0), (n_a, n_a)).into_owned()
    }

    /// Push a measurement with the UAV position estimate it was taken at.
    pub fn push_measurement(&mut self, y_rssi: DVector<f64>, uav_pos: DVector<f64>) {
        self.window.push_front(WindowEntry { y_rssi, uav_pos });
        while self.window.len() > self.config.window {
            self.window.pop_back();
        }
    }

    /// Whether the window holds M entries.
    pub fn window_full(&self) -> bool {
        self.window.len() == self.config.window
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    /// Stored UAV positions, newest first.
    pub fn window_positions(&self) -> Vec<DVector<f64>> {
        self.window.iter().map(|e| e.uav_pos.clone()).collect()
    }

    /// Stacked measurement vector over the window, newest first.
    pub fn window_measurements(&self) -> DVector<f64> {
        let m_s = self.window.front().map_or(0, |e| e.y_rssi.len());
        let mut out = DVector::zeros(self.window.len() * m_s);
        for (j, entry) in self.window.iter().enumerate() {
            out.rows_mut(j * m_s, m_s).copy_from(&entry.y_rssi);
        }
        out
    }

    /// Ingest one measurement; runs predict + update once the window is full.
    pub fn step(&mut self, model: &SystemModel, y_rssi: DVector<f64>, uav_pos: DVector<f64>) -> Result<()> {
        self.push_measurement(y_rssi, uav_pos);
        if !self.window_full() {
            return Ok(());
        }
        let predicted = predict(self);
        let y = predicted.window_measurements();
        let positions = predicted.window_positions();
        *self = ukf_update(&predicted, &y, &positions, model)?;
        Ok(())
    }
}

/// Random-walk prediction: mean unchanged, covariance grows by the process
/// noise.
pub fn predict(est: &AttackerEstimate) -> AttackerEstimate {
    let mut out = est.clone();
    out.p = symmetrize(&(&est.p + &est.sigma_process));
    out
}

/// Symmetric sigma points: `z +- row_i(R)` with `R' R = n P`.
pub fn sigma_points(z_hat: &DVector<f64>, p: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    let n = z_hat.len();
    let scaled = p * n as f64;
    let l = cholesky_with_jitter(&scaled, 1e-9)?.l();
    let mut points = Vec::with_capacity(2 * n);
    for i in 0..n {
        let offset = l.column(i).into_owned();
        points.push(z_hat + &offset);
        points.push(z_hat - &offset);
    }
    Ok(points)
}

/// Signal-strength outputs of one (possibly sigma-point) attacker state
/// against each stored UAV position, stacked newest first.
pub fn window_outputs(
    point: &DVector<f64>,
    uav_positions: &[DVector<f64>],
    model: &SystemModel,
) -> Result<DVector<f64>> {
    let n_a = point.len() - 1;
    let m_s = model.rssi_dim();
    let power = point[n_a].max(0.0);
    let pos = point.rows(0, n_a);
    let mut out = DVector::zeros(uav_positions.len() * m_s);
    for (j, uav) in uav_positions.iter().enumerate() {
        let d2 = (&pos - uav).norm_squared();
        if d2 < EPS_DIST * EPS_DIST {
            return Err(Error::Singularity(format!(
                "sigma point within guard distance of a window position (d^2={d2:e})"
            )));
        }
        let val = &model.c_rssi * (power / d2);
        out.rows_mut(j * m_s, m_s).copy_from(&val);
    }
    Ok(out)
}

/// Full measurement update over the stacked window (equal-weight symmetric
/// sigma set, 1/(2n) each).
pub fn ukf_update(
    est: &AttackerEstimate,
    y_window: &DVector<f64>,
    uav_positions: &[DVector<f64>],
    model: &SystemModel,
) -> Result<AttackerEstimate> {
    let n = est.dim();
    let m_s = model.rssi_dim();
    let m_total = uav_positions.len() * m_s;
    if y_window.len() != m_total {
        return Err(Error::Config(format!(
            "window measurement length {} does not match {} positions x {} outputs",
            y_window.len(),
            uav_positions.len(),
            m_s
        )));
    }

    let points = sigma_points(&est.z_hat, &est.p)?;
    let weight = 1.0 / (2 * n) as f64;
    let outputs: Vec<DVector<f64>> = points
        .iter()
        .map(|pt| window_outputs(pt, uav_positions, model))
        .collect::<Result<_>>()?;

    let mut y_bar = DVector::zeros(m_total);
    for y in &outputs {
        y_bar += weight * y;
    }
    let mut p_yy = DMatrix::zeros(m_total, m_total);
    let mut p_xy = DMatrix::zeros(n, m_total);
    for (pt, y) in points.iter().zip(&outputs) {
        let dy = y - &y_bar;
        let dx = pt - &est.z_hat;
        p_yy += weight * &dy * dy.transpose();
        p_xy += weight * dx * dy.transpose();
    }
    // stacked measurement noise: block diagonal copies of sigma_rssi
    for j in 0..uav_positions.len() {
        for r in 0..m_s {
            for c in 0..m_s {
                p_yy[(j * m_s + r, j * m_s + c)] += model.sigma_rssi[(r, c)];
            }
        }
    }
    let p_yy = symmetrize(&p_yy);

    let innovation = y_window - &y_bar;
    if let Some(gate) = est.config.innovation_gate {
        let m2 = innovation.dot(&spd_solve(&p_yy, &innovation)?);
        if m2 > gate {
            let mut out = est.clone();
            out.gated_updates += 1;
            out.p = psd_floor(&out.p, 1e-9);
            return Ok(out);
        }
    }

    // K = P_xy P_yy^{-1}  (solve on the transpose)
    let k = spd_solve_matrix(&p_yy, &p_xy.transpose())?.transpose();

    let mut z = &est.z_hat + &k * &innovation;
    let n_a = n - 1;
    z[n_a] = z[n_a].clamp(EPS_POWER, est.config.power_max);
    let p = psd_floor(&symmetrize(&(&est.p - &k * &p_yy * k.transpose())), 1e-9);

    let mut out = est.clone();
    out.z_hat = z;
    out.p = p;
    Ok(out)
}
