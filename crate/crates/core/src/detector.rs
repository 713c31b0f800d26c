//! Chi-squared CUSUM attack detector.
//!
//! Each step the GPS residual against the one-step output prediction is
//! normalized by its innovation covariance, accumulated into a geometrically
//! discounted statistic, and compared against the discounted chi-squared
//! threshold. Crossing it switches the control mode to emergency; dropping
//! back below returns to robust.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{spd_solve, symmetrize};
use crate::model::SystemModel;
use crate::stats::chi2_quantile;
use crate::{Error, Result};

/// Control mode selected by the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    Robust,
    Emergency,
}

impl std::fmt::Display for ControlMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlMode::Robust => write!(f, "ROBUST"),
            ControlMode::Emergency => write!(f, "EMERGENCY"),
        }
    }
}

/// CUSUM statistic and switching state.
#[derive(Debug, Clone)]
pub struct DetectorState {
    /// Discounted statistic, >= 0.
    pub s: f64,
    /// Forgetting factor in (0, 1).
    pub delta: f64,
    /// Significance level in (0, 1).
    pub alpha: f64,
    /// Degrees of freedom of the per-step statistic (GPS output dimension).
    pub df: usize,
    /// Current control mode.
    pub mode: ControlMode,
    /// Time index of the most recent robust-to-emergency switch.
    pub k_attack: Option<usize>,
    threshold: f64,
}

impl DetectorState {
    pub fn new(alpha: f64, delta: f64, df: usize) -> Result<Self> {
        if !(0.0 < delta && delta < 1.0) {
            return Err(Error::Config(format!("forgetting factor must be in (0,1), got {delta}")));
        }
        if !(0.0 < alpha && alpha < 1.0) {
            return Err(Error::Config(format!("significance must be in (0,1), got {alpha}")));
        }
        if df == 0 {
            return Err(Error::Config("detector needs at least one GPS output".into()));
        }
        // upper-tail chi-squared point, discounted by the geometric series
        let threshold = chi2_quantile(df as f64, 1.0 - alpha)? / (1.0 - delta);
        Ok(DetectorState {
            s: 0.0,
            delta,
            alpha,
            df,
            mode: ControlMode::Robust,
            k_attack: None,
            threshold,
        })
    }

    /// Discounted decision threshold `chi2_df(alpha) / (1 - delta)`.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// Attack-vector estimate from the previous state estimate:
/// `d_hat = y_gps - C_gps (A x_hat_prev + B u_prev)`.
///
/// The previous estimate is required; the current one is correlated with the
/// current output and must not be used here.
pub fn estimate_attack(
    model: &SystemModel,
    y_gps: &DVector<f64>,
    x_hat_prev: &DVector<f64>,
    u_prev: &DVector<f64>,
) -> DVector<f64> {
    y_gps - &model.c_gps * (&model.a * x_hat_prev + &model.b * u_prev)
}

/// Innovation covariance of the attack-vector estimate:
/// `C_gps (A P A' + S_w) C_gps' + S_gps`.
pub fn innovation_covariance(model: &SystemModel, p_prev: &DMatrix<f64>) -> DMatrix<f64> {
    let mid = &model.a * p_prev * model.a.transpose() + &model.sigma_process;
    symmetrize(&(&model.c_gps * mid * model.c_gps.transpose() + &model.sigma_gps))
}

/// One CUSUM update: `S <- delta S + d_hat' P_d^{-1} d_hat`.
pub fn cusum_step(det: &mut DetectorState, d_hat: &DVector<f64>, p_d: &DMatrix<f64>) -> Result<f64> {
    let normalized = d_hat.dot(&spd_solve(p_d, d_hat)?);
    det.s = det.delta * det.s + normalized;
    Ok(normalized)
}

/// Mode decision: emergency iff the statistic strictly exceeds the discounted
/// threshold (equality stays robust). Records the step index on a
/// robust-to-emergency transition.
pub fn decide(det: &mut DetectorState, k: usize) -> ControlMode {
    let next = if det.s > det.threshold {
        ControlMode::Emergency
    } else {
        ControlMode::Robust
    };
    if det.mode == ControlMode::Robust && next == ControlMode::Emergency {
        det.k_attack = Some(k);
    }
    det.mode = next;
    next
}
