//! Resilient Kalman-like state estimator.
//!
//! Two instances run per scenario: one fuses GPS and the relative channel and
//! feeds the attack detector; the other mirrors it until an attack is flagged
//! and then continues on the relative channel alone (GPS gain forced to zero).
//! The same covariance recursion, iterated without measurements, predicts the
//! GPS-denied drift used for escape-time computation.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{spd_solve_matrix, symmetrize};
use crate::model::SystemModel;
use crate::{Error, Result};

/// Which sensor channels the estimator consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    GpsImu,
    ImuOnly,
}

/// State estimate with error covariance.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub mode: EstimatorMode,
}

impl EstimatorState {
    pub fn new(x_hat: DVector<f64>, p: DMatrix<f64>, mode: EstimatorMode) -> Self {
        EstimatorState { x_hat, p, mode }
    }
}

/// Stacked output view for one mode: C, D, and measurement covariance.
struct StackedModel {
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    sigma_y: DMatrix<f64>,
}

fn stacked(model: &SystemModel, mode: EstimatorMode) -> StackedModel {
    let (m_g, m_i, n) = (model.gps_dim(), model.imu_dim(), model.state_dim());
    match mode {
        EstimatorMode::GpsImu => {
            let rows = m_g + m_i;
            let mut c = DMatrix::zeros(rows, n);
            c.view_mut((0, 0), (m_g, n)).copy_from(&model.c_gps);
            c.view_mut((m_g, 0), (m_i, n)).copy_from(&model.c_imu);
            let mut d = DMatrix::zeros(rows, rows);
            d.view_mut((m_g, m_g), (m_i, m_i)).copy_from(&DMatrix::identity(m_i, m_i));
            let mut sigma_y = DMatrix::zeros(rows, rows);
            sigma_y.view_mut((0, 0), (m_g, m_g)).copy_from(&model.sigma_gps);
            sigma_y.view_mut((m_g, m_g), (m_i, m_i)).copy_from(&model.sigma_imu);
            StackedModel { c, d, sigma_y }
        }
        EstimatorMode::ImuOnly => StackedModel {
            c: model.c_imu.clone(),
            d: DMatrix::identity(m_i, m_i),
            sigma_y: model.sigma_imu.clone(),
        },
    }
}

/// Trace-minimizing gain for the given stacked view:
/// `K = (A P G' + S_w C') (G P G' + C S_w C' + S_y)^{-1}` with `G = C A - D C`.
fn gain_for(model: &SystemModel, p_prev: &DMatrix<f64>, stack: &StackedModel) -> Result<DMatrix<f64>> {
    let rows = stack.c.nrows();
    if rows == 0 {
        return Ok(DMatrix::zeros(model.state_dim(), 0));
    }
    let g = &stack.c * &model.a - &stack.d * &stack.c;
    let innov = &g * p_prev * g.transpose()
        + &stack.c * &model.sigma_process * stack.c.transpose()
        + &stack.sigma_y;
    let rhs = &model.a * p_prev * g.transpose() + &model.sigma_process * stack.c.transpose();
    // K innov = rhs  =>  innov K' = rhs'
    let kt = spd_solve_matrix(&symmetrize(&innov), &rhs.transpose())?;
    Ok(kt.transpose())
}

/// Optimal gain over the full stacked output, `n x (m_g + m_i)`.
/// In `ImuOnly` mode the GPS block is identically zero and the relative-channel
/// block solves the restricted trace minimization.
pub fn gain(model: &SystemModel, p_prev: &DMatrix<f64>, mode: EstimatorMode) -> Result<DMatrix<f64>> {
    let (m_g, m_i, n) = (model.gps_dim(), model.imu_dim(), model.state_dim());
    match mode {
        EstimatorMode::GpsImu => gain_for(model, p_prev, &stacked(model, mode)),
        EstimatorMode::ImuOnly => {
            let k_imu = gain_for(model, p_prev, &stacked(model, mode))?;
            let mut k = DMatrix::zeros(n, m_g + m_i);
            k.view_mut((0, m_g), (n, m_i)).copy_from(&k_imu);
            Ok(k)
        }
    }
}

/// Covariance recursion for a given sub-gain and stacked view (three-term
/// Joseph-like form, valid for any gain).
fn covariance_update(
    model: &SystemModel,
    p_prev: &DMatrix<f64>,
    k_sub: &DMatrix<f64>,
    stack: &StackedModel,
) -> DMatrix<f64> {
    let n = model.state_dim();
    let closed = &model.a - k_sub * (&stack.c * &model.a) + k_sub * (&stack.d * &stack.c);
    let kc = k_sub * &stack.c;
    let i_kc = DMatrix::identity(n, n) - kc;
    let p = &closed * p_prev * closed.transpose()
        + &i_kc * &model.sigma_process * i_kc.transpose()
        + k_sub * &stack.sigma_y * k_sub.transpose();
    symmetrize(&p)
}

/// One measurement update. The relative-channel innovation compares against
/// the predicted state difference `C_imu (A x + B u - x)`; in `ImuOnly` mode
/// the GPS output is ignored entirely.
pub fn update(
    model: &SystemModel,
    est: &EstimatorState,
    u: &DVector<f64>,
    y_gps: &DVector<f64>,
    y_imu: &DVector<f64>,
) -> Result<EstimatorState> {
    let n = model.state_dim();
    if est.x_hat.len() != n
        || u.len() != model.input_dim()
        || y_gps.len() != model.gps_dim()
        || y_imu.len() != model.imu_dim()
    {
        return Err(Error::Config("estimator update dimension mismatch".into()));
    }
    let stack = stacked(model, est.mode);
    let k_sub = gain_for(model, &est.p, &stack)?;

    let predicted = &model.a * &est.x_hat + &model.b * u;
    let mut x_hat = predicted.clone();
    match est.mode {
        EstimatorMode::GpsImu => {
            let m_g = model.gps_dim();
            let m_i = model.imu_dim();
            let k_gps = k_sub.view((0, 0), (n, m_g));
            let k_imu = k_sub.view((0, m_g), (n, m_i));
            x_hat += k_gps * (y_gps - &model.c_gps * &predicted);
            x_hat += k_imu * (y_imu - &model.c_imu * (&predicted - &est.x_hat));
        }
        EstimatorMode::ImuOnly => {
            x_hat += &k_sub * (y_imu - &model.c_imu * (&predicted - &est.x_hat));
        }
    }
    let p = covariance_update(model, &est.p, &k_sub, &stack);
    Ok(EstimatorState { x_hat, p, mode: est.mode })
}

/// Iterate the covariance recursion with the GPS channel dropped for `horizon`
/// steps (deterministic: no measurements are involved). Entry `k` of the
/// returned sequence is the covariance after `k + 1` steps.
pub fn predict_covariance_gps_denied(
    model: &SystemModel,
    p0: &DMatrix<f64>,
    horizon: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let stack = stacked(model, EstimatorMode::ImuOnly);
    let mut p = p0.clone();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        p = if model.imu_dim() == 0 {
            symmetrize(&(&model.a * &p * model.a.transpose() + &model.sigma_process))
        } else {
            let k_imu = gain_for(model, &p, &stack)?;
            covariance_update(model, &p, &k_imu, &stack)
        };
        out.push(p.clone());
    }
    Ok(out)
}

/// Steady-state covariance of the full GPS+IMU recursion, iterated until the
/// trace stabilizes below `tol` (used for scenario initialization and tests).
pub fn steady_state_covariance(model: &SystemModel, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    let n = model.state_dim();
    let stack = stacked(model, EstimatorMode::GpsImu);
    let mut p = DMatrix::identity(n, n);
    let mut last = f64::INFINITY;
    for _ in 0..max_iter {
        let k = gain_for(model, &p, &stack)?;
        p = covariance_update(model, &p, &k, &stack);
        let tr = p.trace();
        if (tr - last).abs() < tol {
            return Ok(p);
        }
        last = tr;
    }
    Err(Error::Numerical("steady-state covariance iteration did not converge".into()))
}
