//! Shared unit-test fixtures.

use nalgebra::{DMatrix, DVector};

use crate::model::SystemModel;

/// Planar double-integrator instantiation (0.1 s sampling) used across the
/// unit-test suite.
pub fn double_integrator() -> SystemModel {
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, 0.1, 0.0, //
            0.0, 1.0, 0.0, 0.1, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ],
    );
    let b = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.1]);
    let c_gps = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let c_imu = DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    SystemModel {
        a,
        b,
        c_gps,
        c_imu,
        c_rssi: DVector::from_vec(vec![1.0]),
        sigma_process: DMatrix::identity(4, 4) * 0.1,
        sigma_gps: DMatrix::identity(2, 2),
        sigma_imu: DMatrix::identity(2, 2) * 0.01,
        sigma_rssi: DMatrix::identity(1, 1),
        eta_genuine: 200.0 / 900.0,
        pos_index: vec![0, 1],
    }
}

/// Scalar model with GPS only (no relative channel): n = m_g = 1.
pub fn scalar_gps_only(a: f64, sigma_w: f64, sigma_g: f64) -> SystemModel {
    SystemModel {
        a: DMatrix::from_element(1, 1, a),
        b: DMatrix::from_element(1, 1, 0.0),
        c_gps: DMatrix::from_element(1, 1, 1.0),
        c_imu: DMatrix::zeros(0, 1),
        c_rssi: DVector::from_vec(vec![1.0]),
        sigma_process: DMatrix::from_element(1, 1, sigma_w),
        sigma_gps: DMatrix::from_element(1, 1, sigma_g),
        sigma_imu: DMatrix::zeros(0, 0),
        sigma_rssi: DMatrix::identity(1, 1),
        eta_genuine: 1.0,
        pos_index: vec![0],
    }
}
