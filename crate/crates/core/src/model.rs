//! Plant, sensor channels, and spoofing-device model.
//!
//! The plant is linear (`x' = A x + B u + w`) with three output channels:
//! GPS position (additively corruptible by the spoofing signal), a relative
//! measurement of the state difference, and received signal strength. Under
//! spoofing the signal-strength channel follows an inverse-square law in the
//! distance to the spoofing device; otherwise it reads the genuine strength.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{is_symmetric_psd, sym_eig_min};
use crate::{Error, Result, EPS_DIST};

/// Plant and sensor matrices plus noise covariances.
#[derive(Debug, Clone)]
pub struct SystemModel {
    /// State transition, n x n.
    pub a: DMatrix<f64>,
    /// Input matrix, n x m_u.
    pub b: DMatrix<f64>,
    /// GPS output matrix, m_g x n.
    pub c_gps: DMatrix<f64>,
    /// Relative-output matrix, m_i x n (m_i may be zero).
    pub c_imu: DMatrix<f64>,
    /// Signal-strength output coefficients, length m_s.
    pub c_rssi: DVector<f64>,
    /// Process noise covariance, n x n, symmetric PSD.
    pub sigma_process: DMatrix<f64>,
    /// GPS measurement noise covariance, m_g x m_g, symmetric PD.
    pub sigma_gps: DMatrix<f64>,
    /// Relative measurement noise covariance, m_i x m_i, symmetric PD.
    pub sigma_imu: DMatrix<f64>,
    /// Signal-strength noise covariance, m_s x m_s, symmetric PD.
    pub sigma_rssi: DMatrix<f64>,
    /// Genuine GPS signal strength (power units), > 0.
    pub eta_genuine: f64,
    /// Indices of the position components within the state vector.
    pub pos_index: Vec<usize>,
}

impl SystemModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    pub fn gps_dim(&self) -> usize {
        self.c_gps.nrows()
    }
    pub fn imu_dim(&self) -> usize {
        self.c_imu.nrows()
    }
    pub fn rssi_dim(&self) -> usize {
        self.c_rssi.len()
    }

    /// Position sub-vector of a state.
    pub fn position_of(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.pos_index.len(), self.pos_index.iter().map(|&i| x[i]))
    }

    /// Validate dimensional consistency and covariance signs.
    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let checks: [(bool, &str); 7] = [
            (self.a.ncols() == n, "A must be square"),
            (self.b.nrows() == n, "B row count must match state dimension"),
            (self.c_gps.ncols() == n, "C_gps column count must match state dimension"),
            (
                self.c_imu.nrows() == 0 || self.c_imu.ncols() == n,
                "C_imu column count must match state dimension",
            ),
            (
                self.sigma_process.nrows() == n && self.sigma_process.ncols() == n,
                "process covariance must be n x n",
            ),
            (
                self.sigma_gps.nrows() == self.gps_dim() && self.sigma_gps.ncols() == self.gps_dim(),
                "GPS covariance must be m_g x m_g",
            ),
            (
                self.sigma_imu.nrows() == self.imu_dim() && self.sigma_imu.ncols() == self.imu_dim(),
                "relative-measurement covariance must be m_i x m_i",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        if self.sigma_rssi.nrows() != self.rssi_dim() || self.sigma_rssi.ncols() != self.rssi_dim() {
            return Err(Error::Config("signal-strength covariance must be m_s x m_s".into()));
        }
        if !is_symmetric_psd(&self.sigma_process, 1e-9) {
            return Err(Error::Config("process covariance must be symmetric PSD".into()));
        }
        for (name, m) in [
            ("GPS", &self.sigma_gps),
            ("relative", &self.sigma_imu),
            ("signal-strength", &self.sigma_rssi),
        ] {
            if m.nrows() > 0 && (!is_symmetric_psd(m, 1e-9) || sym_eig_min(m) <= 0.0) {
                return Err(Error::Config(format!("{name} covariance must be symmetric PD")));
            }
        }
        if self.eta_genuine <= 0.0 {
            return Err(Error::Config("genuine signal strength must be positive".into()));
        }
        if self.c_rssi.iter().any(|&c| c <= 0.0) {
            return Err(Error::Config("signal-strength coefficients must be positive".into()));
        }
        if self.pos_index.iter().any(|&i| i >= n) {
            return Err(Error::Config("position index out of state range".into()));
        }
        Ok(())
    }
}

/// True plant state with its time index.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueState {
    pub x: DVector<f64>,
    pub k: usize,
}

impl TrueState {
    pub fn new(x: DVector<f64>) -> Self {
        TrueState { x, k: 0 }
    }
}

/// Spoofing device: location (position space), nominal power, injected GPS
/// offset, and effective range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Attacker {
    /// Device position over the position components (meters).
    pub position: Vec<f64>,
    /// Nominal spoofing power, > 0.
    pub eta: f64,
    /// Injected spoofing signal added to the GPS measurement.
    pub spoof: Vec<f64>,
    /// Effective range (meters), > 0.
    pub r_effect: f64,
}

impl Attacker {
    pub fn position_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.position.clone())
    }

    pub fn spoof_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.spoof.clone())
    }

    pub fn validate(&self, model: &SystemModel) -> Result<()> {
        if self.eta <= 0.0 {
            return Err(Error::Config("attacker power must be positive".into()));
        }
        if self.r_effect <= 0.0 {
            return Err(Error::Config("effective range must be positive".into()));
        }
        if self.position.len() != model.pos_index.len() {
            return Err(Error::Config("attacker position dimension must match position components".into()));
        }
        if self.spoof.len() != model.gps_dim() {
            return Err(Error::Config("spoof signal dimension must match GPS output".into()));
        }
        Ok(())
    }
}

/// One step's worth of sensor outputs.
#[derive(Debug, Clone)]
pub struct SensorBundle {
    pub y_gps: DVector<f64>,
    pub y_imu: DVector<f64>,
    pub y_rssi: DVector<f64>,
}

/// Noise realizations for one measurement (drawn externally for determinism).
#[derive(Debug, Clone)]
pub struct SensorNoise {
    pub v_gps: DVector<f64>,
    pub v_imu: DVector<f64>,
    pub v_rssi: DVector<f64>,
}

impl SensorNoise {
    pub fn zeros(model: &SystemModel) -> Self {
        SensorNoise {
            v_gps: DVector::zeros(model.gps_dim()),
            v_imu: DVector::zeros(model.imu_dim()),
            v_rssi: DVector::zeros(model.rssi_dim()),
        }
    }
}

/// Euclidean distance between a device position and the state's position
/// components.
pub fn distance_to(model: &SystemModel, device_pos: &DVector<f64>, x: &DVector<f64>) -> f64 {
    (model.position_of(x) - device_pos).norm()
}

/// Advance the plant one step: `A x + B u + w`.
pub fn step_dynamics(
    model: &SystemModel,
    state: &TrueState,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<TrueState> {
    let n = model.state_dim();
    if state.x.len() != n || u.len() != model.input_dim() || w.len() != n {
        return Err(Error::Config(format!(
            "step_dynamics dimension mismatch: x={}, u={}, w={} for n={}, m_u={}",
            state.x.len(),
            u.len(),
            w.len(),
            n,
            model.input_dim()
        )));
    }
    Ok(TrueState {
        x: &model.a * &state.x + &model.b * u + w,
        k: state.k + 1,
    })
}

/// Produce the three sensor outputs for the transition `x_prev -> x`.
///
/// The GPS channel carries the spoofing signal only while in range; the
/// signal-strength channel follows the inverse-square law in range and reads
/// the genuine strength otherwise.
pub fn measure(
    model: &SystemModel,
    x: &TrueState,
    x_prev: &TrueState,
    attacker: &Attacker,
    in_range: bool,
    noise: &SensorNoise,
) -> Result<SensorBundle> {
    let mut y_gps = &model.c_gps * &x.x + &noise.v_gps;
    if in_range {
        y_gps += attacker.spoof_vector();
    }
    let y_imu = &model.c_imu * (&x.x - &x_prev.x) + &noise.v_imu;
    let y_rssi = if in_range {
        let d = distance_to(model, &attacker.position_vector(), &x.x);
        if d < EPS_DIST {
            return Err(Error::Singularity(format!(
                "distance {d:e} to spoofing device below guard {EPS_DIST:e}"
            )));
        }
        &model.c_rssi * (attacker.eta / (d * d)) + &noise.v_rssi
    } else {
        DVector::from_element(model.rssi_dim(), model.eta_genuine) + &noise.v_rssi
    };
    Ok(SensorBundle { y_gps, y_imu, y_rssi })
}

/// Largest radius at which the spoofed signal power still exceeds the genuine
/// strength: `sqrt(c_s * eta / eta_s)`.
pub fn effective_range(eta: f64, c_s: f64, eta_s: f64) -> Result<f64> {
    if eta <= 0.0 || c_s <= 0.0 || eta_s <= 0.0 {
        return Err(Error::Domain(format!(
            "effective_range needs positive inputs (eta={eta}, c_s={c_s}, eta_s={eta_s})"
        )));
    }
    Ok((c_s * eta / eta_s).sqrt())
}

/// Whether the state lies within the device's effective range
/// (closed boundary: equality counts as in range).
pub fn in_range(model: &SystemModel, x: &TrueState, attacker: &Attacker) -> bool {
    distance_to(model, &attacker.position_vector(), &x.x) <= attacker.r_effect
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::double_integrator;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn attacker() -> Attacker {
        Attacker {
            position: vec![100.0, 100.0],
            eta: 200.0,
            spoof: vec![10.0, 10.0],
            r_effect: 30.0,
        }
    }

    #[test]
    fn step_dynamics_hand_computed() {
        let model = double_integrator();
        let x = TrueState::new(DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0]));
        let next = step_dynamics(
            &model,
            &x,
            &DVector::zeros(2),
            &DVector::zeros(4),
        )
        .unwrap();
        assert_relative_eq!(
            next.x,
            DVector::from_vec(vec![0.1, 0.0, 1.0, 0.0]),
            epsilon = 1e-12
        );
        assert_eq!(next.k, 1);
    }

    #[test]
    fn step_dynamics_zero_fixed_point() {
        let model = double_integrator();
        let x = TrueState::new(DVector::zeros(4));
        let next = step_dynamics(&model, &x, &DVector::zeros(2), &DVector::zeros(4)).unwrap();
        assert_eq!(next.x, DVector::zeros(4));
    }

    #[test]
    fn step_dynamics_dimension_mismatch_is_config_error() {
        let model = double_integrator();
        let x = TrueState::new(DVector::zeros(3));
        let err = step_dynamics(&model, &x, &DVector::zeros(2), &DVector::zeros(4)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn measure_spoofed_signal_strength() {
        let model = double_integrator();
        let att = attacker();
        // place the UAV 30 m from the device
        let x = TrueState::new(DVector::from_vec(vec![100.0, 130.0, 0.0, 0.0]));
        let bundle = measure(&model, &x, &x, &att, true, &SensorNoise::zeros(&model)).unwrap();
        assert_relative_eq!(bundle.y_rssi[0], 200.0 / 900.0, epsilon = 1e-4);
        assert_relative_eq!(bundle.y_rssi[0], 0.2222, epsilon = 1e-3);
    }

    #[test]
    fn measure_genuine_signal_strength() {
        let model = double_integrator();
        let att = attacker();
        let x = TrueState::new(DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0]));
        let bundle = measure(&model, &x, &x, &att, false, &SensorNoise::zeros(&model)).unwrap();
        assert_relative_eq!(bundle.y_rssi[0], model.eta_genuine, epsilon = 1e-15);
    }

    #[test]
    fn measure_adds_spoof_to_gps() {
        let model = double_integrator();
        let att = attacker();
        let x = TrueState::new(DVector::from_vec(vec![100.0, 100.0, 1.0, 1.0]));
        let prev = TrueState::new(DVector::from_vec(vec![99.9, 99.9, 1.0, 1.0]));
        let bundle = measure(&model, &x, &prev, &att, true, &SensorNoise::zeros(&model));
        // distance zero -> singularity guard trips first
        assert!(bundle.is_err());
        let x = TrueState::new(DVector::from_vec(vec![100.0, 110.0, 1.0, 1.0]));
        let bundle = measure(&model, &x, &prev, &att, true, &SensorNoise::zeros(&model)).unwrap();
        assert_relative_eq!(
            bundle.y_gps,
            DVector::from_vec(vec![110.0, 120.0]),
            epsilon = 1e-12
        );
    }

    #[test]
    fn effective_range_closed_form() {
        // eta_s chosen so that g(30) = eta_s exactly
        let r = effective_range(200.0, 1.0, 200.0 / 900.0).unwrap();
        assert_relative_eq!(r, 30.0, epsilon = 1e-9);
        // the printed four-digit value lands within 2e-3 of 30
        let r = effective_range(200.0, 1.0, 0.2222).unwrap();
        assert!((r - 30.0).abs() < 2e-3, "r={r}");
        // boundary case g(1) = c_s * eta
        assert_relative_eq!(effective_range(5.0, 2.0, 10.0).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn effective_range_scaling_law() {
        let r1 = effective_range(200.0, 1.0, 0.5).unwrap();
        let r2 = effective_range(400.0, 1.0, 0.5).unwrap();
        assert_relative_eq!(r2 / r1, 2.0_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn effective_range_rejects_nonpositive() {
        assert!(effective_range(0.0, 1.0, 1.0).is_err());
        assert!(effective_range(1.0, -1.0, 1.0).is_err());
        assert!(effective_range(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn in_range_boundary_is_closed() {
        let model = double_integrator();
        let att = attacker();
        let at = |d: f64| TrueState::new(DVector::from_vec(vec![100.0 + d, 100.0, 0.0, 0.0]));
        assert!(in_range(&model, &at(29.9), &att));
        assert!(!in_range(&model, &at(30.1), &att));
        assert!(in_range(&model, &at(30.0), &att));
    }

    #[test]
    fn effective_range_consistency_with_signal_model() {
        // g(effective_range(eta)) == eta_s to 1e-9 relative
        for (eta, c_s, eta_s) in [(200.0, 1.0, 0.2222), (50.0, 2.5, 1.0), (1e4, 0.3, 12.0)] {
            let r = effective_range(eta, c_s, eta_s).unwrap();
            let g = c_s * eta / (r * r);
            assert_relative_eq!(g, eta_s, max_relative = 1e-9);
        }
    }

    #[test]
    fn signal_strength_monotone_in_distance() {
        let model = double_integrator();
        let att = attacker();
        let noise = SensorNoise::zeros(&model);
        let mut last = f64::INFINITY;
        for i in 1..100 {
            let d = 0.5 * i as f64;
            let x = TrueState::new(DVector::from_vec(vec![100.0 + d, 100.0, 0.0, 0.0]));
            let y = measure(&model, &x, &x, &att, true, &noise).unwrap().y_rssi[0];
            assert!(y < last, "signal strength must strictly decrease with distance");
            last = y;
        }
    }

    #[test]
    fn noise_free_rollout_matches_matrix_power_oracle() {
        let model = double_integrator();
        let x0 = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.25]);
        let u = DVector::from_vec(vec![0.3, -0.1]);
        let mut state = TrueState::new(x0.clone());
        let steps = 25;
        for _ in 0..steps {
            state = step_dynamics(&model, &state, &u, &DVector::zeros(4)).unwrap();
        }
        // oracle: A^k x0 + sum A^j B u
        let mut apow = DMatrix::identity(4, 4);
        let mut drive = DVector::zeros(4);
        for _ in 0..steps {
            drive = &model.a * drive + &model.b * &u;
            apow = &model.a * apow.clone();
        }
        let expect = apow * x0 + drive;
        assert_relative_eq!((state.x - &expect).norm() / expect.norm(), 0.0, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn random_step_matches_dense_multiply_oracle(
            xs in proptest::collection::vec(-100.0f64..100.0, 4),
            us in proptest::collection::vec(-5.0f64..5.0, 2),
            ws in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            let model = double_integrator();
            let x = DVector::from_vec(xs);
            let u = DVector::from_vec(us);
            let w = DVector::from_vec(ws);
            let got = step_dynamics(&model, &TrueState::new(x.clone()), &u, &w).unwrap();
            // element-wise dense oracle
            let mut expect = w.clone();
            for r in 0..4 {
                for c in 0..4 {
                    expect[r] += model.a[(r, c)] * x[c];
                }
                for c in 0..2 {
                    expect[r] += model.b[(r, c)] * u[c];
                }
            }
            prop_assert!((got.x - expect).norm() < 1e-10);
        }
    }
}
