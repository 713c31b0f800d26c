//! Seeded noise generation with per-channel substreams.
//!
//! Each noise channel (process, GPS, IMU, signal strength) draws from its own
//! ChaCha12 stream derived from the scenario seed, so changing how one channel
//! is consumed never shifts the draws of the others. Replays with the same
//! seed are bit-identical.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::linalg::cholesky_with_jitter;
use crate::Result;

/// Independent noise channels of a scenario run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseChannel {
    Process = 0,
    Gps = 1,
    Imu = 2,
    SignalStrength = 3,
}

/// Per-scenario random source: one counter-based stream per channel.
pub struct ScenarioRng {
    streams: [ChaCha12Rng; 4],
}

impl ScenarioRng {
    pub fn new(seed: u64) -> Self {
        let make = |channel: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(channel);
            rng
        };
        ScenarioRng {
            streams: [make(0), make(1), make(2), make(3)],
        }
    }

    fn stream(&mut self, channel: NoiseChannel) -> &mut ChaCha12Rng {
        &mut self.streams[channel as usize]
    }

    /// Standard-normal vector from the given channel.
    pub fn standard_normal(&mut self, channel: NoiseChannel, dim: usize) -> DVector<f64> {
        let rng = self.stream(channel);
        DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)))
    }

    /// Zero-mean Gaussian vector with the given covariance (sampled as L z,
    /// L the jittered Cholesky factor).
    pub fn gaussian(&mut self, channel: NoiseChannel, cov: &DMatrix<f64>) -> Result<DVector<f64>> {
        let dim = cov.nrows();
        if dim == 0 {
            return Ok(DVector::zeros(0));
        }
        let l = cholesky_with_jitter(cov, 1e-9)?.l();
        let z = self.standard_normal(channel, dim);
        Ok(l * z)
    }

    /// Uniform u64 from a channel (used for derived sub-seeds in batch runs).
    pub fn next_u64(&mut self, channel: NoiseChannel) -> u64 {
        self.stream(channel).gen()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let mut a = ScenarioRng::new(42);
        let mut b = ScenarioRng::new(42);
        for _ in 0..10 {
            assert_eq!(
                a.standard_normal(NoiseChannel::Gps, 4),
                b.standard_normal(NoiseChannel::Gps, 4)
            );
        }
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = ScenarioRng::new(1);
        let mut b = ScenarioRng::new(2);
        assert_ne!(
            a.standard_normal(NoiseChannel::Process, 8),
            b.standard_normal(NoiseChannel::Process, 8)
        );
    }

    #[test]
    fn channels_are_independent_substreams() {
        // Draw from one channel, then check another channel's sequence is
        // unchanged relative to a fresh instance that never touched the first.
        let mut a = ScenarioRng::new(7);
        let _ = a.standard_normal(NoiseChannel::Process, 100);
        let from_a = a.standard_normal(NoiseChannel::Imu, 4);

        let mut b = ScenarioRng::new(7);
        let from_b = b.standard_normal(NoiseChannel::Imu, 4);
        assert_eq!(from_a, from_b);
    }

    #[test]
    fn gaussian_covariance_scales() {
        let mut rng = ScenarioRng::new(3);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let mut sum: DVector<f64> = DVector::zeros(2);
        let mut sumsq: DVector<f64> = DVector::zeros(2);
        let n = 20000;
        for _ in 0..n {
            let v = rng.gaussian(NoiseChannel::Gps, &cov).unwrap();
            sumsq[0] += v[0] * v[0];
            sumsq[1] += v[1] * v[1];
            sum += v;
        }
        let var0 = sumsq[0] / n as f64;
        let var1 = sumsq[1] / n as f64;
        assert!((var0 - 4.0).abs() < 0.3, "var0={var0}");
        assert!((var1 - 9.0).abs() < 0.6, "var1={var1}");
    }
}
