//! Unimodal single-track forecasters: constant velocity and a
//! constant-velocity Kalman filter.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::dataset::DEFAULT_DT;
use crate::error::{Error, Result};
use crate::geometry::Vec2;

/// Repeats the last observed step `pred_len` times.
pub fn cv_forecast(observed: &[Vec2], pred_len: usize) -> Result<Vec<Vec2>> {
    cv_forecast_with_offset(observed, pred_len, Vec2::ZERO)
}

/// Like [`cv_forecast`], with `step_offset` (meters per step) added to the
/// extrapolated step.
pub fn cv_forecast_with_offset(
    observed: &[Vec2],
    pred_len: usize,
    step_offset: Vec2,
) -> Result<Vec<Vec2>> {
    let n = observed.len();
    if n < 2 {
        return Err(Error::InsufficientObservations { needed: 2, got: n });
    }
    let last = observed[n - 1];
    let step = last - observed[n - 2] + step_offset;
    Ok((1..=pred_len).map(|k| last + step * k as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanConfig {
    /// Spectral density of the white-noise acceleration.
    pub process_noise: f64,
    /// Position measurement variance (m^2).
    pub measurement_noise: f64,
    pub dt: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig {
            process_noise: 0.005,
            measurement_noise: 0.01,
            dt: DEFAULT_DT,
        }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.process_noise > 0.0 && self.measurement_noise > 0.0 && self.dt > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("Kalman parameters must be positive: {self:?}")))
        }
    }
}

/// Constant-velocity filter over the state `[x, y, vx, vy]`.
#[derive(Clone, Debug)]
pub struct KalmanFilter {
    pub state: Vector4<f64>,
    pub covariance: Matrix4<f64>,
    transition: Matrix4<f64>,
    process: Matrix4<f64>,
    measurement: Matrix2<f64>,
}

impl KalmanFilter {
    pub fn new(config: &KalmanConfig, position: Vec2, velocity: Vec2) -> Self {
        let dt = config.dt;
        let q = config.process_noise;
        #[rustfmt::skip]
        let transition = Matrix4::new(
            1.0, 0.0, dt, 0.0,
            0.0, 1.0, 0.0, dt,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        let (a, b, c) = (dt.powi(3) / 3.0 * q, dt.powi(2) / 2.0 * q, dt * q);
        #[rustfmt::skip]
        let process = Matrix4::new(
            a, 0.0, b, 0.0,
            0.0, a, 0.0, b,
            b, 0.0, c, 0.0,
            0.0, b, 0.0, c,
        );
        KalmanFilter {
            state: Vector4::new(position.x, position.y, velocity.x, velocity.y),
            covariance: Matrix4::identity(),
            transition,
            process,
            measurement: Matrix2::identity() * config.measurement_noise,
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.state[0], self.state[1])
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::new(self.state[2], self.state[3])
    }

    pub fn predict(&mut self) {
        self.state = self.transition * self.state;
        let p = self.transition * self.covariance * self.transition.transpose() + self.process;
        self.covariance = (p + p.transpose()) * 0.5;
    }

    /// Joseph-form measurement update with a position observation.
    pub fn update(&mut self, z: Vec2) {
        let h = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        let innovation = Vector2::new(z.x, z.y) - h * self.state;
        let s = h * self.covariance * h.transpose() + self.measurement;
        let s_inv = s
            .try_inverse()
            .expect("innovation covariance is positive definite");
        let gain = self.covariance * h.transpose() * s_inv;
        self.state += gain * innovation;
        let i_kh = Matrix4::identity() - gain * h;
        let p = i_kh * self.covariance * i_kh.transpose()
            + gain * self.measurement * gain.transpose();
        self.covariance = (p + p.transpose()) * 0.5;
    }
}

/// Filters the observation, returning the filter positioned at the last
/// observed step.
pub fn kalman_filter(observed: &[Vec2], config: &KalmanConfig) -> Result<KalmanFilter> {
    config.validate()?;
    let first = *observed
        .first()
        .ok_or(Error::InsufficientObservations { needed: 1, got: 0 })?;
    let velocity = match observed.get(1) {
        Some(&second) => (second - first) / config.dt,
        None => Vec2::ZERO,
    };
    let mut kf = KalmanFilter::new(config, first, velocity);
    for &z in &observed[1..] {
        kf.predict();
        kf.update(z);
    }
    Ok(kf)
}

/// Runs the filter over the observation and rolls the motion model forward
/// `pred_len` steps without updates.
pub fn kalman_forecast(observed: &[Vec2], config: &KalmanConfig, pred_len: usize) -> Result<Vec<Vec2>> {
    kalman_forecast_with_offset(observed, config, pred_len, Vec2::ZERO)
}

/// Like [`kalman_forecast`], with `velocity_offset` (m/s) added to the
/// filtered velocity before the rollout.
pub fn kalman_forecast_with_offset(
    observed: &[Vec2],
    config: &KalmanConfig,
    pred_len: usize,
    velocity_offset: Vec2,
) -> Result<Vec<Vec2>> {
    let mut kf = kalman_filter(observed, config)?;
    kf.state[2] += velocity_offset.x;
    kf.state[3] += velocity_offset.y;
    Ok((0..pred_len)
        .map(|_| {
            kf.predict();
            kf.position()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn line(n: usize, start: Vec2, step: Vec2) -> Vec<Vec2> {
        (0..n).map(|k| start + step * k as f64).collect()
    }

    #[test]
    fn cv_continues_line() {
        let track = line(21, Vec2::new(1.0, 2.0), Vec2::new(0.4, 0.0));
        let pred = cv_forecast(&track[..9], 12).unwrap();
        for (p, g) in pred.iter().zip(&track[9..]) {
            assert!((*p - *g).norm() < 1e-12);
        }
    }

    #[test]
    fn cv_edge_cases() {
        let still = [Vec2::new(1.0, 1.0), Vec2::new(2.0, 2.0), Vec2::new(2.0, 2.0)];
        assert!(cv_forecast(&still, 5).unwrap().iter().all(|p| *p == Vec2::new(2.0, 2.0)));
        let bend = [Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(1.0, 1.0)];
        let pred = cv_forecast(&bend, 3).unwrap();
        assert_eq!(pred, vec![Vec2::new(1.0, 2.0), Vec2::new(1.0, 3.0), Vec2::new(1.0, 4.0)]);
        assert!(matches!(
            cv_forecast(&bend[..1], 3),
            Err(Error::InsufficientObservations { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn kalman_exact_on_noise_free_line() {
        let cfg = KalmanConfig::default();
        let track = line(21, Vec2::new(-3.0, 1.0), Vec2::new(0.4, 0.2));
        let pred = kalman_forecast(&track[..9], &cfg, 12).unwrap();
        assert_eq!(pred.len(), 12);
        assert!((pred[11] - track[20]).norm() < 1e-6);
        let cv = cv_forecast(&track[..9], 12).unwrap();
        for (a, b) in pred.iter().zip(&cv) {
            assert!((*a - *b).norm() < 1e-6);
        }
    }

    #[test]
    fn kalman_single_point_stays_put() {
        let p = Vec2::new(2.0, -1.0);
        let pred = kalman_forecast(&[p], &KalmanConfig::default(), 12).unwrap();
        assert!(pred.iter().all(|q| *q == p));
    }

    #[test]
    fn covariance_stays_positive_definite() {
        let cfg = KalmanConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut kf = KalmanFilter::new(&cfg, Vec2::ZERO, Vec2::new(1.0, 0.0));
        for k in 0..200 {
            kf.predict();
            let z = Vec2::new(k as f64 * 0.4 + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
            kf.update(z);
            let p = kf.covariance;
            assert!((p - p.transpose()).abs().max() < 1e-12);
            let eig = SymmetricEigen::new(p);
            assert!(eig.eigenvalues.min() > 0.0, "step {k}: {}", eig.eigenvalues);
        }
    }

    // Monte-Carlo check that the default filter is conservative enough to keep
    // genuinely linear walkers below the 0.5 m linearity threshold.
    #[test]
    fn noisy_line_mostly_under_half_meter() {
        let cfg = KalmanConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let trials = 1000;
        let mut passed = 0;
        for _ in 0..trials {
            let heading = rng.random_range(0.0..std::f64::consts::TAU);
            let step = Vec2::new(0.4, 0.0).rotate(heading);
            let truth = line(21, Vec2::ZERO, step);
            let observed: Vec<Vec2> = truth[..9]
                .iter()
                .map(|p| *p + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng)))
                .collect();
            let pred = kalman_forecast(&observed, &cfg, 12).unwrap();
            if (pred[11] - truth[20]).norm() < 0.5 {
                passed += 1;
            }
        }
        assert!(passed as f64 >= 0.99 * trials as f64, "{passed}/{trials}");
    }
}
