//! Extended Kalman filter fusing wheel odometry, IMU yaw rate and GPS.
//!
//! State is `(x, y, theta, v, omega)` under a constant-velocity unicycle
//! model. All measurement models are linear selections of state
//! components, so only the prediction needs linearization.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::Deserialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::geom::{wrap_angle, Pose2D};
use crate::vehicle::{EncoderReading, VehicleParams};

pub type StateVec = SVector<f64, 5>;
pub type StateCov = SMatrix<f64, 5, 5>;

pub const IX: usize = 0;
pub const IY: usize = 1;
pub const ITHETA: usize = 2;
pub const IV: usize = 3;
pub const IOMEGA: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EkfError {
    #[error("measurement at {stamp} is older than filter state at {state_stamp}")]
    OutOfOrder { stamp: f64, state_stamp: f64 },
    #[error("measurement noise covariance is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("measurement has {got} components, model expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("encoder readings must advance in time (dt = {0})")]
    NonPositiveDt(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub mean: StateVec,
    pub cov: StateCov,
    pub stamp: f64,
}

impl EkfState {
    pub fn new(mean: StateVec, cov: StateCov, stamp: f64) -> Self {
        let mut mean = mean;
        mean[ITHETA] = wrap_angle(mean[ITHETA]);
        Self { mean, cov, stamp }
    }

    pub fn pose(&self) -> Pose2D {
        Pose2D::new(self.mean[IX], self.mean[IY], self.mean[ITHETA])
    }

    /// Covariance of `(x, y, theta)`.
    pub fn pose_cov(&self) -> SMatrix<f64, 3, 3> {
        self.cov.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite()) && self.cov.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementKind {
    /// `(v, omega)` from encoder differencing.
    Odom,
    /// `omega`, optionally followed by integrated `yaw`.
    Imu,
    /// `(x, y)` in the map frame.
    Gps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub kind: MeasurementKind,
    pub z: DVector<f64>,
    pub r: DMatrix<f64>,
    pub stamp: f64,
}

impl Measurement {
    pub fn odom(v: f64, omega: f64, sigma_v: f64, sigma_omega: f64, stamp: f64) -> Self {
        Self {
            kind: MeasurementKind::Odom,
            z: DVector::from_vec(vec![v, omega]),
            r: DMatrix::from_diagonal(&DVector::from_vec(vec![sigma_v.powi(2), sigma_omega.powi(2)])),
            stamp,
        }
    }

    pub fn imu_rate(omega: f64, sigma: f64, stamp: f64) -> Self {
        Self {
            kind: MeasurementKind::Imu,
            z: DVector::from_vec(vec![omega]),
            r: DMatrix::from_element(1, 1, sigma.powi(2)),
            stamp,
        }
    }

    pub fn imu_rate_and_yaw(omega: f64, yaw: f64, sigma_rate: f64, sigma_yaw: f64, stamp: f64) -> Self {
        Self {
            kind: MeasurementKind::Imu,
            z: DVector::from_vec(vec![omega, yaw]),
            r: DMatrix::from_diagonal(&DVector::from_vec(vec![sigma_rate.powi(2), sigma_yaw.powi(2)])),
            stamp,
        }
    }

    pub fn gps(x: f64, y: f64, sigma: f64, stamp: f64) -> Self {
        Self {
            kind: MeasurementKind::Gps,
            z: DVector::from_vec(vec![x, y]),
            r: DMatrix::from_diagonal_element(2, 2, sigma.powi(2)),
            stamp,
        }
    }

    /// State indices observed by each measurement component.
    pub fn observed(&self) -> &'static [usize] {
        match (self.kind, self.z.len()) {
            (MeasurementKind::Odom, _) => &[IV, IOMEGA],
            (MeasurementKind::Imu, 1) => &[IOMEGA],
            (MeasurementKind::Imu, _) => &[IOMEGA, ITHETA],
            (MeasurementKind::Gps, _) => &[IX, IY],
        }
    }

    fn expected_len(&self) -> Option<usize> {
        match self.kind {
            MeasurementKind::Odom | MeasurementKind::Gps => Some(2),
            MeasurementKind::Imu => None,
        }
    }
}

/// Unicycle motion model.
pub fn motion_model(x: &StateVec, dt: f64) -> StateVec {
    let (s, c) = x[ITHETA].sin_cos();
    let v = x[IV];
    let w = x[IOMEGA];
    StateVec::from([x[IX] + v * c * dt, x[IY] + v * s * dt, x[ITHETA] + w * dt, v, w])
}

/// Analytic Jacobian of [`motion_model`] with respect to the state.
pub fn motion_jacobian(x: &StateVec, dt: f64) -> StateCov {
    let (s, c) = x[ITHETA].sin_cos();
    let v = x[IV];
    let mut f = StateCov::identity();
    f[(IX, ITHETA)] = -v * s * dt;
    f[(IX, IV)] = c * dt;
    f[(IY, ITHETA)] = v * c * dt;
    f[(IY, IV)] = s * dt;
    f[(ITHETA, IOMEGA)] = dt;
    f
}

fn symmetrize<const N: usize>(m: &SMatrix<f64, N, N>) -> SMatrix<f64, N, N> {
    (m + m.transpose()) * 0.5
}

/// Propagates the state by `dt`; `q` is the process-noise density, so the
/// added covariance is `q·dt`. `dt = 0` returns the input unchanged.
pub fn ekf_predict(s: &EkfState, dt: f64, q: &StateCov) -> EkfState {
    debug_assert!(dt >= 0.0);
    if dt == 0.0 {
        return s.clone();
    }
    let f = motion_jacobian(&s.mean, dt);
    let mut mean = motion_model(&s.mean, dt);
    mean[ITHETA] = wrap_angle(mean[ITHETA]);
    let cov = symmetrize(&(f * s.cov * f.transpose() + q * dt));
    EkfState {
        mean,
        cov,
        stamp: s.stamp + dt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateOutcome {
    Accepted { mahalanobis2: f64 },
    Gated { mahalanobis2: f64 },
}

impl UpdateOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, UpdateOutcome::Accepted { .. })
    }
}

/// chi-square quantile used as the default innovation gate.
pub fn chi2_gate(dof: usize, prob: f64) -> f64 {
    ChiSquared::new(dof as f64).expect("dof is positive").inverse_cdf(prob)
}

/// Kalman update with a selection-matrix measurement model, Mahalanobis
/// gating and a Joseph-form covariance update.
pub fn ekf_update(s: &EkfState, m: &Measurement, gate_chi2: f64) -> Result<(EkfState, UpdateOutcome), EkfError> {
    if m.stamp < s.stamp {
        return Err(EkfError::OutOfOrder {
            stamp: m.stamp,
            state_stamp: s.stamp,
        });
    }
    let idx = m.observed();
    let k = m.z.len();
    if let Some(expected) = m.expected_len() {
        if k != expected {
            return Err(EkfError::DimensionMismatch { got: k, expected });
        }
    } else if k == 0 || k > 2 {
        return Err(EkfError::DimensionMismatch { got: k, expected: 1 });
    }
    if m.r.nrows() != k || m.r.ncols() != k {
        return Err(EkfError::DimensionMismatch {
            got: m.r.nrows(),
            expected: k,
        });
    }
    if (&m.r - m.r.transpose()).abs().max() > 1e-12 * (1.0 + m.r.abs().max()) || m.r.clone().cholesky().is_none() {
        return Err(EkfError::NotPositiveDefinite);
    }

    let mut h = DMatrix::<f64>::zeros(k, 5);
    for (row, &col) in idx.iter().enumerate() {
        h[(row, col)] = 1.0;
    }
    let mut innovation = DVector::<f64>::zeros(k);
    for (row, &col) in idx.iter().enumerate() {
        let d = m.z[row] - s.mean[col];
        innovation[row] = if col == ITHETA { wrap_angle(d) } else { d };
    }
    let p = DMatrix::from_column_slice(5, 5, s.cov.as_slice());
    let pht = &p * h.transpose();
    let sm = &h * &pht + &m.r;
    let Some(chol) = sm.clone().cholesky() else {
        return Err(EkfError::NotPositiveDefinite);
    };
    let sinv_y = chol.solve(&innovation);
    let d2 = innovation.dot(&sinv_y);
    if d2 > gate_chi2 {
        let mut same = s.clone();
        same.stamp = m.stamp;
        return Ok((same, UpdateOutcome::Gated { mahalanobis2: d2 }));
    }
    // K = P Hᵀ S⁻¹
    let gain = chol.solve(&pht.transpose()).transpose();
    let dx = &gain * &innovation;
    let mut mean = s.mean;
    for i in 0..5 {
        mean[i] += dx[i];
    }
    mean[ITHETA] = wrap_angle(mean[ITHETA]);
    let i_kh = DMatrix::<f64>::identity(5, 5) - &gain * &h;
    let joseph = &i_kh * &p * i_kh.transpose() + &gain * &m.r * gain.transpose();
    let cov = symmetrize(&StateCov::from_column_slice(joseph.as_slice()));
    Ok((
        EkfState {
            mean,
            cov,
            stamp: m.stamp,
        },
        UpdateOutcome::Accepted { mahalanobis2: d2 },
    ))
}

/// Turns two consecutive encoder readings into a velocity measurement.
/// Steering angle comes from the absolute steering encoder of `curr`.
pub fn odometry_from_encoders(
    prev: &EncoderReading,
    curr: &EncoderReading,
    p: &VehicleParams,
    sigma_v: f64,
    sigma_omega: f64,
) -> Result<Measurement, EkfError> {
    let dt = curr.stamp - prev.stamp;
    if !(dt > 0.0) {
        return Err(EkfError::NonPositiveDt(dt));
    }
    let tpr = p.ticks_per_rev as f64;
    let revs = (curr.drive_ticks - prev.drive_ticks) as f64 / tpr;
    let v = revs * std::f64::consts::TAU * p.wheel_radius / dt;
    let steer = curr.steer_ticks as f64 / tpr * std::f64::consts::TAU;
    let omega = v * steer.tan() / p.wheelbase;
    Ok(Measurement::odom(v, omega, sigma_v, sigma_omega, curr.stamp))
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkfConfig {
    /// Diagonal process-noise density for `(x, y, theta, v, omega)`.
    pub process_noise: [f64; 5],
    pub odom_sigma_v: f64,
    pub odom_sigma_omega: f64,
    pub imu_sigma_rate: f64,
    pub use_imu_yaw: bool,
    pub imu_sigma_yaw: f64,
    /// Probability for the chi-square innovation gate.
    pub gate_prob: f64,
    pub initial_sigma: [f64; 5],
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            process_noise: [1e-6, 1e-6, 1e-6, 0.1, 0.1],
            odom_sigma_v: 0.02,
            odom_sigma_omega: 0.02,
            imu_sigma_rate: 0.005,
            use_imu_yaw: false,
            imu_sigma_yaw: 0.05,
            gate_prob: 0.99,
            initial_sigma: [0.05, 0.05, 0.02, 0.05, 0.05],
        }
    }
}

impl EkfConfig {
    pub fn q(&self) -> StateCov {
        StateCov::from_diagonal(&StateVec::from(self.process_noise))
    }
}

/// Filter driver: predicts to each measurement's stamp, then updates.
#[derive(Debug, Clone)]
pub struct Ekf {
    state: EkfState,
    config: EkfConfig,
    q: StateCov,
}

impl Ekf {
    pub fn new(initial: Pose2D, stamp: f64, config: EkfConfig) -> Self {
        let mean = StateVec::from([initial.x, initial.y, initial.theta, 0.0, 0.0]);
        let sig = StateVec::from(config.initial_sigma);
        let cov = StateCov::from_diagonal(&sig.component_mul(&sig));
        Self {
            state: EkfState::new(mean, cov, stamp),
            q: config.q(),
            config,
        }
    }

    pub fn state(&self) -> &EkfState {
        &self.state
    }

    pub fn config(&self) -> &EkfConfig {
        &self.config
    }

    pub fn predict_to(&mut self, stamp: f64) -> Result<(), EkfError> {
        let dt = stamp - self.state.stamp;
        if dt < 0.0 {
            return Err(EkfError::OutOfOrder {
                stamp,
                state_stamp: self.state.stamp,
            });
        }
        self.state = ekf_predict(&self.state, dt, &self.q);
        Ok(())
    }

    pub fn fuse(&mut self, m: &Measurement) -> Result<UpdateOutcome, EkfError> {
        self.predict_to(m.stamp)?;
        let gate = chi2_gate(m.z.len(), self.config.gate_prob);
        let (next, outcome) = ekf_update(&self.state, m, gate)?;
        self.state = next;
        Ok(outcome)
    }
}

/// Normalized estimation error squared of the `(x, y, theta)` block.
pub fn pose_nees(s: &EkfState, truth: &Pose2D) -> f64 {
    let e = nalgebra::Vector3::new(
        truth.x - s.mean[IX],
        truth.y - s.mean[IY],
        wrap_angle(truth.theta - s.mean[ITHETA]),
    );
    match s.pose_cov().cholesky() {
        Some(c) => e.dot(&c.solve(&e)),
        None => f64::INFINITY,
    }
}

/// Header of the estimate log: stamp, mean, then the upper triangle of the
/// covariance row by row.
pub fn estimate_log_header() -> String {
    let mut cols = vec!["stamp", "x", "y", "theta", "v", "omega"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    for i in 0..5 {
        for j in i..5 {
            cols.push(format!("P{i}{j}"));
        }
    }
    cols.join(",")
}

pub fn estimate_log_row(s: &EkfState) -> String {
    let mut out = format!("{}", s.stamp);
    for v in s.mean.iter() {
        out.push(',');
        out.push_str(&v.to_string());
    }
    for i in 0..5 {
        for j in i..5 {
            out.push(',');
            out.push_str(&s.cov[(i, j)].to_string());
        }
    }
    out
}
