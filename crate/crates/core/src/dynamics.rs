//! Newton–Euler rigid-body model of an X-configuration quadrotor.
//!
//! The state is integrated in Euler-angle coordinates: attitude rates come
//! from `η̇ = W⁻¹ ω`, body rates from Euler's rotation equation. Inertial
//! z points up and gravity acts along `-z`.

use nalgebra::{Matrix3, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Distance from `|θ| = π/2` at which the Euler-rate map is declared singular.
pub const SINGULARITY_MARGIN: f64 = 1e-6;

/// Upper bound accepted for a single integration step.
pub const MAX_TIME_STEP: f64 = 0.01;

pub type StateVector = SVector<f64, 12>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("singular attitude: pitch {theta} rad is within {SINGULARITY_MARGIN} of ±π/2")]
    SingularAttitude { theta: f64 },
    #[error("state became non-finite during integration")]
    NonFiniteState,
    #[error("time step {0} outside (0, {MAX_TIME_STEP}]")]
    InvalidTimeStep(f64),
    #[error("invalid quadrotor parameter: {0}")]
    InvalidParams(String),
}

/// Measured airframe quantities that no equation of motion consumes.
/// Kept so that a parameter file can carry the full vehicle description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AirframeMetadata {
    pub prop_mass: f64,
    pub motor_mass: f64,
    pub center_mass: f64,
    pub center_radius: f64,
    pub center_height: f64,
    pub motor_radius: f64,
    pub motor_height: f64,
    pub prop_radius: f64,
    pub max_motor_torque: f64,
    pub motor_constant: f64,
    pub drag_constant: f64,
}

impl Default for AirframeMetadata {
    fn default() -> Self {
        Self {
            prop_mass: 0.01,
            motor_mass: 0.045,
            center_mass: 0.98,
            center_radius: 0.0625,
            center_height: 0.13,
            motor_radius: 0.015,
            motor_height: 0.45,
            prop_radius: 0.125,
            max_motor_torque: 0.1056,
            motor_constant: 1.4422e-3,
            drag_constant: 3.1427e-7,
        }
    }
}

/// Physical constants of the vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadrotorParams {
    /// Total mass [kg].
    pub mass: f64,
    /// Gravitational acceleration [m/s²].
    pub gravity: f64,
    /// Arm length [m].
    pub arm_length: f64,
    /// Inertia tensor in the body frame [kg·m²], row-major.
    pub inertia: [[f64; 3]; 3],
    /// Per-motor maximum thrust [N].
    pub max_thrust: f64,
    /// Ratio c_D / c_L of the yaw-moment coefficient to the thrust coefficient.
    pub drag_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<AirframeMetadata>,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 1.2,
            gravity: 9.81,
            arm_length: 0.225,
            inertia: [[0.0131, 0.0, 0.0], [0.0, 0.0131, 0.0], [0.0, 0.0, 0.0234]],
            max_thrust: 8.43,
            drag_ratio: 0.0237,
            metadata: Some(AirframeMetadata::default()),
        }
    }
}

impl QuadrotorParams {
    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        let i = &self.inertia;
        Matrix3::new(i[0][0], i[0][1], i[0][2], i[1][0], i[1][1], i[1][2], i[2][0], i[2][1], i[2][2])
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |what: &str| Err(DynamicsError::InvalidParams(what.to_string()));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.mass) {
            return bad("mass must be positive");
        }
        if !(self.gravity.is_finite() && self.gravity >= 0.0) {
            return bad("gravity must be non-negative");
        }
        if !positive(self.arm_length) {
            return bad("arm_length must be positive");
        }
        if !positive(self.max_thrust) {
            return bad("max_thrust must be positive");
        }
        if !positive(self.drag_ratio) {
            return bad("drag_ratio must be positive");
        }
        let inertia = self.inertia_matrix();
        if inertia.iter().any(|x| !x.is_finite()) {
            return bad("inertia must be finite");
        }
        if (inertia - inertia.transpose()).abs().max() > 1e-12 * inertia.abs().max() {
            return bad("inertia must be symmetric");
        }
        if inertia.cholesky().is_none() || (0..3).any(|k| inertia[(k, k)] <= 0.0) {
            return bad("inertia must be positive definite");
        }
        Ok(())
    }
}

/// Position, velocity, Euler angles and body rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidBodyState {
    /// Inertial position (x, y, z) [m], z up.
    pub position: Vector3<f64>,
    /// Inertial velocity [m/s].
    pub velocity: Vector3<f64>,
    /// Roll, pitch, yaw [rad].
    pub attitude: Vector3<f64>,
    /// Body angular rates (p, q, r) [rad/s].
    pub body_rates: Vector3<f64>,
}

impl Default for RigidBodyState {
    fn default() -> Self {
        Self::at_rest(Vector3::zeros())
    }
}

impl RigidBodyState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self { position, velocity: Vector3::zeros(), attitude: Vector3::zeros(), body_rates: Vector3::zeros() }
    }

    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<3>(3).copy_from(&self.velocity);
        x.fixed_rows_mut::<3>(6).copy_from(&self.attitude);
        x.fixed_rows_mut::<3>(9).copy_from(&self.body_rates);
        x
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            position: x.fixed_rows::<3>(0).into_owned(),
            velocity: x.fixed_rows::<3>(3).into_owned(),
            attitude: x.fixed_rows::<3>(6).into_owned(),
            body_rates: x.fixed_rows::<3>(9).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }

    /// Euler-angle rates implied by the current body rates.
    pub fn euler_rates(&self) -> Result<Vector3<f64>, DynamicsError> {
        Ok(euler_rate_map_inv(&self.attitude)? * self.body_rates)
    }
}

/// Collective thrust along body +z and body-frame moment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyWrench {
    pub thrust: f64,
    pub moment: Vector3<f64>,
}

impl BodyWrench {
    pub fn new(thrust: f64, moment: Vector3<f64>) -> Self {
        Self { thrust, moment }
    }

    pub fn hover(params: &QuadrotorParams) -> Self {
        Self::new(params.hover_thrust(), Vector3::zeros())
    }
}

/// Cross-product matrix: `skew(a) * b == a × b`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Body-to-inertial rotation for Z-Y-X Euler angles (φ, θ, ψ).
pub fn rotation_matrix(eta: &Vector3<f64>) -> Matrix3<f64> {
    let (sf, cf) = eta.x.sin_cos();
    let (st, ct) = eta.y.sin_cos();
    let (sp, cp) = eta.z.sin_cos();
    Matrix3::new(
        ct * cp,
        sf * st * cp - cf * sp,
        cf * st * cp + sf * sp,
        ct * sp,
        sf * st * sp + cf * cp,
        cf * st * sp - sf * cp,
        -st,
        sf * ct,
        cf * ct,
    )
}

fn check_pitch(eta: &Vector3<f64>) -> Result<(), DynamicsError> {
    let theta = eta.y;
    if !theta.is_finite() || theta.abs() >= std::f64::consts::FRAC_PI_2 - SINGULARITY_MARGIN {
        return Err(DynamicsError::SingularAttitude { theta });
    }
    Ok(())
}

/// `W(η)`, mapping Euler rates to body rates: `ω = W η̇`.
pub fn euler_rate_map(eta: &Vector3<f64>) -> Result<Matrix3<f64>, DynamicsError> {
    check_pitch(eta)?;
    let (sf, cf) = eta.x.sin_cos();
    let (st, ct) = eta.y.sin_cos();
    Ok(Matrix3::new(
        1.0,
        0.0,
        -st, //
        0.0,
        cf,
        sf * ct, //
        0.0,
        -sf,
        cf * ct,
    ))
}

/// `W⁻¹(η)`, mapping body rates to Euler rates: `η̇ = W⁻¹ ω`.
pub fn euler_rate_map_inv(eta: &Vector3<f64>) -> Result<Matrix3<f64>, DynamicsError> {
    check_pitch(eta)?;
    let (sf, cf) = eta.x.sin_cos();
    let (st, ct) = eta.y.sin_cos();
    let tt = st / ct;
    Ok(Matrix3::new(1.0, sf * tt, cf * tt, 0.0, cf, -sf, 0.0, sf / ct, cf / ct))
}

/// Time derivative of the 12-state vector under a constant wrench.
pub fn state_derivative(
    s: &RigidBodyState,
    u: &BodyWrench,
    params: &QuadrotorParams,
) -> Result<StateVector, DynamicsError> {
    let w_inv = euler_rate_map_inv(&s.attitude)?;
    let inertia = params.inertia_matrix();
    let inertia_inv =
        inertia.try_inverse().ok_or_else(|| DynamicsError::InvalidParams("inertia is not invertible".into()))?;

    let r = rotation_matrix(&s.attitude);
    let accel = Vector3::new(0.0, 0.0, -params.gravity) + r.column(2) * (u.thrust / params.mass);
    let eta_dot = w_inv * s.body_rates;
    let omega = s.body_rates;
    let omega_dot = inertia_inv * (-omega.cross(&(inertia * omega)) + u.moment);

    let mut dx = StateVector::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&s.velocity);
    dx.fixed_rows_mut::<3>(3).copy_from(&accel);
    dx.fixed_rows_mut::<3>(6).copy_from(&eta_dot);
    dx.fixed_rows_mut::<3>(9).copy_from(&omega_dot);
    Ok(dx)
}

/// One classical Runge–Kutta step with the wrench held over `dt`.
pub fn step_rk4(
    s: &RigidBodyState,
    u: &BodyWrench,
    dt: f64,
    params: &QuadrotorParams,
) -> Result<RigidBodyState, DynamicsError> {
    if !(dt > 0.0 && dt <= MAX_TIME_STEP) {
        return Err(DynamicsError::InvalidTimeStep(dt));
    }
    let x0 = s.to_vector();
    let f = |x: &StateVector| state_derivative(&RigidBodyState::from_vector(x), u, params);

    let k1 = f(&x0)?;
    let k2 = f(&(x0 + k1 * (0.5 * dt)))?;
    let k3 = f(&(x0 + k2 * (0.5 * dt)))?;
    let k4 = f(&(x0 + k3 * dt))?;
    let x1 = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);

    if x1.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFiniteState);
    }
    let next = RigidBodyState::from_vector(&x1);
    check_pitch(&next.attitude)?;
    Ok(next)
}
