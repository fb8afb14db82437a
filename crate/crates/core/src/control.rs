//! Hierarchical position/attitude controller.
//!
//! The outer loop turns position errors into a collective-thrust command and
//! roll/pitch setpoints. The inner loop is a PD law on Euler-rate errors whose
//! output `v` is a commanded Euler-angle acceleration; feedback linearization
//! converts it into the body moment `M = W⁻ᵀ (B v + C η̇)` that makes `η̈ = v`
//! on the nominal plant.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{euler_rate_map, euler_rate_map_inv, BodyWrench, DynamicsError, QuadrotorParams, RigidBodyState};
use crate::mixer::{wrench_to_thrusts, MotorThrusts};
use crate::trajectory::{wrap_angle, ReferencePoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    /// The horizontal-force map cannot be inverted; `fallback` holds the
    /// previous roll/pitch setpoint with the thrust command still usable.
    #[error("degenerate thrust (tau_T = {}), attitude setpoint held", fallback.tau_t)]
    DegenerateThrust { fallback: OuterCommand },
    #[error("invalid gains: {0}")]
    InvalidGains(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterGains {
    pub kp1_z: f64,
    pub kp2_z: f64,
    pub kp1_xy: f64,
    pub kp2_xy: f64,
    pub kd_xy: f64,
}

impl Default for OuterGains {
    fn default() -> Self {
        Self { kp1_z: 8.9, kp2_z: 19.8, kp1_xy: 0.6, kp2_xy: 3.9, kd_xy: 0.29 }
    }
}

/// The five tunable attitude gains. Roll and pitch share theirs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerGains {
    pub kp1_phitheta: f64,
    pub kp1_psi: f64,
    pub kp2_phitheta: f64,
    pub kp2_psi: f64,
    pub kd_phitheta: f64,
}

impl Default for InnerGains {
    fn default() -> Self {
        Self { kp1_phitheta: 4.0, kp1_psi: 2.0, kp2_phitheta: 11.467, kp2_psi: 5.4801, kd_phitheta: 0.81905 }
    }
}

impl InnerGains {
    /// Gains in action order: `[kP1_φθ, kP1_ψ, kP2_φθ, kP2_ψ, kD_φθ]`.
    pub fn to_array(&self) -> [f64; 5] {
        [self.kp1_phitheta, self.kp1_psi, self.kp2_phitheta, self.kp2_psi, self.kd_phitheta]
    }

    pub fn from_array(k: [f64; 5]) -> Self {
        Self { kp1_phitheta: k[0], kp1_psi: k[1], kp2_phitheta: k[2], kp2_psi: k[3], kd_phitheta: k[4] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GainSet {
    pub outer: OuterGains,
    pub inner: InnerGains,
}

impl GainSet {
    pub fn validate(&self) -> Result<(), ControlError> {
        let o = &self.outer;
        let all = [o.kp1_z, o.kp2_z, o.kp1_xy, o.kp2_xy, o.kd_xy].into_iter().chain(self.inner.to_array());
        if all.into_iter().any(|k| !(k.is_finite() && k > 0.0)) {
            return Err(ControlError::InvalidGains("all gains must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AttitudeSetpoint {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl AttitudeSetpoint {
    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.roll, self.pitch, self.yaw)
    }

    /// `(φ_r − φ, θ_r − θ, ψ_r − ψ)` with the yaw difference wrapped to (−π, π].
    pub fn error(&self, attitude: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(self.roll - attitude.x, self.pitch - attitude.y, wrap_angle(self.yaw - attitude.z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Control period [s]. Set from the run timing, not read from config files.
    #[serde(skip)]
    pub dt: f64,
    /// Time constant of the low-pass on discrete derivatives [s].
    pub derivative_tau: f64,
    /// Limit on |φ_r| and |θ_r| [rad].
    pub tilt_limit: f64,
    /// Minimum `cos φ cos θ` accepted by the thrust law.
    pub tilt_guard: f64,
    /// `|τ_T − 1|` below which the horizontal-force map is treated as singular.
    pub degenerate_threshold: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { dt: 0.005, derivative_tau: 0.02, tilt_limit: 0.5, tilt_guard: 0.1, degenerate_threshold: 1e-4 }
    }
}

/// Backward difference followed by a first-order low-pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DerivativeFilter {
    prev: f64,
    value: f64,
}

impl DerivativeFilter {
    pub fn update(&mut self, x: f64, dt: f64, tau: f64) -> f64 {
        let raw = (x - self.prev) / dt;
        self.prev = x;
        self.value += dt / (tau + dt) * (raw - self.value);
        self.value
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}

/// Per-episode derivative history and the last valid attitude setpoint.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControllerMemory {
    pub vel_err_x: DerivativeFilter,
    pub vel_err_y: DerivativeFilter,
    pub rate_err_roll: DerivativeFilter,
    pub rate_err_pitch: DerivativeFilter,
    pub last_setpoint: AttitudeSetpoint,
}

impl ControllerMemory {
    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterCommand {
    pub tau_t: f64,
    pub setpoint: AttitudeSetpoint,
    /// Virtual accelerations `(v_x, v_y, v_z)`.
    pub accel: Vector3<f64>,
}

pub fn outer_loop(
    s: &RigidBodyState,
    reference: &ReferencePoint,
    gains: &OuterGains,
    mem: &mut ControllerMemory,
    params: &QuadrotorParams,
    cfg: &ControllerConfig,
) -> Result<OuterCommand, ControlError> {
    let p = &s.position;
    let v = &s.velocity;
    let pr = &reference.position;

    let e_vx = gains.kp1_xy * (pr.x - p.x) - v.x;
    let e_vy = gains.kp1_xy * (pr.y - p.y) - v.y;
    let e_vz = gains.kp1_z * (pr.z - p.z) - v.z;

    let vx = gains.kp2_xy * e_vx + gains.kd_xy * mem.vel_err_x.update(e_vx, cfg.dt, cfg.derivative_tau);
    let vy = gains.kp2_xy * e_vy + gains.kd_xy * mem.vel_err_y.update(e_vy, cfg.dt, cfg.derivative_tau);
    let vz = gains.kp2_z * e_vz;
    let accel = Vector3::new(vx, vy, vz);

    let tilt = s.attitude.x.cos() * s.attitude.y.cos();
    let tilt_ok = tilt > cfg.tilt_guard;
    let scale = 4.0 * params.max_thrust;
    let tau_t = (1.0 + params.mass * (params.gravity + vz) / (scale * tilt.max(cfg.tilt_guard))).clamp(1.0, 2.0);

    if !tilt_ok || (tau_t - 1.0).abs() < cfg.degenerate_threshold {
        let held = AttitudeSetpoint { yaw: reference.yaw, ..mem.last_setpoint };
        mem.last_setpoint = held;
        return Err(ControlError::DegenerateThrust { fallback: OuterCommand { tau_t, setpoint: held, accel } });
    }

    // F = (T/m) [[sψ, cψ], [−cψ, sψ]] has unit determinant up to the
    // scale, so its inverse is (m/T) times the transpose.
    let (sy, cy) = s.attitude.z.sin_cos();
    let specific_thrust = scale * (tau_t - 1.0) / params.mass;
    let roll = (sy * vx - cy * vy) / specific_thrust;
    let pitch = (cy * vx + sy * vy) / specific_thrust;

    let setpoint = AttitudeSetpoint {
        roll: roll.clamp(-cfg.tilt_limit, cfg.tilt_limit),
        pitch: pitch.clamp(-cfg.tilt_limit, cfg.tilt_limit),
        yaw: reference.yaw,
    };
    mem.last_setpoint = setpoint;
    Ok(OuterCommand { tau_t, setpoint, accel })
}

/// Horizontal-force map of the outer loop; exposed for cross-checking the
/// closed-form inverse used in [`outer_loop`].
pub fn horizontal_force_map(tau_t: f64, yaw: f64, params: &QuadrotorParams) -> Matrix2<f64> {
    let (sy, cy) = yaw.sin_cos();
    Matrix2::new(sy, cy, -cy, sy) * (4.0 * params.max_thrust * (tau_t - 1.0) / params.mass)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerCommand {
    /// Commanded Euler-angle accelerations.
    pub v: Vector3<f64>,
    /// Euler-rate errors `(e_φ̇, e_θ̇, e_ψ̇)`.
    pub rate_error: Vector3<f64>,
}

pub fn inner_pd(
    eta: &Vector3<f64>,
    eta_dot: &Vector3<f64>,
    sp: &AttitudeSetpoint,
    gains: &InnerGains,
    mem: &mut ControllerMemory,
    cfg: &ControllerConfig,
) -> InnerCommand {
    let e = sp.error(eta);
    let rate_error = Vector3::new(
        gains.kp1_phitheta * e.x - eta_dot.x,
        gains.kp1_phitheta * e.y - eta_dot.y,
        gains.kp1_psi * e.z - eta_dot.z,
    );
    let d_roll = mem.rate_err_roll.update(rate_error.x, cfg.dt, cfg.derivative_tau);
    let d_pitch = mem.rate_err_pitch.update(rate_error.y, cfg.dt, cfg.derivative_tau);
    let v = Vector3::new(
        gains.kp2_phitheta * rate_error.x + gains.kd_phitheta * d_roll,
        gains.kp2_phitheta * rate_error.y + gains.kd_phitheta * d_pitch,
        gains.kp2_psi * rate_error.z,
    );
    InnerCommand { v, rate_error }
}

/// Partial derivatives `∂W/∂φ` and `∂W/∂θ` (W does not depend on ψ).
fn euler_rate_map_partials(eta: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let (sf, cf) = eta.x.sin_cos();
    let (st, ct) = eta.y.sin_cos();
    let d_phi = Matrix3::new(
        0.0,
        0.0,
        0.0, //
        0.0,
        -sf,
        cf * ct, //
        0.0,
        -cf,
        -sf * ct,
    );
    let d_theta = Matrix3::new(
        0.0,
        0.0,
        -ct, //
        0.0,
        0.0,
        -sf * st, //
        0.0,
        0.0,
        -cf * st,
    );
    [d_phi, d_theta, Matrix3::zeros()]
}

/// Generalized rotational inertia `B(η) = Wᵀ I W`.
pub fn inertia_matrix_b(eta: &Vector3<f64>, params: &QuadrotorParams) -> Result<Matrix3<f64>, DynamicsError> {
    let w = euler_rate_map(eta)?;
    Ok(w.transpose() * params.inertia_matrix() * w)
}

/// Coriolis matrix from the Christoffel symbols of `B(η)`:
/// `C_kj = Σ_i ½ (∂B_kj/∂η_i + ∂B_ki/∂η_j − ∂B_ij/∂η_k) η̇_i`.
pub fn coriolis_c(
    eta: &Vector3<f64>,
    eta_dot: &Vector3<f64>,
    params: &QuadrotorParams,
) -> Result<Matrix3<f64>, DynamicsError> {
    let w = euler_rate_map(eta)?;
    let inertia = params.inertia_matrix();
    let dw = euler_rate_map_partials(eta);
    let db: Vec<Matrix3<f64>> = dw
        .iter()
        .map(|d| {
            let half = d.transpose() * inertia * w;
            half + half.transpose()
        })
        .collect();

    let mut c = Matrix3::zeros();
    for k in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for i in 0..3 {
                acc += 0.5 * (db[i][(k, j)] + db[j][(k, i)] - db[k][(i, j)]) * eta_dot[i];
            }
            c[(k, j)] = acc;
        }
    }
    Ok(c)
}

/// Body moment `M' = W⁻ᵀ (B v + C η̇)` that realizes `η̈ = v`.
pub fn feedback_linearize(
    eta: &Vector3<f64>,
    eta_dot: &Vector3<f64>,
    v: &Vector3<f64>,
    params: &QuadrotorParams,
) -> Result<Vector3<f64>, DynamicsError> {
    let w_inv_t = euler_rate_map_inv(eta)?.transpose();
    let b = inertia_matrix_b(eta, params)?;
    let c = coriolis_c(eta, eta_dot, params)?;
    Ok(w_inv_t * (b * v + c * eta_dot))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub thrusts: MotorThrusts,
    /// Some motor was clamped to `[0, T_max]`.
    pub saturated: bool,
    /// Wrench demanded before motor saturation.
    pub wrench: BodyWrench,
    pub tau_t: f64,
    pub setpoint: AttitudeSetpoint,
    pub accel: Vector3<f64>,
    pub v: Vector3<f64>,
    /// The outer loop fell back to the held setpoint this tick.
    pub degenerate: bool,
}

/// Stateful controller: configuration plus per-episode memory.
#[derive(Debug, Clone)]
pub struct Controller {
    pub config: ControllerConfig,
    pub memory: ControllerMemory,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Self {
        Self { config, memory: ControllerMemory::default() }
    }

    pub fn reset(&mut self) {
        self.memory.reset();
    }

    /// Outer loop with the degenerate case resolved to the held setpoint.
    /// Returns the command and whether the fallback was taken.
    pub fn outer(
        &mut self,
        s: &RigidBodyState,
        reference: &ReferencePoint,
        gains: &OuterGains,
        params: &QuadrotorParams,
    ) -> Result<(OuterCommand, bool), ControlError> {
        match outer_loop(s, reference, gains, &mut self.memory, params, &self.config) {
            Ok(cmd) => Ok((cmd, false)),
            Err(ControlError::DegenerateThrust { fallback }) => Ok((fallback, true)),
            Err(e) => Err(e),
        }
    }

    /// Inner loop, feedback linearization and mixing for a given outer command.
    pub fn inner(
        &mut self,
        s: &RigidBodyState,
        outer: &OuterCommand,
        degenerate: bool,
        gains: &InnerGains,
        params: &QuadrotorParams,
    ) -> Result<ControlOutput, ControlError> {
        let eta_dot = s.euler_rates()?;
        let inner = inner_pd(&s.attitude, &eta_dot, &outer.setpoint, gains, &mut self.memory, &self.config);
        let moment = feedback_linearize(&s.attitude, &eta_dot, &inner.v, params)?;
        let wrench = BodyWrench::new(4.0 * params.max_thrust * (outer.tau_t - 1.0), moment);
        let (thrusts, saturated) = wrench_to_thrusts(&wrench, params);
        Ok(ControlOutput {
            thrusts,
            saturated,
            wrench,
            tau_t: outer.tau_t,
            setpoint: outer.setpoint,
            accel: outer.accel,
            v: inner.v,
            degenerate,
        })
    }

    /// Full controller tick: outer loop → inner PD → feedback linearization → mixer.
    pub fn step(
        &mut self,
        s: &RigidBodyState,
        reference: &ReferencePoint,
        gains: &GainSet,
        params: &QuadrotorParams,
    ) -> Result<ControlOutput, ControlError> {
        let (outer, degenerate) = self.outer(s, reference, &gains.outer, params)?;
        self.inner(s, &outer, degenerate, &gains.inner, params)
    }
}

/// Solves `F x = v` for a 2×2 map; used by tests as an independent route.
pub fn solve_2x2(f: &Matrix2<f64>, v: &Vector2<f64>) -> Option<Vector2<f64>> {
    f.try_inverse().map(|inv| inv * v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::step_rk4;

    fn hover_ref(p: Vector3<f64>) -> ReferencePoint {
        ReferencePoint { position: p, velocity: Vector3::zeros(), yaw: 0.0 }
    }

    #[test]
    fn outer_loop_hover() {
        let params = QuadrotorParams::default();
        let mut mem = ControllerMemory::default();
        let s = RigidBodyState::default();
        let cmd = outer_loop(
            &s,
            &hover_ref(Vector3::zeros()),
            &OuterGains::default(),
            &mut mem,
            &params,
            &ControllerConfig::default(),
        )
        .unwrap();
        assert_eq!(cmd.accel.z, 0.0);
        assert!((cmd.tau_t - (1.0 + 1.2 * 9.81 / (4.0 * 8.43))).abs() < 1e-15);
        assert!((cmd.tau_t - 1.3491).abs() < 1e-4);
        assert_eq!(cmd.setpoint.roll, 0.0);
        assert_eq!(cmd.setpoint.pitch, 0.0);
    }

    #[test]
    fn outer_loop_altitude_error() {
        let params = QuadrotorParams::default();
        let mut mem = ControllerMemory::default();
        let s = RigidBodyState::default();
        let cmd = outer_loop(
            &s,
            &hover_ref(Vector3::new(0.0, 0.0, 1.0)),
            &OuterGains::default(),
            &mut mem,
            &params,
            &ControllerConfig::default(),
        )
        .unwrap();
        assert!((cmd.accel.z - 176.22).abs() < 1e-12);
        assert_eq!(cmd.tau_t, 2.0);
    }

    #[test]
    fn forward_command_tilts_nose_down_toward_x() {
        let params = QuadrotorParams::default();
        let cfg = ControllerConfig::default();
        let mut mem = ControllerMemory::default();
        let s = RigidBodyState::default();
        let cmd =
            outer_loop(&s, &hover_ref(Vector3::new(0.5, 0.0, 0.0)), &OuterGains::default(), &mut mem, &params, &cfg)
                .unwrap();
        assert!(cmd.accel.x > 0.0);
        assert!(cmd.setpoint.pitch > 0.0);
        assert_eq!(cmd.setpoint.roll, 0.0);

        let f = horizontal_force_map(cmd.tau_t, 0.0, &params);
        let brute = solve_2x2(&f, &Vector2::new(cmd.accel.x, cmd.accel.y)).unwrap();
        assert!((brute.x - cmd.setpoint.roll).abs() < 1e-14);
        assert!((brute.y - cmd.setpoint.pitch).abs() < 1e-14);
    }

    #[test]
    fn tilt_guard_holds_setpoint() {
        let params = QuadrotorParams::default();
        let cfg = ControllerConfig::default();
        let mut ctrl = Controller::new(cfg);
        let gains = GainSet::default();
        let r = hover_ref(Vector3::new(0.3, -0.2, 0.0));
        let first = ctrl.step(&RigidBodyState::default(), &r, &gains, &params).unwrap();
        assert!(!first.degenerate);

        let mut tilted = RigidBodyState::default();
        tilted.attitude = Vector3::new(1.5, 0.2, 0.0);
        let out = ctrl.step(&tilted, &r, &gains, &params).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.setpoint.roll, first.setpoint.roll);
        assert_eq!(out.setpoint.pitch, first.setpoint.pitch);
        assert!(out.thrusts.is_finite());

        let err = outer_loop(&tilted, &r, &gains.outer, &mut ControllerMemory::default(), &params, &cfg);
        assert!(matches!(err, Err(ControlError::DegenerateThrust { .. })));
    }

    #[test]
    fn inner_pd_examples() {
        let cfg = ControllerConfig::default();
        let gains = InnerGains::default();
        let mut mem = ControllerMemory::default();
        let zero = inner_pd(&Vector3::zeros(), &Vector3::zeros(), &AttitudeSetpoint::default(), &gains, &mut mem, &cfg);
        assert_eq!(zero.v, Vector3::zeros());

        let mut mem = ControllerMemory::default();
        let sp = AttitudeSetpoint { roll: 0.1, ..Default::default() };
        let out = inner_pd(&Vector3::zeros(), &Vector3::zeros(), &sp, &gains, &mut mem, &cfg);
        let proportional: f64 = 11.467 * (4.0 * 0.1);
        assert!((proportional - 4.5868).abs() < 1e-12);
        // first-sample filtered derivative of e = 0.4 starting from zero history
        let filtered = cfg.dt / (cfg.derivative_tau + cfg.dt) * (0.4 / cfg.dt);
        assert!((out.v.x - (proportional + 0.81905 * filtered)).abs() < 1e-12);

        let mut mem = ControllerMemory::default();
        let sp = AttitudeSetpoint { yaw: 0.2, ..Default::default() };
        let out = inner_pd(&Vector3::zeros(), &Vector3::zeros(), &sp, &gains, &mut mem, &cfg);
        assert!((out.v.z - 2.19204).abs() < 1e-12);
    }

    #[test]
    fn b_and_c_at_rest() {
        let params = QuadrotorParams::default();
        assert_eq!(inertia_matrix_b(&Vector3::zeros(), &params).unwrap(), params.inertia_matrix());
        let eta = Vector3::new(0.3, -0.2, 1.0);
        assert_eq!(coriolis_c(&eta, &Vector3::zeros(), &params).unwrap(), Matrix3::zeros());
    }

    #[test]
    fn feedback_linearize_examples() {
        let params = QuadrotorParams::default();
        let m = feedback_linearize(&Vector3::zeros(), &Vector3::zeros(), &Vector3::x(), &params).unwrap();
        assert!((m - Vector3::new(0.0131, 0.0, 0.0)).amax() < 1e-17);
        let m =
            feedback_linearize(&Vector3::new(0.2, 0.1, 0.0), &Vector3::zeros(), &Vector3::zeros(), &params).unwrap();
        assert_eq!(m, Vector3::zeros());
    }

    #[test]
    fn hover_thrusts_split_evenly() {
        let params = QuadrotorParams::default();
        let mut ctrl = Controller::new(ControllerConfig::default());
        let out =
            ctrl.step(&RigidBodyState::default(), &hover_ref(Vector3::zeros()), &GainSet::default(), &params).unwrap();
        for t in out.thrusts.0 {
            assert!((t - 2.943).abs() < 1e-9, "{t}");
        }
        assert!(!out.saturated);
    }

    #[test]
    fn yaw_step_settles() {
        let params = QuadrotorParams::default();
        let cfg = ControllerConfig::default();
        let mut ctrl = Controller::new(cfg);
        let gains = GainSet::default();
        let target = 0.2;
        let r = ReferencePoint { position: Vector3::zeros(), velocity: Vector3::zeros(), yaw: target };
        let mut s = RigidBodyState::default();
        let substeps = (cfg.dt / 1e-3).round() as usize;
        let mut peak: f64 = 0.0;
        let mut last_outside = 0.0;
        for k in 0..(4.0 / cfg.dt) as usize {
            let t = k as f64 * cfg.dt;
            let out = ctrl.step(&s, &r, &gains, &params).unwrap();
            let u = crate::mixer::thrusts_to_wrench(&out.thrusts, &params);
            for _ in 0..substeps {
                s = step_rk4(&s, &u, 1e-3, &params).unwrap();
            }
            peak = peak.max(s.attitude.z);
            if (s.attitude.z - target).abs() > 0.02 * target {
                last_outside = t + cfg.dt;
            }
        }
        assert!(last_outside < 2.0, "settled at {last_outside}");
        assert!((peak - target) / target < 0.2, "overshoot {}", (peak - target) / target);
    }
}
