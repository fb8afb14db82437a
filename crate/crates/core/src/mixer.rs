//! X-configuration mixing between motor thrusts, body wrench and the
//! adimensional virtual controls.
//!
//! Motor numbering follows the mixing law
//! `M_p ∝ T2 + T3 − T1 − T4`, `M_q ∝ T1 + T3 − T2 − T4`,
//! `M_r ∝ T1 + T2 − T3 − T4`.

use nalgebra::Vector3;
use std::f64::consts::FRAC_1_SQRT_2;

use crate::dynamics::{BodyWrench, QuadrotorParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotorThrusts(pub [f64; 4]);

impl MotorThrusts {
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|t| t.is_finite())
    }

    /// Clamps every motor into `[0, max_thrust]`. Returns whether anything moved.
    pub fn saturate(&mut self, max_thrust: f64) -> bool {
        let mut clamped = false;
        for t in &mut self.0 {
            let c = t.clamp(0.0, max_thrust);
            if c != *t {
                clamped = true;
                *t = c;
            }
        }
        clamped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VirtualControls {
    pub tau_t: f64,
    pub tau_r: f64,
    pub tau_p: f64,
    pub tau_y: f64,
}

/// Roll/pitch lever arm `l·√2/2` of the X frame.
fn lever(params: &QuadrotorParams) -> f64 {
    params.arm_length * FRAC_1_SQRT_2
}

pub fn thrusts_to_wrench(t: &MotorThrusts, params: &QuadrotorParams) -> BodyWrench {
    let [t1, t2, t3, t4] = t.0;
    let k = lever(params);
    BodyWrench {
        thrust: t1 + t2 + t3 + t4,
        moment: Vector3::new(k * (t2 + t3 - t1 - t4), k * (t1 + t3 - t2 - t4), params.drag_ratio * (t1 + t2 - t3 - t4)),
    }
}

/// Solves the mixing law for the four motor thrusts, then clamps each motor
/// into `[0, T_max]`. The flag reports whether clamping occurred.
pub fn wrench_to_thrusts(w: &BodyWrench, params: &QuadrotorParams) -> (MotorThrusts, bool) {
    // The mixing matrix has mutually orthogonal rows of squared norm 4,
    // so its inverse is a quarter of its transpose.
    let k = lever(params);
    let t = w.thrust;
    let p = w.moment.x / k;
    let q = w.moment.y / k;
    let r = w.moment.z / params.drag_ratio;
    let mut thrusts =
        MotorThrusts([(t - p + q + r) / 4.0, (t + p - q + r) / 4.0, (t + p + q - r) / 4.0, (t - p - q - r) / 4.0]);
    let saturated = thrusts.saturate(params.max_thrust);
    (thrusts, saturated)
}

pub fn virtual_to_wrench(vc: &VirtualControls, params: &QuadrotorParams) -> BodyWrench {
    let scale = 4.0 * params.max_thrust;
    let k = lever(params);
    BodyWrench {
        thrust: scale * (vc.tau_t - 1.0),
        moment: Vector3::new(-scale * vc.tau_r * k, -scale * vc.tau_p * k, scale * vc.tau_y * params.drag_ratio),
    }
}

pub fn wrench_to_virtual(w: &BodyWrench, params: &QuadrotorParams) -> VirtualControls {
    let scale = 4.0 * params.max_thrust;
    let k = lever(params);
    VirtualControls {
        tau_t: 1.0 + w.thrust / scale,
        tau_r: -w.moment.x / (scale * k),
        tau_p: -w.moment.y / (scale * k),
        tau_y: w.moment.z / (scale * params.drag_ratio),
    }
}
