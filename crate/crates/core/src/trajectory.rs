//! Reference generator for the take-off / hover / circle / hover / landing mission.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use thiserror::Error;

/// Slack allowed past the mission end to absorb accumulated time-step rounding.
const END_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("time {t} s outside mission [0, {duration}] s")]
    OutOfRange { t: f64, duration: f64 },
    #[error("invalid trajectory config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum YawMode {
    #[default]
    ConstantZero,
    /// Heading follows the direction of travel around the circle.
    Tangent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub t_takeoff: f64,
    pub t_hover1: f64,
    pub t_circle: f64,
    pub t_hover2: f64,
    pub t_land: f64,
    /// Cruise altitude [m].
    pub altitude: f64,
    /// Circle radius [m].
    pub radius: f64,
    #[serde(default)]
    pub yaw_mode: YawMode,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            t_takeoff: 10.0,
            t_hover1: 2.5,
            t_circle: 20.0,
            t_hover2: 2.5,
            t_land: 10.0,
            altitude: 5.0,
            radius: 3.0,
            yaw_mode: YawMode::ConstantZero,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let durations = [
            ("t_takeoff", self.t_takeoff),
            ("t_hover1", self.t_hover1),
            ("t_circle", self.t_circle),
            ("t_hover2", self.t_hover2),
            ("t_land", self.t_land),
            ("altitude", self.altitude),
            ("radius", self.radius),
        ];
        for (name, value) in durations {
            if !(value.is_finite() && value > 0.0) {
                return Err(TrajectoryError::InvalidConfig(format!("{name} must be positive, got {value}")));
            }
        }
        Ok(())
    }

    pub fn circle_start(&self) -> f64 {
        self.t_takeoff + self.t_hover1
    }

    pub fn circle_end(&self) -> f64 {
        self.circle_start() + self.t_circle
    }

    /// Instants where the reference switches segment.
    pub fn boundaries(&self) -> [f64; 4] {
        let b1 = self.t_takeoff;
        let b2 = b1 + self.t_hover1;
        let b3 = b2 + self.t_circle;
        let b4 = b3 + self.t_hover2;
        [b1, b2, b3, b4]
    }
}

pub fn mission_duration(cfg: &TrajectoryConfig) -> f64 {
    cfg.t_takeoff + cfg.t_hover1 + cfg.t_circle + cfg.t_hover2 + cfg.t_land
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub yaw: f64,
}

/// Minimum-jerk blend on `[0, 1]`: value and derivative with respect to `s`.
fn quintic(s: f64) -> (f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (s3 * (10.0 - 15.0 * s + 6.0 * s2), 30.0 * s2 * (1.0 - 2.0 * s + s2))
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

pub fn reference_at(t: f64, cfg: &TrajectoryConfig) -> Result<ReferencePoint, TrajectoryError> {
    let duration = mission_duration(cfg);
    if !(t >= 0.0 && t <= duration + END_SLACK) {
        return Err(TrajectoryError::OutOfRange { t, duration });
    }
    let t = t.min(duration);
    let [b1, b2, b3, b4] = cfg.boundaries();
    let r = cfg.radius;
    let h = cfg.altitude;
    let rate = TAU / cfg.t_circle;
    let heading_offset = match cfg.yaw_mode {
        YawMode::ConstantZero => None,
        YawMode::Tangent => Some(FRAC_PI_2),
    };

    let (position, velocity, angle) = if t < b1 {
        let (s, ds) = quintic(t / cfg.t_takeoff);
        (Vector3::new(r, 0.0, h * s), Vector3::new(0.0, 0.0, h * ds / cfg.t_takeoff), 0.0)
    } else if t < b2 {
        (Vector3::new(r, 0.0, h), Vector3::zeros(), 0.0)
    } else if t < b3 {
        let angle = rate * (t - b2);
        let (sa, ca) = angle.sin_cos();
        (Vector3::new(r * ca, r * sa, h), Vector3::new(-r * rate * sa, r * rate * ca, 0.0), angle)
    } else if t < b4 {
        (Vector3::new(r, 0.0, h), Vector3::zeros(), TAU)
    } else {
        let (s, ds) = quintic((t - b4) / cfg.t_land);
        (Vector3::new(r, 0.0, h * (1.0 - s)), Vector3::new(0.0, 0.0, -h * ds / cfg.t_land), TAU)
    };

    let yaw = heading_offset.map_or(0.0, |off| wrap_angle(off + angle));
    Ok(ReferencePoint { position, velocity, yaw })
}
