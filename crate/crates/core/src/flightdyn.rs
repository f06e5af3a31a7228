//! Simplified fixed-wing kinematics.
//!
//! The model has no sideslip and no engine: the yoke commands attitude
//! rates, bank produces a coordinated turn, pitch trades airspeed for
//! altitude, and drag pulls airspeed back towards trim. Angles are degrees
//! at the API boundary and radians inside [`step`].

use serde::{Deserialize, Serialize};

/// Kinematic state of the aircraft at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AircraftState {
    /// Simulation time, seconds.
    pub t: f64,
    /// East position, meters.
    pub x: f64,
    /// North position, meters.
    pub y: f64,
    /// Meters, never negative.
    pub altitude: f64,
    /// True airspeed, m/s.
    pub airspeed: f64,
    /// Degrees in `[0, 360)`, 0 = north, clockwise.
    pub heading: f64,
    /// Pitch attitude, degrees, positive nose up.
    pub pitch_att: f64,
    /// Bank angle, degrees, positive right wing down.
    pub roll_att: f64,
    /// Pitch attitude rate over the last step, deg/s.
    pub pitch_rate: f64,
    /// Roll attitude rate over the last step, deg/s.
    pub roll_rate: f64,
}

impl AircraftState {
    /// Wings-level, unaccelerated flight at `params.v_trim`.
    pub fn trimmed(heading: f64, altitude: f64, params: &SimParams) -> Self {
        Self {
            t: 0.0,
            x: 0.0,
            y: 0.0,
            altitude: altitude.max(0.0),
            airspeed: params.v_trim,
            heading: wrap_heading(heading),
            pitch_att: 0.0,
            roll_att: 0.0,
            pitch_rate: 0.0,
            roll_rate: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.t,
            self.x,
            self.y,
            self.altitude,
            self.airspeed,
            self.heading,
            self.pitch_att,
            self.roll_att,
            self.pitch_rate,
            self.roll_rate,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Normalized yoke command. Both axes are clamped to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Positive = pull (nose up).
    pub yoke_pitch: f64,
    /// Positive = roll right.
    pub yoke_roll: f64,
}

impl ControlInput {
    pub const NEUTRAL: ControlInput = ControlInput {
        yoke_pitch: 0.0,
        yoke_roll: 0.0,
    };

    /// Builds a command, clamping each axis into `[-1, 1]`.
    ///
    /// NaN inputs are kept as NaN so callers can detect a broken policy.
    pub fn new(yoke_pitch: f64, yoke_roll: f64) -> Self {
        Self {
            yoke_pitch: clamp_unit(yoke_pitch),
            yoke_roll: clamp_unit(yoke_roll),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.yoke_pitch.is_finite() && self.yoke_roll.is_finite()
    }

    /// Euclidean distance in normalized yoke units.
    pub fn distance(&self, other: &ControlInput) -> f64 {
        (self.yoke_pitch - other.yoke_pitch).hypot(self.yoke_roll - other.yoke_roll)
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        v
    } else {
        v.clamp(-1.0, 1.0)
    }
}

/// Simulator constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    /// Integration step, seconds.
    pub dt: f64,
    pub g: f64,
    /// Pitch attitude rate at full yoke deflection, deg/s.
    pub pitch_rate_gain: f64,
    /// Roll attitude rate at full yoke deflection, deg/s.
    pub roll_rate_gain: f64,
    pub pitch_limit: f64,
    pub roll_limit: f64,
    pub v_trim: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Linear airspeed restoring coefficient, 1/s.
    pub drag_coeff: f64,
    /// Constant longitudinal acceleration, m/s^2. Zero keeps level flight at
    /// `v_trim` a fixed point.
    pub thrust_accel: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 0.05,
            g: 9.81,
            pitch_rate_gain: 10.0,
            roll_rate_gain: 30.0,
            pitch_limit: 20.0,
            roll_limit: 45.0,
            v_trim: 60.0,
            v_min: 30.0,
            v_max: 90.0,
            drag_coeff: 0.1,
            thrust_accel: 0.0,
        }
    }
}

impl SimParams {
    /// Checks the parameter invariants, returning a description of the first
    /// violated one.
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("dt", self.dt),
            ("g", self.g),
            ("pitch_rate_gain", self.pitch_rate_gain),
            ("roll_rate_gain", self.roll_rate_gain),
            ("pitch_limit", self.pitch_limit),
            ("roll_limit", self.roll_limit),
            ("drag_coeff", self.drag_coeff),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("sim.{name} must be finite and > 0, got {v}"));
            }
        }
        if self.roll_limit >= 90.0 || self.pitch_limit >= 90.0 {
            return Err("attitude limits must be below 90 degrees".into());
        }
        if !(self.v_min > 0.0 && self.v_min < self.v_trim && self.v_trim < self.v_max) {
            return Err(format!(
                "need 0 < v_min < v_trim < v_max, got {} / {} / {}",
                self.v_min, self.v_trim, self.v_max
            ));
        }
        if !self.thrust_accel.is_finite() {
            return Err("sim.thrust_accel must be finite".into());
        }
        Ok(())
    }

    /// Simulation ticks per second.
    pub fn tick_hz(&self) -> f64 {
        1.0 / self.dt
    }

    /// Number of ticks needed to cover `duration` seconds.
    pub fn ticks_for(&self, duration: f64) -> usize {
        (duration / self.dt).round().max(0.0) as usize
    }
}

/// Airspeed derivative under the update law, m/s^2.
pub fn airspeed_rate(airspeed: f64, pitch_att_deg: f64, params: &SimParams) -> f64 {
    params.thrust_accel - params.drag_coeff * (airspeed - params.v_trim) - params.g * pitch_att_deg.to_radians().sin()
}

/// Coordinated-turn heading rate, deg/s.
pub fn turn_rate(airspeed: f64, roll_att_deg: f64, params: &SimParams) -> f64 {
    (params.g / airspeed * roll_att_deg.to_radians().tan()).to_degrees()
}

/// Advances the aircraft by one forward-Euler step of `params.dt`.
///
/// Attitudes are integrated first; the heading, climb and airspeed rates are
/// then evaluated at the new attitude and the pre-step airspeed.
pub fn step(state: &AircraftState, control: &ControlInput, params: &SimParams) -> AircraftState {
    let dt = params.dt;
    let control = ControlInput::new(control.yoke_pitch, control.yoke_roll);

    let pitch_att = (state.pitch_att + control.yoke_pitch * params.pitch_rate_gain * dt)
        .clamp(-params.pitch_limit, params.pitch_limit);
    let roll_att =
        (state.roll_att + control.yoke_roll * params.roll_rate_gain * dt).clamp(-params.roll_limit, params.roll_limit);

    let v = state.airspeed;
    let pitch = pitch_att.to_radians();
    let heading_rate = turn_rate(v, roll_att, params);
    let climb_rate = v * pitch.sin();
    let v_dot = airspeed_rate(v, pitch_att, params);
    let ground_speed = v * pitch.cos();
    let track = state.heading.to_radians();

    AircraftState {
        t: state.t + dt,
        x: state.x + ground_speed * track.sin() * dt,
        y: state.y + ground_speed * track.cos() * dt,
        altitude: (state.altitude + climb_rate * dt).max(0.0),
        airspeed: (v + v_dot * dt).clamp(params.v_min, params.v_max),
        heading: wrap_heading(state.heading + heading_rate * dt),
        pitch_att,
        roll_att,
        pitch_rate: (pitch_att - state.pitch_att) / dt,
        roll_rate: (roll_att - state.roll_att) / dt,
    }
}

/// Wraps any angle into `[0, 360)`.
pub fn wrap_heading(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Signed `target - current`, wrapped into `(-180, 180]`.
pub fn heading_error(current: f64, target: f64) -> f64 {
    let d = (target - current).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}
