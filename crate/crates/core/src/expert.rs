//! Scripted demonstrator: a cascaded PD heading/altitude hold that flies the
//! straight-and-level task and records demonstrations.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{featurize, Dataset, DatasetMeta, Sample};
use crate::flightdyn::{heading_error, step, wrap_heading, AircraftState, ControlInput, SimParams};
use crate::seeds::{self, stream};
use crate::{Error, Result};

/// Altitude every episode starts (and is asked to stay) at, meters.
pub const INITIAL_ALTITUDE: f64 = 1000.0;
/// Maximum goal offset from the starting heading, degrees.
pub const MAX_GOAL_OFFSET: f64 = 30.0;

/// One straight-and-level episode: turn onto `target_heading` and hold it,
/// together with the starting altitude and airspeed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    /// Heading of the trimmed initial state, degrees.
    pub initial_heading: f64,
    pub target_heading: f64,
    pub target_altitude: f64,
    pub target_airspeed: f64,
    /// Seconds.
    pub duration: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    /// A 20° right turn from north at the trim speed.
    fn default() -> Self {
        Self {
            initial_heading: 0.0,
            target_heading: 20.0,
            target_altitude: INITIAL_ALTITUDE,
            target_airspeed: SimParams::default().v_trim,
            duration: 30.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// Trimmed level state the episode starts from.
    pub fn initial_state(&self, params: &SimParams) -> AircraftState {
        AircraftState {
            airspeed: self.target_airspeed,
            ..AircraftState::trimmed(self.initial_heading, self.target_altitude, params)
        }
    }

    /// Signed goal offset relative to the initial heading.
    pub fn offset(&self) -> f64 {
        heading_error(self.initial_heading, self.target_heading)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::invalid(format!(
                "task duration must be > 0, got {}",
                self.duration
            )));
        }
        let fields = [
            self.initial_heading,
            self.target_heading,
            self.target_altitude,
            self.target_airspeed,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("task fields must be finite"));
        }
        Ok(())
    }
}

/// Draws a goal heading uniformly within ±30° of `initial_heading`.
pub fn sample_task(initial_heading: f64, seed: u64, duration: f64, params: &SimParams) -> TaskSpec {
    let mut rng = seeds::rng(seed);
    let offset: f64 = rng.random_range(-MAX_GOAL_OFFSET..=MAX_GOAL_OFFSET);
    let initial_heading = wrap_heading(initial_heading);
    TaskSpec {
        initial_heading,
        target_heading: wrap_heading(initial_heading + offset),
        target_altitude: INITIAL_ALTITUDE,
        target_airspeed: params.v_trim,
        duration,
        seed,
    }
}

/// Task `index` of a seeded family: random initial heading, random goal.
pub fn task_for_trial(base_seed: u64, stream: u64, index: u64, duration: f64, params: &SimParams) -> TaskSpec {
    let seed = seeds::derive(base_seed, stream, index);
    let initial_heading: f64 = seeds::rng(seed ^ 0x5eed).random_range(0.0..360.0);
    sample_task(initial_heading, seed, duration, params)
}

/// PD gains of the scripted pilot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertGains {
    /// Desired bank per degree of heading error.
    pub k_hdg_to_bank: f64,
    pub bank_limit_deg: f64,
    /// Roll yoke per degree of bank error.
    pub k_roll_p: f64,
    /// Roll yoke per deg/s of roll rate.
    pub k_roll_d: f64,
    /// Desired pitch (deg) per meter of altitude error.
    pub k_alt_to_pitch: f64,
    /// Desired pitch (deg) per m/s of excess airspeed.
    pub k_spd_to_pitch: f64,
    pub pitch_cmd_limit_deg: f64,
    /// Pitch yoke per degree of pitch error.
    pub k_pitch_p: f64,
    /// Pitch yoke per deg/s of pitch rate.
    pub k_pitch_d: f64,
    /// Standard deviation of the noise added to recorded actions.
    pub action_noise_std: f64,
}

impl Default for ExpertGains {
    fn default() -> Self {
        Self {
            k_hdg_to_bank: 1.5,
            bank_limit_deg: 25.0,
            k_roll_p: 0.04,
            k_roll_d: 0.004,
            k_alt_to_pitch: 0.2,
            k_spd_to_pitch: 0.1,
            pitch_cmd_limit_deg: 10.0,
            k_pitch_p: 0.3,
            k_pitch_d: 0.01,
            action_noise_std: 0.02,
        }
    }
}

impl ExpertGains {
    pub fn validate(&self, params: &SimParams) -> Result<()> {
        let all = [
            self.k_hdg_to_bank,
            self.bank_limit_deg,
            self.k_roll_p,
            self.k_roll_d,
            self.k_alt_to_pitch,
            self.k_spd_to_pitch,
            self.pitch_cmd_limit_deg,
            self.k_pitch_p,
            self.k_pitch_d,
            self.action_noise_std,
        ];
        if all.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::invalid("expert gains must be finite and >= 0"));
        }
        if self.bank_limit_deg > params.roll_limit {
            return Err(Error::invalid("expert.bank_limit_deg exceeds sim.roll_limit"));
        }
        if self.pitch_cmd_limit_deg > params.pitch_limit {
            return Err(Error::invalid("expert.pitch_cmd_limit_deg exceeds sim.pitch_limit"));
        }
        Ok(())
    }

    /// Bank the heading loop asks for, degrees.
    pub fn desired_bank(&self, state: &AircraftState, task: &TaskSpec) -> f64 {
        let err = heading_error(state.heading, task.target_heading);
        (self.k_hdg_to_bank * err).clamp(-self.bank_limit_deg, self.bank_limit_deg)
    }

    /// Pitch the altitude/airspeed loop asks for, degrees.
    pub fn desired_pitch(&self, state: &AircraftState, task: &TaskSpec) -> f64 {
        // too fast -> nose up, too slow -> nose down
        let cmd = self.k_alt_to_pitch * (task.target_altitude - state.altitude)
            + self.k_spd_to_pitch * (state.airspeed - task.target_airspeed);
        cmd.clamp(-self.pitch_cmd_limit_deg, self.pitch_cmd_limit_deg)
    }

    pub fn roll_command(&self, state: &AircraftState, task: &TaskSpec) -> f64 {
        self.k_roll_p * (self.desired_bank(state, task) - state.roll_att) - self.k_roll_d * state.roll_rate
    }

    pub fn pitch_command(&self, state: &AircraftState, task: &TaskSpec) -> f64 {
        self.k_pitch_p * (self.desired_pitch(state, task) - state.pitch_att) - self.k_pitch_d * state.pitch_rate
    }
}

/// The demonstrator's (noise-free) action for `state`.
pub fn expert_policy(state: &AircraftState, task: &TaskSpec, gains: &ExpertGains) -> ControlInput {
    ControlInput::new(gains.pitch_command(state, task), gains.roll_command(state, task))
}

/// Flies `n_trials` demonstrations of `duration` seconds each.
///
/// Each trial starts trimmed at a fresh random heading with a fresh goal.
/// The action applied to the simulator and recorded is the expert action plus
/// Gaussian noise, clamped to the yoke range.
pub fn generate_demos(
    n_trials: usize,
    duration: f64,
    gains: &ExpertGains,
    params: &SimParams,
    seed: u64,
) -> Result<Dataset> {
    if n_trials == 0 {
        return Err(Error::invalid("n_trials must be >= 1"));
    }
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::invalid(format!("duration must be > 0, got {duration}")));
    }
    params.validate().map_err(Error::InvalidArgument)?;
    gains.validate(params)?;

    let noise =
        Normal::new(0.0, gains.action_noise_std).map_err(|e| Error::invalid(format!("action_noise_std: {e}")))?;
    let ticks = params.ticks_for(duration);
    let mut samples = Vec::with_capacity(n_trials * ticks);
    let mut tasks = Vec::with_capacity(n_trials);

    for trial in 0..n_trials {
        let task = task_for_trial(seed, stream::DEMO, trial as u64, duration, params);
        let mut rng = seeds::rng(seeds::derive(task.seed, stream::DEMO, 1));
        let mut state = task.initial_state(params);
        for _ in 0..ticks {
            let clean = expert_policy(&state, &task, gains);
            let action = if gains.action_noise_std > 0.0 {
                ControlInput::new(
                    clean.yoke_pitch + noise.sample(&mut rng),
                    clean.yoke_roll + noise.sample(&mut rng),
                )
            } else {
                clean
            };
            samples.push(Sample {
                features: featurize(&state, &task, params),
                action,
                trial_id: trial,
                t: state.t,
            });
            state = step(&state, &action, params);
        }
        tasks.push(task);
    }

    Ok(Dataset::new(samples, DatasetMeta::new(*params, tasks)))
}
