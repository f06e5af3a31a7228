//! Real-time tutoring sessions.
//!
//! A session couples a state source (the built-in simulator, UDP telemetry
//! from an external simulator, or a recorded trajectory) with the tutor at a
//! fixed tick. Every tick produces a state message and a feedback event for
//! the client and a pair of lines in the session log.

mod engine;
mod log;
pub mod protocol;
mod server;
mod telemetry;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use engine::{ClientEvent, ControlSource, EventSink, NoClient, Session, StateSource, TelemetrySource};
pub use log::{
    replay_log, Divergence, ReplayReport, SessionLog, SessionStats, SESSION_LOG_FORMAT, SESSION_LOG_VERSION,
};
pub use server::{Server, ServerHandle};
pub use telemetry::{parse_telemetry, TelemetryPacket, UdpTelemetry};

use crate::expert::TaskSpec;
use crate::flightdyn::SimParams;
use crate::tutor::TutorThresholds;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    /// The built-in simulator flies the student's inputs.
    #[default]
    LiveSim,
    /// State and inputs arrive as UDP telemetry from an external simulator.
    TelemetryOnly,
    /// State and inputs come from a saved trajectory.
    ReplayTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub mode: SessionMode,
    /// Must equal `1 / sim.dt` in live mode.
    pub tick_hz: f64,
    /// Default task; a client's `start` message may override fields.
    pub task: TaskSpec,
    /// Filled from the `[tutor]` section by the CLI.
    pub thresholds: TutorThresholds,
    pub policy: Option<PathBuf>,
    /// Directory receiving one log file per session.
    pub log_dir: Option<PathBuf>,
    /// TCP address of the session port.
    pub listen: String,
    /// UDP address for telemetry, required in telemetry mode.
    pub telemetry_listen: Option<String>,
    /// Trajectory file, required in replay mode.
    pub replay: Option<PathBuf>,
    /// Skip wall-clock pacing (replay and tests).
    pub fast: bool,
    /// Seconds without a telemetry packet before the session is aborted.
    pub telemetry_timeout: f64,
    /// Outgoing messages buffered per client before the oldest are dropped.
    pub client_queue: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            mode: SessionMode::LiveSim,
            tick_hz: 20.0,
            task: TaskSpec::default(),
            thresholds: TutorThresholds::default(),
            policy: None,
            log_dir: None,
            listen: "127.0.0.1:7878".into(),
            telemetry_listen: None,
            replay: None,
            fast: false,
            telemetry_timeout: 2.0,
            client_queue: 256,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self, sim: &SimParams) -> Result<()> {
        if !(self.tick_hz > 0.0 && self.tick_hz.is_finite()) {
            return Err(Error::invalid("session.tick_hz must be > 0"));
        }
        if self.mode == SessionMode::LiveSim && (self.tick_hz * sim.dt - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "session.tick_hz ({}) must equal 1/sim.dt ({}) in live_sim mode",
                self.tick_hz,
                sim.tick_hz()
            )));
        }
        if self.mode == SessionMode::TelemetryOnly && self.telemetry_listen.is_none() {
            return Err(Error::invalid(
                "session.telemetry_listen is required in telemetry_only mode",
            ));
        }
        if self.mode == SessionMode::ReplayTrajectory && self.replay.is_none() {
            return Err(Error::invalid("session.replay is required in replay_trajectory mode"));
        }
        if !(self.telemetry_timeout > 0.0 && self.telemetry_timeout.is_finite()) {
            return Err(Error::invalid("session.telemetry_timeout must be > 0"));
        }
        if self.client_queue == 0 {
            return Err(Error::invalid("session.client_queue must be >= 1"));
        }
        self.task.validate()?;
        self.thresholds.validate()
    }

    /// Seconds per tick.
    pub fn period(&self) -> f64 {
        1.0 / self.tick_hz
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        SessionConfig::default().validate(&SimParams::default()).unwrap();
    }

    #[test]
    fn mode_requirements() {
        let sim = SimParams::default();
        let c = SessionConfig {
            tick_hz: 10.0,
            ..SessionConfig::default()
        };
        assert!(c.validate(&sim).is_err());
        let c = SessionConfig {
            tick_hz: 10.0,
            mode: SessionMode::ReplayTrajectory,
            replay: Some("x".into()),
            ..SessionConfig::default()
        };
        c.validate(&sim).unwrap();
        let c = SessionConfig {
            mode: SessionMode::TelemetryOnly,
            ..SessionConfig::default()
        };
        assert!(c.validate(&sim).is_err());
        let c = SessionConfig {
            mode: SessionMode::ReplayTrajectory,
            ..SessionConfig::default()
        };
        assert!(c.validate(&sim).is_err());
        let c = SessionConfig {
            client_queue: 0,
            ..SessionConfig::default()
        };
        assert!(c.validate(&sim).is_err());
    }
}
