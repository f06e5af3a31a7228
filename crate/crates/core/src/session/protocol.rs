//! Newline-delimited JSON messages exchanged with a session client.
//!
//! Every message is one JSON object on one line with a `type` key. Unknown
//! keys are ignored so that clients can grow; unknown types are rejected.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::expert::TaskSpec;
use crate::flightdyn::{AircraftState, ControlInput};
use crate::tutor::FeedbackEvent;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ProtocolError(pub String);

/// Yoke command from the student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlMsg {
    /// Client clock, informational only.
    pub t: f64,
    pub yp: f64,
    pub yr: f64,
    /// Set when a value had to be clamped into `[-1, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl ControlMsg {
    pub fn control(&self) -> ControlInput {
        ControlInput::new(self.yp, self.yr)
    }
}

/// Task overrides for a new session. Absent fields keep the configured task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StartMsg {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_heading: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_heading: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_altitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_airspeed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl StartMsg {
    pub fn apply(&self, base: &TaskSpec) -> TaskSpec {
        TaskSpec {
            initial_heading: self.initial_heading.unwrap_or(base.initial_heading),
            target_heading: self.target_heading.unwrap_or(base.target_heading),
            target_altitude: self.target_altitude.unwrap_or(base.target_altitude),
            target_airspeed: self.target_airspeed.unwrap_or(base.target_airspeed),
            duration: self.duration.unwrap_or(base.duration),
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateMsg {
    pub t: f64,
    pub heading: f64,
    pub altitude: f64,
    pub airspeed: f64,
    pub pitch_att: f64,
    pub roll_att: f64,
    pub target_heading: f64,
}

impl StateMsg {
    pub fn new(state: &AircraftState, task: &TaskSpec) -> Self {
        Self {
            t: state.t,
            heading: state.heading,
            altitude: state.altitude,
            airspeed: state.airspeed,
            pitch_att: state.pitch_att,
            roll_att: state.roll_att,
            target_heading: task.target_heading,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    /// Task duration reached.
    Completed,
    /// Client sent `stop` or the server is shutting down.
    Stopped,
    Disconnected,
    TelemetryTimeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub reason: EndReason,
    pub ticks: usize,
    /// Heading error at the last tick, degrees; absent if no tick ran.
    pub final_heading_error: Option<f64>,
    /// Number of times each flag kind was raised.
    pub pitch_flags_raised: usize,
    pub roll_flags_raised: usize,
    /// Messages the client was too slow to receive.
    pub dropped_messages: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Control(ControlMsg),
    Start(StartMsg),
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State(StateMsg),
    Feedback(FeedbackEvent),
    End { summary: SessionSummary },
    Error { message: String },
}

impl ServerMessage {
    pub fn error(message: impl Into<String>) -> Self {
        ServerMessage::Error {
            message: message.into(),
        }
    }
}

const CLIENT_TYPES: [&str; 3] = ["control", "start", "stop"];
const SERVER_TYPES: [&str; 4] = ["state", "feedback", "end", "error"];

/// One line of text, without the trailing newline.
pub fn encode<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("protocol messages always serialize")
}

/// Parses a client line. Out-of-range yoke values are clamped and reported in
/// the message's `warning`.
pub fn decode_client(line: &str) -> Result<ClientMessage, ProtocolError> {
    let mut msg: ClientMessage = decode_typed(line, &CLIENT_TYPES)?;
    if let ClientMessage::Control(c) = &mut msg {
        let mut notes = Vec::new();
        for (name, v) in [("yp", &mut c.yp), ("yr", &mut c.yr)] {
            if !v.is_finite() {
                return Err(ProtocolError(format!("control field {name} must be finite")));
            }
            if v.abs() > 1.0 {
                let clamped = v.clamp(-1.0, 1.0);
                notes.push(format!("{name} {} clamped to {clamped}", *v));
                *v = clamped;
            }
        }
        if !notes.is_empty() {
            c.warning = Some(notes.join("; "));
        }
    }
    Ok(msg)
}

pub fn decode_server(line: &str) -> Result<ServerMessage, ProtocolError> {
    decode_typed(line, &SERVER_TYPES)
}

fn decode_typed<T: DeserializeOwned>(line: &str, known: &[&str]) -> Result<T, ProtocolError> {
    let value: Value =
        serde_json::from_str(line.trim()).map_err(|e| ProtocolError(format!("malformed message: {e}")))?;
    let ty = match value.get("type") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ProtocolError("message field 'type' must be a string".into())),
        None if value.is_object() => return Err(ProtocolError("message has no 'type' field".into())),
        None => return Err(ProtocolError("malformed message: expected a JSON object".into())),
    };
    if !known.contains(&ty.as_str()) {
        return Err(ProtocolError(format!("unknown message type '{ty}'")));
    }
    serde_json::from_value(value).map_err(|e| ProtocolError(format!("malformed {ty} message: {e}")))
}
