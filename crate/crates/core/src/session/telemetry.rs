//! UDP telemetry from an external simulator.
//!
//! One ASCII packet per sample:
//! `TLM,<t>,<heading>,<altitude>,<airspeed>,<pitch_att>,<roll_att>,<yp>,<yr>`
//! with angles in degrees, altitude in meters and airspeed in m/s.

use std::io::ErrorKind;
use std::net::UdpSocket;
use std::time::Duration;

use super::engine::TelemetrySource;
use crate::flightdyn::{wrap_heading, AircraftState, ControlInput};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TelemetryPacket {
    pub t: f64,
    pub heading: f64,
    pub altitude: f64,
    pub airspeed: f64,
    pub pitch_att: f64,
    pub roll_att: f64,
    pub control: ControlInput,
}

impl TelemetryPacket {
    /// Aircraft state for this packet. Attitude rates are differenced
    /// against the previous packet, zero for the first one.
    pub fn state(&self, prev: Option<&TelemetryPacket>) -> AircraftState {
        let (pitch_rate, roll_rate) = match prev {
            Some(p) if self.t > p.t => (
                (self.pitch_att - p.pitch_att) / (self.t - p.t),
                (self.roll_att - p.roll_att) / (self.t - p.t),
            ),
            _ => (0.0, 0.0),
        };
        AircraftState {
            t: self.t,
            x: 0.0,
            y: 0.0,
            altitude: self.altitude,
            airspeed: self.airspeed,
            heading: wrap_heading(self.heading),
            pitch_att: self.pitch_att,
            roll_att: self.roll_att,
            pitch_rate,
            roll_rate,
        }
    }

    pub fn encode(&self) -> String {
        format!(
            "TLM,{},{},{},{},{},{},{},{}",
            self.t,
            self.heading,
            self.altitude,
            self.airspeed,
            self.pitch_att,
            self.roll_att,
            self.control.yoke_pitch,
            self.control.yoke_roll
        )
    }
}

pub fn parse_telemetry(text: &str) -> std::result::Result<TelemetryPacket, String> {
    let mut fields = text.trim().split(',');
    if fields.next() != Some("TLM") {
        return Err("telemetry packet must start with 'TLM'".into());
    }
    let values: Vec<f64> = fields
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad telemetry field '{f}': {e}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    if values.len() != 8 {
        return Err(format!("telemetry packet needs 8 values, got {}", values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("telemetry values must be finite".into());
    }
    Ok(TelemetryPacket {
        t: values[0],
        heading: values[1],
        altitude: values[2],
        airspeed: values[3],
        pitch_att: values[4],
        roll_att: values[5],
        control: ControlInput::new(values[6], values[7]),
    })
}

/// Telemetry read from a bound UDP socket. Malformed packets are skipped
/// and counted.
pub struct UdpTelemetry<'a> {
    socket: &'a UdpSocket,
    buf: Vec<u8>,
    pub malformed: u64,
}

impl<'a> UdpTelemetry<'a> {
    pub fn new(socket: &'a UdpSocket) -> Self {
        Self {
            socket,
            buf: vec![0; 2048],
            malformed: 0,
        }
    }

    /// Discards packets queued before the session started.
    pub fn drain_stale(&mut self) -> Result<()> {
        self.socket.set_nonblocking(true)?;
        while self.socket.recv(&mut self.buf).is_ok() {}
        self.socket.set_nonblocking(false)?;
        Ok(())
    }
}

impl TelemetrySource for UdpTelemetry<'_> {
    fn recv(&mut self, timeout: Duration) -> Result<Option<TelemetryPacket>> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            self.socket.set_read_timeout(Some(left))?;
            match self.socket.recv(&mut self.buf) {
                Ok(n) => match std::str::from_utf8(&self.buf[..n])
                    .map_err(|e| e.to_string())
                    .and_then(parse_telemetry)
                {
                    Ok(p) => return Ok(Some(p)),
                    Err(_) => self.malformed += 1,
                },
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => return Ok(None),
                Err(e) => return Err(e.into()),
            }
        }
    }
}
