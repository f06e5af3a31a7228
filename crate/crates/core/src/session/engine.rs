use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{Receiver, TryRecvError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::log::{LogWriter, SessionLog, SessionStats};
use super::protocol::{EndReason, ServerMessage, SessionSummary, StartMsg, StateMsg};
use super::telemetry::TelemetryPacket;
use super::{SessionConfig, SessionMode};
use crate::bc::Policy;
use crate::eval::{Trajectory, TrajectoryPoint};
use crate::expert::TaskSpec;
use crate::flightdyn::{heading_error, step, AircraftState, ControlInput, SimParams};
use crate::tutor::{ErrorKind, Tutor};
use crate::{Error, Result};

/// What a client did since the last tick.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientEvent {
    Control(ControlInput),
    Start(StartMsg),
    Stop,
    Disconnected,
    /// A line that failed to decode; the text is sent back as an error.
    Malformed(String),
}

/// Non-blocking source of client events, drained once per tick.
pub trait ControlSource {
    fn poll(&mut self, out: &mut Vec<ClientEvent>);
}

/// A session without a client, e.g. a replay run from the command line.
pub struct NoClient;

impl ControlSource for NoClient {
    fn poll(&mut self, _: &mut Vec<ClientEvent>) {}
}

impl ControlSource for Receiver<ClientEvent> {
    fn poll(&mut self, out: &mut Vec<ClientEvent>) {
        loop {
            match self.try_recv() {
                Ok(ev) => out.push(ev),
                Err(TryRecvError::Empty) => return,
                Err(TryRecvError::Disconnected) => {
                    out.push(ClientEvent::Disconnected);
                    return;
                }
            }
        }
    }
}

/// Scripted events: `(k, ev)` is delivered on the k-th poll from now.
impl ControlSource for VecDeque<(usize, ClientEvent)> {
    fn poll(&mut self, out: &mut Vec<ClientEvent>) {
        while let Some((0, _)) = self.front() {
            out.push(self.pop_front().unwrap().1);
        }
        for (k, _) in self.iter_mut() {
            *k = k.saturating_sub(1);
        }
    }
}

pub trait TelemetrySource {
    /// Next packet, or `None` if nothing arrived within `timeout`.
    fn recv(&mut self, timeout: Duration) -> Result<Option<TelemetryPacket>>;
}

impl TelemetrySource for VecDeque<TelemetryPacket> {
    fn recv(&mut self, timeout: Duration) -> Result<Option<TelemetryPacket>> {
        match self.pop_front() {
            Some(p) => Ok(Some(p)),
            None => {
                std::thread::sleep(timeout);
                Ok(None)
            }
        }
    }
}

/// Receives outgoing messages. Implementations must not block the tick.
pub trait EventSink {
    fn emit(&mut self, msg: ServerMessage);

    /// Messages discarded so far because the receiver fell behind.
    fn dropped(&self) -> u64 {
        0
    }
}

impl EventSink for Vec<ServerMessage> {
    fn emit(&mut self, msg: ServerMessage) {
        self.push(msg);
    }
}

/// Where each tick's aircraft state and student input come from.
pub enum StateSource<'a> {
    Simulator,
    Telemetry(&'a mut dyn TelemetrySource),
    Replay(&'a Trajectory),
}

/// A configured session, ready to run once.
#[derive(Debug, Clone)]
pub struct Session {
    config: SessionConfig,
    sim: SimParams,
    policy: Arc<Policy>,
    task: TaskSpec,
    log_file: Option<PathBuf>,
}

impl Session {
    pub fn new(config: SessionConfig, sim: SimParams, policy: Arc<Policy>) -> Result<Self> {
        config.validate(&sim)?;
        Tutor::new(policy.clone(), config.thresholds, sim)?;
        Ok(Self {
            task: config.task,
            config,
            sim,
            policy,
            log_file: None,
        })
    }

    /// Flies `task` instead of the configured one.
    pub fn with_task(mut self, task: TaskSpec) -> Result<Self> {
        task.validate()?;
        self.task = task;
        Ok(self)
    }

    pub fn log_to(mut self, path: impl AsRef<Path>) -> Self {
        self.log_file = Some(path.as_ref().to_path_buf());
        self
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    /// Runs the session to completion.
    ///
    /// Each tick drains client events (holding the last control), runs the
    /// tutor on the current state and input, emits a state and a feedback
    /// message, logs both, and only then advances the simulator.
    pub fn run(
        &self,
        source: StateSource<'_>,
        client: &mut dyn ControlSource,
        sink: &mut dyn EventSink,
    ) -> Result<SessionLog> {
        let expected = match source {
            StateSource::Simulator => SessionMode::LiveSim,
            StateSource::Telemetry(_) => SessionMode::TelemetryOnly,
            StateSource::Replay(_) => SessionMode::ReplayTrajectory,
        };
        if expected != self.config.mode {
            return Err(Error::invalid(format!(
                "session configured for {:?} but given a {:?} source",
                self.config.mode, expected
            )));
        }
        let task = match &source {
            StateSource::Replay(traj) => traj.task,
            _ => self.task,
        };
        let log = SessionLog::new(self.config.clone(), self.sim, task, (*self.policy).clone());
        let mut run = Runner {
            tutor: Tutor::new(self.policy.clone(), self.config.thresholds, self.sim)?,
            writer: LogWriter::create(self.log_file.as_deref(), log)?,
            sink,
            task,
            active: [false; 2],
            raised: [0; 2],
            last_state: None,
            started: Instant::now(),
            tick_total: Duration::ZERO,
            tick_max: Duration::ZERO,
            late: 0,
            events: Vec::new(),
        };
        match source {
            StateSource::Simulator => self.run_live(run, client),
            StateSource::Replay(traj) => {
                let reason = self.run_replay(&mut run, client, traj)?;
                run.finish(reason)
            }
            StateSource::Telemetry(tel) => self.run_telemetry(run, client, tel),
        }
    }

    fn pace(&self, run: &Runner, tick: usize) {
        if !self.config.fast {
            let due = run.started + Duration::from_secs_f64(tick as f64 * self.config.period());
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
    }

    fn run_live(&self, mut run: Runner, client: &mut dyn ControlSource) -> Result<SessionLog> {
        let ticks = self.sim.ticks_for(run.task.duration);
        let mut state = run.task.initial_state(&self.sim);
        let mut held = ControlInput::NEUTRAL;
        for k in 0..ticks {
            self.pace(&run, k);
            let t0 = Instant::now();
            if let Some(reason) = run.poll_client(client, &mut held) {
                return run.finish(reason);
            }
            run.tick(&state, &held)?;
            state = step(&state, &held, &self.sim);
            run.timed(t0, k + 1, self.config.period());
        }
        run.finish(EndReason::Completed)
    }

    fn run_replay(&self, run: &mut Runner, client: &mut dyn ControlSource, traj: &Trajectory) -> Result<EndReason> {
        // the replayed inputs are authoritative; client controls are ignored
        let mut ignored = ControlInput::NEUTRAL;
        for (k, p) in traj.points.iter().enumerate() {
            self.pace(run, k);
            let t0 = Instant::now();
            if let Some(reason) = run.poll_client(client, &mut ignored) {
                return Ok(reason);
            }
            run.tick(&p.state, &p.control)?;
            run.timed(t0, k + 1, self.config.period());
        }
        Ok(EndReason::Completed)
    }

    fn run_telemetry(
        &self,
        mut run: Runner,
        client: &mut dyn ControlSource,
        tel: &mut dyn TelemetrySource,
    ) -> Result<SessionLog> {
        let timeout = Duration::from_secs_f64(self.config.telemetry_timeout);
        let slice = timeout.min(Duration::from_millis(100));
        let mut prev: Option<TelemetryPacket> = None;
        let mut last_packet = Instant::now();
        let mut ignored = ControlInput::NEUTRAL;
        loop {
            if let Some(reason) = run.poll_client(client, &mut ignored) {
                return run.finish(reason);
            }
            let Some(pkt) = tel.recv(slice)? else {
                if last_packet.elapsed() >= timeout {
                    run.sink.emit(ServerMessage::error(format!(
                        "no telemetry packet for {} s, ending session",
                        self.config.telemetry_timeout
                    )));
                    run.finish(EndReason::TelemetryTimeout)?;
                    return Err(Error::TelemetryTimeout(self.config.telemetry_timeout));
                }
                continue;
            };
            last_packet = Instant::now();
            if prev.is_some_and(|p| pkt.t <= p.t) {
                continue;
            }
            let t0 = Instant::now();
            let state = pkt.state(prev.as_ref());
            run.tick(&state, &pkt.control)?;
            run.tick_total += t0.elapsed();
            run.tick_max = run.tick_max.max(t0.elapsed());
            prev = Some(pkt);
            if pkt.t + 1e-9 >= run.task.duration {
                return run.finish(EndReason::Completed);
            }
        }
    }
}

/// Per-run mutable state shared by the three loops.
struct Runner<'a> {
    tutor: Tutor,
    writer: LogWriter,
    sink: &'a mut dyn EventSink,
    task: TaskSpec,
    active: [bool; 2],
    raised: [usize; 2],
    last_state: Option<AircraftState>,
    started: Instant,
    tick_total: Duration,
    tick_max: Duration,
    late: usize,
    events: Vec<ClientEvent>,
}

impl Runner<'_> {
    fn poll_client(&mut self, client: &mut dyn ControlSource, held: &mut ControlInput) -> Option<EndReason> {
        self.events.clear();
        client.poll(&mut self.events);
        for ev in self.events.drain(..) {
            match ev {
                ClientEvent::Control(c) => *held = c,
                ClientEvent::Start(_) => self.sink.emit(ServerMessage::error("session already started")),
                ClientEvent::Malformed(m) => self.sink.emit(ServerMessage::error(m)),
                ClientEvent::Stop => return Some(EndReason::Stopped),
                ClientEvent::Disconnected => return Some(EndReason::Disconnected),
            }
        }
        None
    }

    fn tick(&mut self, state: &AircraftState, control: &ControlInput) -> Result<()> {
        let ev = self.tutor.step(state, &self.task, control, state.t)?;
        for (i, kind) in [ErrorKind::PitchDeviation, ErrorKind::RollDeviation]
            .into_iter()
            .enumerate()
        {
            let now = ev.has(kind);
            if now && !self.active[i] {
                self.raised[i] += 1;
            }
            self.active[i] = now;
        }
        self.sink.emit(ServerMessage::State(StateMsg::new(state, &self.task)));
        self.sink.emit(ServerMessage::Feedback(ev.clone()));
        self.writer.record(
            TrajectoryPoint {
                state: *state,
                control: *control,
            },
            ev,
        )?;
        self.last_state = Some(*state);
        Ok(())
    }

    fn timed(&mut self, t0: Instant, ticks_done: usize, period: f64) {
        let spent = t0.elapsed();
        self.tick_total += spent;
        self.tick_max = self.tick_max.max(spent);
        if self.started.elapsed().as_secs_f64() > ticks_done as f64 * period {
            self.late += 1;
        }
    }

    fn finish(self, reason: EndReason) -> Result<SessionLog> {
        let ticks = self.writer.log.points.len();
        let summary = SessionSummary {
            reason,
            ticks,
            final_heading_error: self
                .last_state
                .map(|s| heading_error(s.heading, self.task.target_heading)),
            pitch_flags_raised: self.raised[0],
            roll_flags_raised: self.raised[1],
            dropped_messages: self.sink.dropped(),
        };
        let stats = SessionStats {
            summary: summary.clone(),
            wall_seconds: self.started.elapsed().as_secs_f64(),
            tick_mean_us: if ticks == 0 {
                0.0
            } else {
                self.tick_total.as_secs_f64() * 1e6 / ticks as f64
            },
            tick_max_us: self.tick_max.as_secs_f64() * 1e6,
            late_ticks: self.late,
        };
        self.sink.emit(ServerMessage::End { summary });
        self.writer.finish(stats)
    }
}
