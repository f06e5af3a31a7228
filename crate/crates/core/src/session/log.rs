//! Session log files and replay verification.
//!
//! A log is newline-delimited JSON: one header line (config snapshot, task,
//! simulator constants and the policy itself), then a `state` line and a
//! `feedback` line per tick, then a closing `stats` line. Embedding the
//! policy keeps a log replayable after the policy file is retrained.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::protocol::SessionSummary;
use super::SessionConfig;
use crate::bc::Policy;
use crate::eval::{Trajectory, TrajectoryPoint};
use crate::expert::TaskSpec;
use crate::flightdyn::SimParams;
use crate::tutor::{FeedbackEvent, Tutor};
use crate::{Error, Result};

pub const SESSION_LOG_FORMAT: &str = "session-log";
pub const SESSION_LOG_VERSION: u32 = 1;

/// Wall-clock statistics of a finished session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub summary: SessionSummary,
    pub wall_seconds: f64,
    /// Processing time per tick, microseconds.
    pub tick_mean_us: f64,
    pub tick_max_us: f64,
    /// Ticks that finished after their wall-clock deadline.
    pub late_ticks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LogHeader {
    format: String,
    version: u32,
    config: SessionConfig,
    sim: SimParams,
    task: TaskSpec,
    policy: Policy,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Header(Box<LogHeader>),
    State(TrajectoryPoint),
    Feedback(FeedbackEvent),
    Stats(SessionStats),
}

/// Everything recorded about one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub config: SessionConfig,
    pub sim: SimParams,
    /// Task actually flown, after any client overrides.
    pub task: TaskSpec,
    pub policy: Policy,
    /// Student state and input at every tick.
    pub points: Vec<TrajectoryPoint>,
    /// Feedback for each point, same order.
    pub events: Vec<FeedbackEvent>,
    /// Missing if the session did not shut down cleanly.
    pub stats: Option<SessionStats>,
}

impl SessionLog {
    pub(crate) fn new(config: SessionConfig, sim: SimParams, task: TaskSpec, policy: Policy) -> Self {
        Self {
            config,
            sim,
            task,
            policy,
            points: Vec::new(),
            events: Vec::new(),
            stats: None,
        }
    }

    /// The student's flight as a trajectory, if any tick was recorded.
    pub fn trajectory(&self) -> Option<Trajectory> {
        let last = self.points.last()?;
        Trajectory::new(self.task, self.sim, self.points.clone(), &last.state).ok()
    }

    fn header(&self) -> LogLine {
        LogLine::Header(Box::new(LogHeader {
            format: SESSION_LOG_FORMAT.into(),
            version: SESSION_LOG_VERSION,
            config: self.config.clone(),
            sim: self.sim,
            task: self.task,
            policy: self.policy.clone(),
        }))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_line(w, &self.header())?;
        for (p, e) in self.points.iter().zip(&self.events) {
            write_line(w, &LogLine::State(*p))?;
            write_line(w, &LogLine::Feedback(e.clone()))?;
        }
        if let Some(s) = &self.stats {
            write_line(w, &LogLine::Stats(s.clone()))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), &path.display().to_string())
    }

    pub fn read_from(reader: impl BufRead, what: &str) -> Result<Self> {
        let malformed = |line: usize, message: String| Error::Malformed {
            what: what.to_string(),
            line,
            message,
        };
        let mut log: Option<SessionLog> = None;
        let mut pending: Option<TrajectoryPoint> = None;
        for (i, line) in reader.lines().enumerate() {
            let n = i + 1;
            let line = line.map_err(|e| malformed(n, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line).map_err(|e| malformed(n, e.to_string()))?;
            match (parsed, log.as_mut()) {
                (LogLine::Header(h), None) => {
                    if h.format != SESSION_LOG_FORMAT || h.version != SESSION_LOG_VERSION {
                        return Err(Error::Schema {
                            expected: format!("{SESSION_LOG_FORMAT} v{SESSION_LOG_VERSION}"),
                            found: format!("{} v{}", h.format, h.version),
                        });
                    }
                    let h = *h;
                    log = Some(SessionLog::new(h.config, h.sim, h.task, h.policy));
                }
                (_, None) => return Err(malformed(n, "first line must be the session header".into())),
                (LogLine::Header(_), Some(_)) => return Err(malformed(n, "duplicate header".into())),
                (_, Some(l)) if l.stats.is_some() => return Err(malformed(n, "line after stats".into())),
                (LogLine::State(p), Some(_)) => {
                    if pending.replace(p).is_some() {
                        return Err(malformed(n, "state line without feedback".into()));
                    }
                }
                (LogLine::Feedback(e), Some(l)) => {
                    let p = pending
                        .take()
                        .ok_or_else(|| malformed(n, "feedback line without state".into()))?;
                    l.points.push(p);
                    l.events.push(e);
                }
                (LogLine::Stats(s), Some(l)) => {
                    if pending.is_some() {
                        return Err(malformed(n, "state line without feedback".into()));
                    }
                    l.stats = Some(s);
                }
            }
        }
        if pending.is_some() {
            return Err(malformed(0, "log ends with a state line without feedback".into()));
        }
        log.ok_or_else(|| malformed(1, "empty session log".into()))
    }
}

fn write_line(w: &mut impl Write, line: &LogLine) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, line)?;
    w.write_all(b"\n")
}

/// Streams a session log to disk as ticks happen.
pub(crate) struct LogWriter {
    out: Option<(PathBuf, BufWriter<File>)>,
    pub(crate) log: SessionLog,
}

impl LogWriter {
    pub(crate) fn create(path: Option<&Path>, log: SessionLog) -> Result<Self> {
        let out = match path {
            Some(p) => {
                let file = File::create(p).map_err(|e| Error::io(&*p, e))?;
                let mut w = BufWriter::new(file);
                write_line(&mut w, &log.header()).map_err(|e| Error::io(&*p, e))?;
                Some((p.to_path_buf(), w))
            }
            None => None,
        };
        Ok(Self { out, log })
    }

    pub(crate) fn record(&mut self, point: TrajectoryPoint, event: FeedbackEvent) -> Result<()> {
        if let Some((p, w)) = &mut self.out {
            write_line(w, &LogLine::State(point))
                .and_then(|_| write_line(w, &LogLine::Feedback(event.clone())))
                .map_err(|e| Error::io(&*p, e))?;
        }
        self.log.points.push(point);
        self.log.events.push(event);
        Ok(())
    }

    pub(crate) fn finish(mut self, stats: SessionStats) -> Result<SessionLog> {
        if let Some((p, w)) = &mut self.out {
            write_line(w, &LogLine::Stats(stats.clone()))
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&*p, e))?;
        }
        self.log.stats = Some(stats);
        Ok(self.log)
    }
}

/// One logged event that replay did not reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub index: usize,
    pub t: f64,
    /// Names of the fields that differ.
    pub fields: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub events: usize,
    pub divergences: Vec<Divergence>,
    /// The re-computed events.
    pub replayed: Vec<FeedbackEvent>,
}

impl ReplayReport {
    pub fn is_exact(&self) -> bool {
        self.divergences.is_empty()
    }
}

/// Re-runs a fresh tutor over the logged states and inputs and compares
/// each event with the logged one.
pub fn replay_log(log: &SessionLog) -> Result<ReplayReport> {
    let mut tutor = Tutor::new(Arc::new(log.policy.clone()), log.config.thresholds, log.sim)?;
    let mut divergences = Vec::new();
    let mut replayed = Vec::with_capacity(log.events.len());
    for (index, (p, logged)) in log.points.iter().zip(&log.events).enumerate() {
        let ev = tutor.step(&p.state, &log.task, &p.control, p.state.t)?;
        if &ev != logged {
            divergences.push(Divergence {
                index,
                t: p.state.t,
                fields: differing_fields(logged, &ev),
            });
        }
        replayed.push(ev);
    }
    Ok(ReplayReport {
        events: log.events.len(),
        divergences,
        replayed,
    })
}

fn differing_fields(a: &FeedbackEvent, b: &FeedbackEvent) -> Vec<String> {
    let (Ok(Value::Object(a)), Ok(Value::Object(b))) = (serde_json::to_value(a), serde_json::to_value(b)) else {
        return vec!["event".into()];
    };
    a.iter()
        .filter(|(k, v)| b.get(k.as_str()) != Some(v))
        .map(|(k, _)| k.clone())
        .collect()
}
