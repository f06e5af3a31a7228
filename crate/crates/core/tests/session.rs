mod common;

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, UdpSocket};
use std::sync::Arc;
use std::time::Duration;

use tutor_core::bc::{Policy, DEFAULT_LAYER_SIZES};
use tutor_core::eval::{eval_tasks, expert_pilot, rollout, synthesize_student, Flaw, Trajectory};
use tutor_core::expert::{ExpertGains, TaskSpec};
use tutor_core::flightdyn::{ControlInput, SimParams};
use tutor_core::seeds::stream;
use tutor_core::session::protocol::{decode_server, EndReason, ServerMessage};
use tutor_core::session::{
    replay_log, ClientEvent, NoClient, Server, Session, SessionConfig, SessionLog, SessionMode, StateSource,
    TelemetryPacket,
};
use tutor_core::tutor::ErrorKind;
use tutor_core::Error;

fn zero_policy() -> Arc<Policy> {
    Arc::new(Policy::zeros(&DEFAULT_LAYER_SIZES))
}

fn fast(mode: SessionMode) -> SessionConfig {
    SessionConfig {
        mode,
        fast: true,
        listen: "127.0.0.1:0".into(),
        replay: (mode == SessionMode::ReplayTrajectory).then(|| "unused".into()),
        telemetry_listen: (mode == SessionMode::TelemetryOnly).then(|| "127.0.0.1:0".into()),
        ..SessionConfig::default()
    }
}

fn count<F: Fn(&ServerMessage) -> bool>(msgs: &[ServerMessage], f: F) -> usize {
    msgs.iter().filter(|m| f(m)).count()
}

fn end_summary(msgs: &[ServerMessage]) -> &tutor_core::session::protocol::SessionSummary {
    match msgs.last() {
        Some(ServerMessage::End { summary }) => summary,
        other => panic!("last message is not end: {other:?}"),
    }
}

fn expert_trajectory(task: &TaskSpec) -> Trajectory {
    rollout(expert_pilot(ExpertGains::default(), *task), task, &SimParams::default()).unwrap()
}

fn overshooter_trajectory(task: &TaskSpec) -> Trajectory {
    let s = synthesize_student(&ExpertGains::default(), Flaw::Overshooter, 1.0, 5).unwrap();
    rollout(s.pilot(*task), task, &SimParams::default()).unwrap()
}

fn roll_events(log: &SessionLog) -> usize {
    log.events.iter().filter(|e| e.has(ErrorKind::RollDeviation)).count()
}

#[test]
fn live_session_runs_exact_tick_count_and_holds_input() {
    let sim = SimParams::default();
    let session = Session::new(fast(SessionMode::LiveSim), sim, zero_policy()).unwrap();
    let mut script: VecDeque<(usize, ClientEvent)> = VecDeque::from([
        (10, ClientEvent::Control(ControlInput::new(0.3, -0.2))),
        (50, ClientEvent::Malformed("malformed message: bad".into())),
        (100, ClientEvent::Control(ControlInput::new(0.0, 0.1))),
    ]);
    let mut sink = Vec::new();
    let log = session.run(StateSource::Simulator, &mut script, &mut sink).unwrap();

    let ticks = sim.ticks_for(session.task().duration);
    assert_eq!(ticks, 600);
    assert_eq!(log.points.len(), ticks);
    assert_eq!(log.events.len(), ticks);
    assert_eq!(count(&sink, |m| matches!(m, ServerMessage::State(_))), ticks);
    assert_eq!(count(&sink, |m| matches!(m, ServerMessage::Feedback(_))), ticks);
    assert_eq!(count(&sink, |m| matches!(m, ServerMessage::Error { .. })), 1);
    assert_eq!(end_summary(&sink).reason, EndReason::Completed);

    assert_eq!(log.points[9].control, ControlInput::NEUTRAL);
    // the malformed line at tick 50 leaves the held input alone
    for p in &log.points[10..100] {
        assert_eq!(p.control, ControlInput::new(0.3, -0.2));
    }
    assert_eq!(log.points[100].control, ControlInput::new(0.0, 0.1));
    for (k, p) in log.points.iter().enumerate() {
        assert!((p.state.t - k as f64 * sim.dt).abs() < 1e-9);
    }
}

#[test]
fn stop_and_disconnect_end_the_session() {
    let session = Session::new(fast(SessionMode::LiveSim), SimParams::default(), zero_policy()).unwrap();
    for (ev, reason) in [
        (ClientEvent::Stop, EndReason::Stopped),
        (ClientEvent::Disconnected, EndReason::Disconnected),
    ] {
        let mut script = VecDeque::from([(20, ev)]);
        let mut sink = Vec::new();
        let log = session.run(StateSource::Simulator, &mut script, &mut sink).unwrap();
        assert_eq!(log.points.len(), 20);
        assert_eq!(end_summary(&sink).reason, reason);
        assert_eq!(log.stats.unwrap().summary.reason, reason);
    }
}

#[test]
fn log_file_round_trips_and_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    let task = eval_tasks(1, 3, stream::EVAL, 20.0, &SimParams::default())[0];
    let traj = overshooter_trajectory(&task);
    let session = Session::new(
        fast(SessionMode::ReplayTrajectory),
        SimParams::default(),
        common::trained_policy(),
    )
    .unwrap()
    .log_to(&path);
    let log = session
        .run(StateSource::Replay(&traj), &mut NoClient, &mut Vec::new())
        .unwrap();
    let loaded = SessionLog::load(&path).unwrap();
    assert_eq!(loaded, log);
    assert_eq!(loaded.trajectory().unwrap().points, traj.points);

    let report = replay_log(&loaded).unwrap();
    assert!(report.is_exact(), "{:?}", report.divergences.first());
    assert_eq!(report.replayed, log.events);
    assert_eq!(report.events, traj.points.len());
}

#[test]
fn tampered_log_reports_divergent_fields() {
    let task = TaskSpec::default();
    let traj = expert_trajectory(&task);
    let session = Session::new(fast(SessionMode::ReplayTrajectory), SimParams::default(), zero_policy()).unwrap();
    let mut log = session
        .run(StateSource::Replay(&traj), &mut NoClient, &mut Vec::new())
        .unwrap();
    log.events[7].hint = "something else".into();
    log.events[9].agent_line.center_x += 1e-12;
    let report = replay_log(&log).unwrap();
    assert_eq!(report.divergences.len(), 2);
    assert_eq!(report.divergences[0].index, 7);
    assert_eq!(report.divergences[0].fields, vec!["hint".to_string()]);
    assert_eq!(report.divergences[1].fields, vec!["agent_line".to_string()]);
}

#[test]
fn corrupt_logs_are_rejected() {
    let task = TaskSpec {
        duration: 0.2,
        ..TaskSpec::default()
    };
    let traj = expert_trajectory(&task);
    let session = Session::new(fast(SessionMode::ReplayTrajectory), SimParams::default(), zero_policy()).unwrap();
    let log = session
        .run(StateSource::Replay(&traj), &mut NoClient, &mut Vec::new())
        .unwrap();
    let mut buf = Vec::new();
    log.write_to(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();

    let without_header = lines[1..].join("\n");
    assert!(SessionLog::read_from(without_header.as_bytes(), "x").is_err());
    let orphan_state = [&lines[..2], &lines[3..]].concat().join("\n");
    assert!(matches!(
        SessionLog::read_from(orphan_state.as_bytes(), "x"),
        Err(Error::Malformed { line: 3, .. })
    ));
    let bumped = text.replacen("\"version\":1", "\"version\":9", 1);
    assert!(matches!(
        SessionLog::read_from(bumped.as_bytes(), "x"),
        Err(Error::Schema { .. })
    ));
    // a log cut short before its stats line is still usable
    let truncated = lines[..lines.len() - 1].join("\n");
    let partial = SessionLog::read_from(truncated.as_bytes(), "x").unwrap();
    assert!(partial.stats.is_none());
    assert_eq!(partial.events, log.events);
}

#[test]
fn replayed_expert_raises_nothing_and_overshooter_raises_roll() {
    let p = SimParams::default();
    let session = Session::new(fast(SessionMode::ReplayTrajectory), p, common::trained_policy()).unwrap();
    for task in eval_tasks(5, 21, stream::EVAL, 30.0, &p) {
        let log = session
            .run(
                StateSource::Replay(&expert_trajectory(&task)),
                &mut NoClient,
                &mut Vec::new(),
            )
            .unwrap();
        assert!(log.events.iter().all(|e| e.flags.is_empty() && !e.active));
        let summary = log.stats.unwrap().summary;
        assert_eq!((summary.pitch_flags_raised, summary.roll_flags_raised), (0, 0));
    }
    let task = TaskSpec {
        target_heading: 25.0,
        ..TaskSpec::default()
    };
    let traj = overshooter_trajectory(&task);
    let first = session
        .run(StateSource::Replay(&traj), &mut NoClient, &mut Vec::new())
        .unwrap();
    assert!(roll_events(&first) >= 1);
    let second = session
        .run(StateSource::Replay(&traj), &mut NoClient, &mut Vec::new())
        .unwrap();
    assert_eq!(first.events, second.events);
}

#[test]
fn source_must_match_mode() {
    let session = Session::new(fast(SessionMode::LiveSim), SimParams::default(), zero_policy()).unwrap();
    let traj = expert_trajectory(&TaskSpec {
        duration: 1.0,
        ..TaskSpec::default()
    });
    assert!(session
        .run(StateSource::Replay(&traj), &mut NoClient, &mut Vec::new())
        .is_err());
}

#[test]
fn schema_mismatch_is_rejected() {
    let mut policy = Policy::zeros(&DEFAULT_LAYER_SIZES);
    policy.feature_schema = "other/v2".into();
    let r = Session::new(fast(SessionMode::LiveSim), SimParams::default(), Arc::new(policy));
    assert!(matches!(r, Err(Error::Schema { .. })));
}

fn packets(traj: &Trajectory) -> VecDeque<TelemetryPacket> {
    traj.points
        .iter()
        .map(|p| TelemetryPacket {
            t: p.state.t,
            heading: p.state.heading,
            altitude: p.state.altitude,
            airspeed: p.state.airspeed,
            pitch_att: p.state.pitch_att,
            roll_att: p.state.roll_att,
            control: p.control,
        })
        .collect()
}

#[test]
fn telemetry_session_completes_at_task_duration() {
    let task = TaskSpec {
        duration: 5.0,
        ..TaskSpec::default()
    };
    let mut long = expert_trajectory(&TaskSpec { duration: 8.0, ..task });
    long.task = task;
    let mut tel = packets(&long);
    // a stale duplicate is ignored
    tel.insert(3, tel[2]);
    let config = SessionConfig {
        task,
        ..fast(SessionMode::TelemetryOnly)
    };
    let session = Session::new(config, SimParams::default(), common::trained_policy()).unwrap();
    let mut sink = Vec::new();
    let log = session
        .run(StateSource::Telemetry(&mut tel), &mut NoClient, &mut sink)
        .unwrap();
    assert_eq!(end_summary(&sink).reason, EndReason::Completed);
    assert_eq!(log.points.len(), 101);
    assert!(log.events.iter().all(|e| !e.active));
    assert!(replay_log(&log).unwrap().is_exact());
}

#[test]
fn telemetry_silence_times_out_with_error_event() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let traj = expert_trajectory(&TaskSpec {
        duration: 1.0,
        ..TaskSpec::default()
    });
    let mut tel = packets(&traj);
    let config = SessionConfig {
        telemetry_timeout: 0.2,
        ..fast(SessionMode::TelemetryOnly)
    };
    let session = Session::new(config, SimParams::default(), zero_policy())
        .unwrap()
        .log_to(&path);
    let mut sink = Vec::new();
    let err = session
        .run(StateSource::Telemetry(&mut tel), &mut NoClient, &mut sink)
        .unwrap_err();
    assert!(matches!(err, Error::TelemetryTimeout(_)));
    let n = sink.len();
    assert!(matches!(&sink[n - 2], ServerMessage::Error { message } if message.contains("telemetry")));
    assert_eq!(end_summary(&sink).reason, EndReason::TelemetryTimeout);
    let log = SessionLog::load(&path).unwrap();
    assert_eq!(log.points.len(), 20);
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: std::net::SocketAddr) -> Self {
        let stream = TcpStream::connect(addr).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
        Self {
            reader: BufReader::new(stream.try_clone().unwrap()),
            writer: stream,
        }
    }

    fn send(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    fn recv(&mut self) -> Option<ServerMessage> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) | Err(_) => None,
            Ok(_) => Some(decode_server(&line).unwrap()),
        }
    }

    /// Reads until the end message or the connection closes.
    fn recv_session(&mut self) -> Vec<ServerMessage> {
        let mut out = Vec::new();
        while let Some(m) = self.recv() {
            let end = matches!(m, ServerMessage::End { .. });
            out.push(m);
            if end {
                break;
            }
        }
        out
    }
}

#[test]
fn server_runs_a_live_session_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let config = SessionConfig {
        log_dir: Some(dir.path().to_path_buf()),
        ..fast(SessionMode::LiveSim)
    };
    let server = Server::bind(config, SimParams::default(), zero_policy())
        .unwrap()
        .spawn()
        .unwrap();
    let mut c = Client::connect(server.addr);
    c.send(r#"{"type":"control","t":0,"yp":0.1,"yr":0}"#);
    assert!(matches!(c.recv(), Some(ServerMessage::Error { message }) if message.contains("start")));
    c.send(r#"{"type":"banana"}"#);
    assert!(matches!(c.recv(), Some(ServerMessage::Error { message }) if message.contains("'banana'")));
    c.send(r#"{"type":"start","duration":1.0,"target_heading":90,"extra":true}"#);
    let msgs = c.recv_session();
    assert_eq!(
        count(
            &msgs,
            |m| matches!(m, ServerMessage::State(s) if s.target_heading == 90.0)
        ),
        20
    );
    assert_eq!(count(&msgs, |m| matches!(m, ServerMessage::Feedback(_))), 20);
    assert_eq!(end_summary(&msgs).ticks, 20);
    assert!(c.recv().is_none(), "connection closes after the session");
    server.shutdown().unwrap();

    let logs: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(logs.len(), 1);
    let log = SessionLog::load(logs[0].as_ref().unwrap().path()).unwrap();
    assert_eq!(log.task.target_heading, 90.0);
    assert!(replay_log(&log).unwrap().is_exact());
}

#[test]
fn real_time_pacing_follows_the_tick() {
    let config = SessionConfig {
        fast: false,
        ..fast(SessionMode::LiveSim)
    };
    let session = Session::new(config, SimParams::default(), zero_policy())
        .unwrap()
        .with_task(TaskSpec {
            duration: 1.0,
            ..TaskSpec::default()
        })
        .unwrap();
    let started = std::time::Instant::now();
    let log = session
        .run(StateSource::Simulator, &mut NoClient, &mut Vec::new())
        .unwrap();
    let wall = started.elapsed().as_secs_f64();
    assert_eq!(log.points.len(), 20);
    // 20 ticks at 20 Hz: the last one starts 0.95 s in
    assert!((0.9..2.0).contains(&wall), "{wall}");
    let stats = log.stats.unwrap();
    assert!(stats.tick_mean_us > 0.0 && stats.tick_max_us >= stats.tick_mean_us);
}

#[test]
fn controls_sent_mid_session_are_applied() {
    let config = SessionConfig {
        fast: false,
        ..fast(SessionMode::LiveSim)
    };
    let server = Server::bind(config, SimParams::default(), zero_policy())
        .unwrap()
        .spawn()
        .unwrap();
    let mut c = Client::connect(server.addr);
    c.send(r#"{"type":"start","duration":4.0}"#);
    // wait for the first tick, then pull hard
    assert!(matches!(c.recv(), Some(ServerMessage::State(_))));
    c.send(r#"{"type":"control","t":0.1,"yp":1.7,"yr":0}"#);
    c.send("{not json");
    let msgs = c.recv_session();
    assert_eq!(count(&msgs, |m| matches!(m, ServerMessage::Error { .. })), 1);
    let last_pitch = msgs.iter().rev().find_map(|m| match m {
        ServerMessage::State(s) => Some(s.pitch_att),
        _ => None,
    });
    assert_eq!(last_pitch, Some(SimParams::default().pitch_limit));
    // the clamped 1.7 shows up on the overlay as the student's full-up line
    let last_feedback = msgs.iter().rev().find_map(|m| match m {
        ServerMessage::Feedback(f) => Some(f.clone()),
        _ => None,
    });
    let f = last_feedback.unwrap();
    assert_eq!(f.student_line.center_y, 1.0);
    assert!(f.active && f.has(ErrorKind::PitchDeviation));
}

#[test]
fn concurrent_sessions_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let config = SessionConfig {
        log_dir: Some(dir.path().to_path_buf()),
        ..fast(SessionMode::LiveSim)
    };
    let server = Server::bind(config, SimParams::default(), common::trained_policy())
        .unwrap()
        .spawn()
        .unwrap();
    let addr = server.addr;
    let handles: Vec<_> = (0..4)
        .map(|i| {
            std::thread::spawn(move || {
                let mut c = Client::connect(addr);
                c.send(&format!(
                    r#"{{"type":"start","duration":3.0,"target_heading":{}}}"#,
                    10 * (i + 1)
                ));
                c.send(&format!(r#"{{"type":"control","t":0,"yp":0,"yr":{}}}"#, 0.2 * i as f64));
                c.recv_session()
            })
        })
        .collect();
    for (i, h) in handles.into_iter().enumerate() {
        let msgs = h.join().unwrap();
        assert_eq!(end_summary(&msgs).ticks, 60);
        let target = 10.0 * (i + 1) as f64;
        assert!(msgs
            .iter()
            .all(|m| !matches!(m, ServerMessage::State(s) if s.target_heading != target)));
    }
    server.shutdown().unwrap();
    let mut n = 0;
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let log = SessionLog::load(entry.unwrap().path()).unwrap();
        assert!(replay_log(&log).unwrap().is_exact());
        n += 1;
    }
    assert_eq!(n, 4);
}

#[test]
fn slow_client_loses_oldest_messages_but_not_log_lines() {
    let dir = tempfile::tempdir().unwrap();
    let config = SessionConfig {
        log_dir: Some(dir.path().to_path_buf()),
        client_queue: 8,
        ..fast(SessionMode::LiveSim)
    };
    let server = Server::bind(config, SimParams::default(), zero_policy())
        .unwrap()
        .spawn()
        .unwrap();
    let mut c = Client::connect(server.addr);
    // long enough to overrun the kernel socket buffers
    c.send(r#"{"type":"start","duration":600.0}"#);
    let path = loop {
        std::thread::sleep(Duration::from_millis(50));
        let entry = std::fs::read_dir(dir.path()).unwrap().next();
        if let Some(Ok(e)) = entry {
            let p = e.path();
            if SessionLog::load(&p).is_ok_and(|l| l.stats.is_some()) {
                break p;
            }
        }
    };
    let log = SessionLog::load(&path).unwrap();
    assert_eq!(log.events.len(), 12_000);
    let dropped = log.stats.unwrap().summary.dropped_messages;
    assert!(dropped > 0);
    let msgs = c.recv_session();
    assert!(msgs.len() < 24_001);
    // the newest messages survive
    assert!(matches!(msgs.last(), Some(ServerMessage::End { .. })));
    server.shutdown().unwrap();
}

#[test]
fn telemetry_over_udp_drives_the_tutor() {
    let task = TaskSpec {
        duration: 2.0,
        ..TaskSpec::default()
    };
    let config = SessionConfig {
        task,
        ..fast(SessionMode::TelemetryOnly)
    };
    let server = Server::bind(config, SimParams::default(), zero_policy())
        .unwrap()
        .spawn()
        .unwrap();
    let tel_addr = server.telemetry_addr.unwrap();
    let mut c = Client::connect(server.addr);
    c.send(r#"{"type":"start"}"#);
    // give the session a moment to pick up the socket
    std::thread::sleep(Duration::from_millis(200));
    let udp = UdpSocket::bind("127.0.0.1:0").unwrap();
    let traj = expert_trajectory(&task);
    udp.send_to(b"garbage", tel_addr).unwrap();
    for p in packets(&traj) {
        udp.send_to(p.encode().as_bytes(), tel_addr).unwrap();
        std::thread::sleep(Duration::from_millis(2));
    }
    let last = TelemetryPacket {
        t: 2.0,
        ..packets(&traj)[0]
    };
    udp.send_to(last.encode().as_bytes(), tel_addr).unwrap();
    let msgs = c.recv_session();
    let summary = end_summary(&msgs);
    assert_eq!(summary.reason, EndReason::Completed);
    assert!(summary.ticks >= 30, "{}", summary.ticks);
    server.shutdown().unwrap();
}

#[test]
fn second_bind_on_same_port_fails() {
    let first = Server::bind(fast(SessionMode::LiveSim), SimParams::default(), zero_policy()).unwrap();
    let addr = first.local_addr().unwrap();
    let config = SessionConfig {
        listen: addr.to_string(),
        ..fast(SessionMode::LiveSim)
    };
    assert!(matches!(
        Server::bind(config, SimParams::default(), zero_policy()),
        Err(Error::Bind { .. })
    ));
}

#[test]
fn shutdown_stops_running_sessions() {
    let config = SessionConfig {
        fast: false,
        ..fast(SessionMode::LiveSim)
    };
    let server = Server::bind(config, SimParams::default(), zero_policy())
        .unwrap()
        .spawn()
        .unwrap();
    let mut c = Client::connect(server.addr);
    c.send(r#"{"type":"start","duration":600}"#);
    assert!(matches!(c.recv(), Some(ServerMessage::State(_))));
    server.shutdown().unwrap();
    let msgs = c.recv_session();
    assert_eq!(end_summary(&msgs).reason, EndReason::Stopped);
}
