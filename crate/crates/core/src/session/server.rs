//! TCP session server: one session per connection.
//!
//! Each connection gets three threads. A reader decodes lines into an ordered
//! channel, the session thread owns the tutor and runs the tick loop, and a
//! writer drains a bounded queue to the socket. When the client reads too
//! slowly the queue drops its oldest message, so the tick never waits on the
//! network.

use std::io::{BufRead, BufReader, BufWriter, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle, Thread};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crossbeam_queue::ArrayQueue;

use super::engine::{ClientEvent, ControlSource, EventSink, Session, StateSource};
use super::protocol::{decode_client, encode, ClientMessage, ServerMessage};
use super::telemetry::UdpTelemetry;
use super::{SessionConfig, SessionMode};
use crate::bc::Policy;
use crate::eval::Trajectory;
use crate::flightdyn::SimParams;
use crate::{Error, Result};

const ACCEPT_POLL: Duration = Duration::from_millis(20);
const HANDSHAKE_POLL: Duration = Duration::from_millis(100);

/// Read-only state shared by all connections.
struct Shared {
    config: SessionConfig,
    sim: SimParams,
    policy: Arc<Policy>,
    replay: Option<Trajectory>,
    telemetry: Option<Mutex<UdpSocket>>,
    /// Distinguishes log files of different server runs.
    run_id: u64,
}

pub struct Server {
    listener: TcpListener,
    telemetry_addr: Option<SocketAddr>,
    shared: Arc<Shared>,
}

impl Server {
    /// Validates the configuration and binds the session port (and the
    /// telemetry port in telemetry mode).
    pub fn bind(config: SessionConfig, sim: SimParams, policy: Arc<Policy>) -> Result<Self> {
        Session::new(config.clone(), sim, policy.clone())?;
        let listener = TcpListener::bind(&config.listen).map_err(|source| Error::Bind {
            addr: config.listen.clone(),
            source,
        })?;
        let telemetry = match (&config.mode, &config.telemetry_listen) {
            (SessionMode::TelemetryOnly, Some(addr)) => Some(UdpSocket::bind(addr).map_err(|source| Error::Bind {
                addr: addr.clone(),
                source,
            })?),
            _ => None,
        };
        let replay = match (&config.mode, &config.replay) {
            (SessionMode::ReplayTrajectory, Some(path)) => Some(Trajectory::load(path)?),
            _ => None,
        };
        if let Some(dir) = &config.log_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let telemetry_addr = telemetry.as_ref().map(|s| s.local_addr()).transpose()?;
        let run_id = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Ok(Self {
            listener,
            telemetry_addr,
            shared: Arc::new(Shared {
                config,
                sim,
                policy,
                replay,
                telemetry: telemetry.map(Mutex::new),
                run_id,
            }),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn telemetry_addr(&self) -> Option<SocketAddr> {
        self.telemetry_addr
    }

    /// Accepts connections until `shutdown` is set, then waits for the
    /// running sessions to stop.
    pub fn run(self, shutdown: Arc<AtomicBool>) -> Result<()> {
        self.listener.set_nonblocking(true)?;
        let mut sessions: Vec<JoinHandle<()>> = Vec::new();
        let mut next_id = 0u64;
        while !shutdown.load(Ordering::Relaxed) {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    next_id += 1;
                    let shared = self.shared.clone();
                    let stop = shutdown.clone();
                    let id = next_id;
                    sessions.push(thread::spawn(move || serve_connection(&shared, stream, id, &stop)));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => eprintln!("accept failed: {e}"),
            }
            sessions.retain(|h| !h.is_finished());
        }
        for h in sessions {
            let _ = h.join();
        }
        Ok(())
    }

    /// Runs the server on a background thread.
    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let telemetry_addr = self.telemetry_addr;
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = shutdown.clone();
        let thread = thread::spawn(move || self.run(flag));
        Ok(ServerHandle {
            addr,
            telemetry_addr,
            shutdown,
            thread: Some(thread),
        })
    }
}

/// A server running on a background thread. Dropping it shuts it down.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub telemetry_addr: Option<SocketAddr>,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) -> Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> Result<()> {
        self.shutdown.store(true, Ordering::Relaxed);
        match self.thread.take().map(|t| t.join()) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(Error::invalid("server thread panicked")),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

/// Client events plus a stop request once the server shuts down.
struct ClientChannel<'a> {
    rx: Receiver<ClientEvent>,
    shutdown: &'a AtomicBool,
}

impl ControlSource for ClientChannel<'_> {
    fn poll(&mut self, out: &mut Vec<ClientEvent>) {
        self.rx.poll(out);
        if self.shutdown.load(Ordering::Relaxed) {
            out.push(ClientEvent::Stop);
        }
    }
}

/// Drop-oldest outgoing queue drained by a writer thread.
struct QueueSink {
    queue: Arc<ArrayQueue<String>>,
    writer: Thread,
    dropped: u64,
}

impl EventSink for QueueSink {
    fn emit(&mut self, msg: ServerMessage) {
        if self.queue.force_push(encode(&msg)).is_some() {
            self.dropped += 1;
        }
        self.writer.unpark();
    }

    fn dropped(&self) -> u64 {
        self.dropped
    }
}

fn spawn_reader(stream: TcpStream, tx: mpsc::Sender<ClientEvent>) -> JoinHandle<()> {
    thread::spawn(move || {
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            let ev = match decode_client(&line) {
                Ok(ClientMessage::Control(c)) => ClientEvent::Control(c.control()),
                Ok(ClientMessage::Start(s)) => ClientEvent::Start(s),
                Ok(ClientMessage::Stop) => ClientEvent::Stop,
                Err(e) => ClientEvent::Malformed(e.0),
            };
            if tx.send(ev).is_err() {
                return;
            }
        }
        let _ = tx.send(ClientEvent::Disconnected);
    })
}

fn spawn_writer(stream: TcpStream, queue: Arc<ArrayQueue<String>>, done: Arc<AtomicBool>) -> JoinHandle<()> {
    thread::spawn(move || {
        let mut w = BufWriter::new(stream);
        let mut broken = false;
        loop {
            // read the flag first so nothing pushed before it is missed
            let finished = done.load(Ordering::Acquire);
            while let Some(line) = queue.pop() {
                if !broken {
                    broken = w.write_all(line.as_bytes()).and_then(|_| w.write_all(b"\n")).is_err();
                }
            }
            if !broken {
                broken = w.flush().is_err();
            }
            if finished {
                return;
            }
            thread::park_timeout(Duration::from_millis(50));
        }
    })
}

fn serve_connection(shared: &Shared, stream: TcpStream, id: u64, shutdown: &AtomicBool) {
    let _ = stream.set_nodelay(true);
    let (Ok(read_half), Ok(write_half)) = (stream.try_clone(), stream.try_clone()) else {
        return;
    };
    let (tx, rx) = mpsc::channel();
    let reader = spawn_reader(read_half, tx);
    let queue = Arc::new(ArrayQueue::new(shared.config.client_queue));
    let done = Arc::new(AtomicBool::new(false));
    let writer = spawn_writer(write_half, queue.clone(), done.clone());
    let mut sink = QueueSink {
        queue,
        writer: writer.thread().clone(),
        dropped: 0,
    };
    let mut client = ClientChannel { rx, shutdown };

    if let Err(e) = run_connection(shared, id, &mut client, &mut sink) {
        if !matches!(e, Error::TelemetryTimeout(_)) {
            sink.emit(ServerMessage::error(e.to_string()));
        }
        eprintln!("session {id}: {e}");
    }

    done.store(true, Ordering::Release);
    writer.thread().unpark();
    let _ = writer.join();
    let _ = stream.shutdown(Shutdown::Both);
    drop(client);
    let _ = reader.join();
}

fn run_connection(shared: &Shared, id: u64, client: &mut ClientChannel, sink: &mut QueueSink) -> Result<()> {
    let Some(session) = await_start(shared, client, sink)? else {
        return Ok(());
    };
    let session = match &shared.config.log_dir {
        Some(dir) => session.log_to(log_path(dir, shared.run_id, id)),
        None => session,
    };
    match shared.config.mode {
        SessionMode::LiveSim => session.run(StateSource::Simulator, client, sink)?,
        SessionMode::ReplayTrajectory => {
            let traj = shared.replay.as_ref().expect("replay loaded at bind");
            session.run(StateSource::Replay(traj), client, sink)?
        }
        SessionMode::TelemetryOnly => {
            let socket = shared.telemetry.as_ref().expect("telemetry bound at bind");
            let Ok(socket) = socket.try_lock() else {
                sink.emit(ServerMessage::error("telemetry source is in use by another session"));
                return Ok(());
            };
            let mut tel = UdpTelemetry::new(&socket);
            tel.drain_stale()?;
            session.run(StateSource::Telemetry(&mut tel), client, sink)?
        }
    };
    Ok(())
}

/// Waits for the client's `start` message. Returns `None` if the client
/// leaves first.
fn await_start(shared: &Shared, client: &mut ClientChannel, sink: &mut QueueSink) -> Result<Option<Session>> {
    loop {
        if client.shutdown.load(Ordering::Relaxed) {
            return Ok(None);
        }
        match client.rx.recv_timeout(HANDSHAKE_POLL) {
            Ok(ClientEvent::Start(start)) => {
                let task = start.apply(&shared.config.task);
                match Session::new(shared.config.clone(), shared.sim, shared.policy.clone())?.with_task(task) {
                    Ok(s) => return Ok(Some(s)),
                    Err(e) => sink.emit(ServerMessage::error(e.to_string())),
                }
            }
            Ok(ClientEvent::Control(_)) => sink.emit(ServerMessage::error("send a start message before controls")),
            Ok(ClientEvent::Malformed(m)) => sink.emit(ServerMessage::error(m)),
            Ok(ClientEvent::Stop | ClientEvent::Disconnected) | Err(RecvTimeoutError::Disconnected) => return Ok(None),
            Err(RecvTimeoutError::Timeout) => {}
        }
    }
}

fn log_path(dir: &std::path::Path, run_id: u64, id: u64) -> PathBuf {
    dir.join(format!("session-{run_id}-{id:04}.jsonl"))
}
