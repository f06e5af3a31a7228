use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tutor_core::bc::Policy;
use tutor_core::dataset::Dataset;
use tutor_core::eval::{expert_pilot, rollout, synthesize_student, train_policy, Flaw, GateOutcome};
use tutor_core::expert::{generate_demos, task_for_trial, TaskSpec, INITIAL_ALTITUDE};
use tutor_core::flightdyn::{heading_error, wrap_heading};
use tutor_core::seeds::stream;
use tutor_core::session::{replay_log, Server, SessionLog};
use tutor_core::tutor::ErrorKind;
use tutor_core::Error;

use crate::config::Config;
use crate::error::{CliError, CliResult, Exit};

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> CliResult<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

pub fn gen_demos(config: &Config, trials: usize, duration: f64, seed: u64, out: &Path) -> CliResult<Exit> {
    if trials == 0 {
        return Err(CliError::usage("--trials must be >= 1"));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(CliError::usage(format!("--duration must be > 0, got {duration}")));
    }
    let dataset = generate_demos(trials, duration, &config.expert, &config.sim, seed)?;
    dataset.save(out)?;
    let minutes = dataset.meta.tasks.iter().map(|t| t.duration).sum::<f64>() / 60.0;
    println!(
        "wrote {} samples from {} trials ({minutes:.1} min of flight) to {}",
        dataset.len(),
        dataset.n_trials(),
        out.display()
    );
    Ok(Exit::Ok)
}

pub fn train(config: &Config, data: &Path, out: &Path, seed: Option<u64>, curve: Option<PathBuf>) -> CliResult<Exit> {
    let dataset = Dataset::load(data)?;
    if dataset.meta.sim != config.sim {
        eprintln!(
            "note: training against the simulator constants stored in {}",
            data.display()
        );
    }
    let mut train_config = config.train;
    if let Some(s) = seed {
        train_config.seed = s;
    }
    let (policy, curve_data) = train_policy(&dataset, &train_config)?;
    policy.save(out)?;
    let curve_path = curve.unwrap_or_else(|| out.with_extension("curve.tsv"));
    write_file(&curve_path, |w| curve_data.write_table(w))?;
    let meta = &policy.meta;
    let opt = |v: Option<f64>, digits: usize| v.map_or("n/a".to_string(), |x| format!("{x:.digits$}"));
    println!(
        "best epoch {} of {}{}: train loss {:.6}, val loss {}, held-out heading error {} deg",
        meta.best_epoch,
        meta.epochs,
        if curve_data.stopped_early {
            " (stopped early)"
        } else {
            ""
        },
        meta.final_train_loss,
        opt(meta.final_val_loss, 6),
        opt(meta.best_eval_metric, 3)
    );
    println!("wrote {} and {}", out.display(), curve_path.display());
    Ok(Exit::Ok)
}

/// Plain-text evaluation report. Deterministic for a given policy and seed.
fn format_report(outcome: &GateOutcome, gate: &tutor_core::eval::DeploymentGate) -> String {
    let r = &outcome.report;
    let mut s =
        String::from("trial\tinitial_heading\ttarget_heading\toffset\tmean_abs_heading_error\tfinal_heading_error\n");
    for (i, (task, errs)) in r.tasks.iter().zip(&r.per_trial).enumerate() {
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let final_err = r.per_trial[i].last().copied().unwrap_or(0.0);
        let _ = writeln!(
            s,
            "{i}\t{:.4}\t{:.4}\t{:.4}\t{mean:.6}\t{final_err:.6}",
            task.initial_heading,
            task.target_heading,
            task.offset()
        );
    }
    let a = &outcome.agreement;
    let _ = writeln!(s, "avg_heading_error\t{:.6}", r.avg_heading_error);
    let _ = writeln!(s, "mean_action_distance\t{:.6}", a.mean_distance);
    let _ = writeln!(s, "max_action_distance\t{:.6}", a.max_distance);
    let _ = writeln!(
        s,
        "gate\t{}\t(avg_heading_error < {}, mean_action_distance < {})",
        if outcome.passed { "pass" } else { "fail" },
        gate.max_avg_heading_error,
        gate.max_action_distance
    );
    s
}

pub fn eval(
    config: &Config,
    policy_path: &Path,
    trials: Option<usize>,
    seed: Option<u64>,
    duration: f64,
    out: Option<&Path>,
    ticks: Option<&Path>,
) -> CliResult<Exit> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(CliError::usage(format!("--duration must be > 0, got {duration}")));
    }
    let mut gate = config.eval;
    if let Some(t) = trials {
        if t == 0 {
            return Err(CliError::usage("--trials must be >= 1"));
        }
        gate.trials = t;
    }
    if let Some(s) = seed {
        gate.seed = s;
    }
    let policy = Policy::load(policy_path)?;
    let outcome = gate.check(&policy, &config.expert, duration, &config.sim)?;
    let text = format_report(&outcome, &gate);
    print!("{text}");
    if let Some(p) = out {
        write_file(p, |w| w.write_all(text.as_bytes()))?;
    }
    if let Some(p) = ticks {
        write_file(p, |w| outcome.report.write_table(w))?;
    }
    Ok(if outcome.passed { Exit::Ok } else { Exit::GateFailed })
}

pub fn serve(mut config: Config, policy: Option<PathBuf>) -> CliResult<Exit> {
    if policy.is_some() {
        config.session.policy = policy;
    }
    let path = config
        .session
        .policy
        .clone()
        .ok_or_else(|| CliError::usage("serve needs --policy or session.policy"))?;
    let policy = Arc::new(Policy::load(&path)?);
    let server = Server::bind(config.session.clone(), config.sim, policy)?;
    println!("listening on {}", server.local_addr()?);
    if let Some(addr) = server.telemetry_addr() {
        println!("telemetry on udp {addr}");
    }
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = shutdown.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed))
        .map_err(|e| CliError::new(Exit::Failure, format!("cannot install interrupt handler: {e}")))?;
    server.run(shutdown)?;
    println!("server stopped");
    Ok(Exit::Ok)
}

pub fn replay(log_path: &Path, fast: bool) -> CliResult<Exit> {
    let log = SessionLog::load(log_path)?;
    let report = replay_log(&log)?;
    let period = Duration::from_secs_f64(1.0 / log.config.tick_hz);
    let kinds = [
        (ErrorKind::PitchDeviation, "pitch_deviation"),
        (ErrorKind::RollDeviation, "roll_deviation"),
    ];
    let mut prev = [false; 2];
    for ev in &report.replayed {
        if !fast {
            std::thread::sleep(period);
        }
        for (i, (kind, name)) in kinds.iter().enumerate() {
            let flag = ev.flags.iter().find(|f| f.kind == *kind);
            match (prev[i], flag) {
                (false, Some(f)) => println!(
                    "t={:.2}\traised {name}\t{:.3} >= {:.3}\t{}",
                    ev.t, f.magnitude, f.threshold, ev.hint
                ),
                (true, None) => println!("t={:.2}\tcleared {name}", ev.t),
                _ => {}
            }
            prev[i] = flag.is_some();
        }
    }
    println!(
        "replayed {} events from {}: {} divergent",
        report.events,
        log_path.display(),
        report.divergences.len()
    );
    for d in report.divergences.iter().take(20) {
        println!(
            "divergence at event {} (t={:.2}): {}",
            d.index,
            d.t,
            d.fields.join(", ")
        );
    }
    Ok(if report.is_exact() {
        Exit::Ok
    } else {
        Exit::ReplayDiverged
    })
}

pub fn synth_student(
    config: &Config,
    flaw: Option<Flaw>,
    severity: f64,
    seed: u64,
    duration: f64,
    heading: Option<(f64, f64)>,
    out: &Path,
) -> CliResult<Exit> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(CliError::usage(format!("--duration must be > 0, got {duration}")));
    }
    let sim = &config.sim;
    let task = match heading {
        Some((initial, target)) => TaskSpec {
            initial_heading: wrap_heading(initial),
            target_heading: wrap_heading(target),
            target_altitude: INITIAL_ALTITUDE,
            target_airspeed: sim.v_trim,
            duration,
            seed,
        },
        None => task_for_trial(seed, stream::STUDENT, 1, duration, sim),
    };
    let traj = match flaw {
        None => rollout(expert_pilot(config.expert, task), &task, sim)?,
        Some(f) => {
            let student = synthesize_student(&config.expert, f, severity, seed)?;
            rollout(student.pilot(task), &task, sim)?
        }
    };
    traj.save(out)?;
    let final_err = traj
        .points
        .last()
        .map_or(0.0, |p| heading_error(p.state.heading, task.target_heading));
    println!(
        "wrote {} ticks to {}: {:.1} -> {:.1} deg, final heading error {:.2} deg, mean |altitude error| {:.2} m",
        traj.points.len(),
        out.display(),
        task.initial_heading,
        task.target_heading,
        final_err,
        traj.summary.mean_abs_altitude_error
    );
    Ok(Exit::Ok)
}
