//! Closed-loop rollouts, the average heading error metric, the deployment
//! gate, and synthetic flawed students.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bc::{forward, train, Policy, TrainConfig, TrainingCurve};
use crate::dataset::featurize;
use crate::dataset::Dataset;
use crate::expert::{expert_policy, task_for_trial, ExpertGains, TaskSpec};
use crate::flightdyn::{heading_error, step, AircraftState, ControlInput, SimParams};
use crate::seeds::{self, stream};
use crate::{Error, Result};

pub const TRAJECTORY_FORMAT: &str = "trajectory";
pub const TRAJECTORY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub state: AircraftState,
    /// Control applied at `state`.
    pub control: ControlInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub final_heading_error: f64,
    pub mean_abs_altitude_error: f64,
    pub mean_abs_airspeed_error: f64,
}

/// A recorded flight at the simulation tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task: TaskSpec,
    pub sim: SimParams,
    pub points: Vec<TrajectoryPoint>,
    pub summary: TrajectorySummary,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryHeader {
    format: String,
    version: u32,
    task: TaskSpec,
    sim: SimParams,
}

impl Trajectory {
    /// Builds a trajectory, computing its summary. `final_state` is the state
    /// reached after the last recorded control.
    pub fn new(
        task: TaskSpec,
        sim: SimParams,
        points: Vec<TrajectoryPoint>,
        final_state: &AircraftState,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("trajectory has no points"));
        }
        let summary = summarize(&task, &points, final_state);
        Ok(Self {
            task,
            sim,
            points,
            summary,
        })
    }

    pub fn heading_errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.points
            .iter()
            .map(|p| heading_error(p.state.heading, self.task.target_heading))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let header = TrajectoryHeader {
            format: TRAJECTORY_FORMAT.into(),
            version: TRAJECTORY_VERSION,
            task: self.task,
            sim: self.sim,
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for p in &self.points {
            serde_json::to_writer(&mut *w, p)?;
            w.write_all(b"\n")?;
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
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| malformed(1, "empty trajectory file".into()))?
            .map_err(|e| malformed(1, e.to_string()))?;
        let header: TrajectoryHeader = serde_json::from_str(&header).map_err(|e| malformed(1, e.to_string()))?;
        if header.format != TRAJECTORY_FORMAT || header.version != TRAJECTORY_VERSION {
            return Err(Error::Schema {
                expected: format!("{TRAJECTORY_FORMAT} v{TRAJECTORY_VERSION}"),
                found: format!("{} v{}", header.format, header.version),
            });
        }
        let mut points: Vec<TrajectoryPoint> = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| malformed(i + 2, e.to_string()))?;
            let p: TrajectoryPoint = serde_json::from_str(&line).map_err(|e| malformed(i + 2, e.to_string()))?;
            if let Some(prev) = points.last() {
                if p.state.t <= prev.state.t {
                    return Err(malformed(i + 2, "time does not increase".into()));
                }
            }
            points.push(p);
        }
        let last = points
            .last()
            .ok_or_else(|| malformed(2, "trajectory has no points".into()))?;
        let final_state = step(&last.state, &last.control, &header.sim);
        Self::new(header.task, header.sim, points, &final_state)
    }
}

fn summarize(task: &TaskSpec, points: &[TrajectoryPoint], final_state: &AircraftState) -> TrajectorySummary {
    let n = points.len() as f64;
    TrajectorySummary {
        final_heading_error: heading_error(final_state.heading, task.target_heading),
        mean_abs_altitude_error: points
            .iter()
            .map(|p| (p.state.altitude - task.target_altitude).abs())
            .sum::<f64>()
            / n,
        mean_abs_airspeed_error: points
            .iter()
            .map(|p| (p.state.airspeed - task.target_airspeed).abs())
            .sum::<f64>()
            / n,
    }
}

/// Flies `pilot` from the task's trimmed initial state for `task.duration`
/// seconds, recording every tick.
pub fn rollout(
    mut pilot: impl FnMut(&AircraftState) -> ControlInput,
    task: &TaskSpec,
    params: &SimParams,
) -> Result<Trajectory> {
    task.validate()?;
    let ticks = params.ticks_for(task.duration).max(1);
    let mut state = task.initial_state(params);
    let mut points = Vec::with_capacity(ticks);
    for tick in 0..ticks {
        let control = pilot(&state);
        if !control.is_finite() {
            return Err(Error::NonFiniteAction { tick });
        }
        let control = ControlInput::new(control.yoke_pitch, control.yoke_roll);
        points.push(TrajectoryPoint { state, control });
        state = step(&state, &control, params);
    }
    Trajectory::new(*task, *params, points, &state)
}

/// Average heading error over a batch of randomized rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `|heading error|` at each tick, per trial, degrees.
    pub per_trial: Vec<Vec<f64>>,
    pub tasks: Vec<TaskSpec>,
    pub avg_heading_error: f64,
    pub n_trials: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn trial_means(&self) -> Vec<f64> {
        self.per_trial.iter().map(|e| mean(e)).collect()
    }

    /// Tab-separated `trial, tick, error` rows.
    pub fn write_table(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "trial\ttick\theading_error")?;
        for (trial, errs) in self.per_trial.iter().enumerate() {
            for (tick, e) in errs.iter().enumerate() {
                writeln!(w, "{trial}\t{tick}\t{e}")?;
            }
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Evaluation tasks: a task stream disjoint from the demonstration stream.
pub fn eval_tasks(n_trials: usize, seed: u64, stream_tag: u64, duration: f64, params: &SimParams) -> Vec<TaskSpec> {
    (0..n_trials as u64)
        .map(|i| task_for_trial(seed, stream_tag, i, duration, params))
        .collect()
}

/// Mean over trials of the per-tick mean `|heading error|`.
///
/// `make_pilot` is called once per task and returns that trial's pilot.
pub fn avg_heading_error<P>(
    mut make_pilot: impl FnMut(&TaskSpec) -> P,
    n_trials: usize,
    seed: u64,
    duration: f64,
    params: &SimParams,
) -> Result<EvalReport>
where
    P: FnMut(&AircraftState) -> ControlInput,
{
    avg_heading_error_on(
        &mut make_pilot,
        eval_tasks(n_trials, seed, stream::EVAL, duration, params),
        seed,
        params,
    )
}

/// [`avg_heading_error`] on an explicit task list.
pub fn avg_heading_error_on<P>(
    make_pilot: &mut impl FnMut(&TaskSpec) -> P,
    tasks: Vec<TaskSpec>,
    seed: u64,
    params: &SimParams,
) -> Result<EvalReport>
where
    P: FnMut(&AircraftState) -> ControlInput,
{
    if tasks.is_empty() {
        return Err(Error::invalid("n_trials must be >= 1"));
    }
    let mut per_trial = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let traj = rollout(make_pilot(task), task, params)?;
        per_trial.push(traj.heading_errors().map(f64::abs).collect::<Vec<_>>());
    }
    let avg = mean(&per_trial.iter().map(|e| mean(e)).collect::<Vec<_>>());
    Ok(EvalReport {
        n_trials: tasks.len(),
        per_trial,
        tasks,
        avg_heading_error: avg,
        seed,
    })
}

/// Pilot flying a trained policy on a fixed task.
pub fn policy_pilot<'a>(
    policy: &'a Policy,
    task: TaskSpec,
    params: SimParams,
) -> impl FnMut(&AircraftState) -> ControlInput + 'a {
    move |s: &AircraftState| match forward(policy, &featurize(s, &task, &params)) {
        Ok(c) => c,
        Err(_) => ControlInput {
            yoke_pitch: f64::NAN,
            yoke_roll: f64::NAN,
        },
    }
}

/// Pilot flying the scripted expert on a fixed task.
pub fn expert_pilot(gains: ExpertGains, task: TaskSpec) -> impl FnMut(&AircraftState) -> ControlInput {
    move |s: &AircraftState| expert_policy(s, &task, &gains)
}

/// Heading-error metric for a trained policy.
pub fn evaluate_policy(
    policy: &Policy,
    n_trials: usize,
    seed: u64,
    duration: f64,
    params: &SimParams,
) -> Result<EvalReport> {
    policy.check_schema()?;
    avg_heading_error(|t| policy_pilot(policy, *t, *params), n_trials, seed, duration, params)
}

/// Trains with early stopping on the average heading error over
/// `config.eval_trials` held-out rollouts. The held-out tasks come from their
/// own seed stream, disjoint from both demonstrations and evaluation.
pub fn train_policy(dataset: &Dataset, config: &TrainConfig) -> Result<(Policy, TrainingCurve)> {
    config.validate()?;
    let params = dataset.meta.sim;
    let tasks = eval_tasks(
        config.eval_trials,
        config.seed,
        stream::TRAIN_EVAL,
        config.eval_duration,
        &params,
    );
    train(dataset, config, &mut |policy| {
        let report = avg_heading_error_on(
            &mut |t| policy_pilot(policy, *t, params),
            tasks.clone(),
            config.seed,
            &params,
        )?;
        Ok(report.avg_heading_error)
    })
}

/// Agreement between a policy and the expert on unseen tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionAgreement {
    /// Mean per-tick `|a_policy - a_expert|` while the policy flies.
    pub mean_distance: f64,
    pub max_distance: f64,
    pub ticks: usize,
}

/// Flies the policy and queries the expert on every visited state.
pub fn action_agreement(
    policy: &Policy,
    gains: &ExpertGains,
    n_trials: usize,
    seed: u64,
    duration: f64,
    params: &SimParams,
) -> Result<ActionAgreement> {
    policy.check_schema()?;
    let mut total = 0.0;
    let mut max: f64 = 0.0;
    let mut ticks = 0usize;
    for task in eval_tasks(n_trials, seed, stream::EVAL, duration, params) {
        let traj = rollout(policy_pilot(policy, task, *params), &task, params)?;
        for p in &traj.points {
            let d = p.control.distance(&expert_policy(&p.state, &task, gains));
            total += d;
            max = max.max(d);
            ticks += 1;
        }
    }
    if ticks == 0 {
        return Err(Error::invalid("n_trials must be >= 1"));
    }
    Ok(ActionAgreement {
        mean_distance: total / ticks as f64,
        max_distance: max,
        ticks,
    })
}

/// Thresholds a trained policy must meet before it may tutor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeploymentGate {
    pub trials: usize,
    pub seed: u64,
    /// Upper bound on the average heading error, degrees.
    pub max_avg_heading_error: f64,
    /// Upper bound on the mean action distance to the expert.
    pub max_action_distance: f64,
}

impl Default for DeploymentGate {
    fn default() -> Self {
        Self {
            trials: 10,
            seed: 2024,
            max_avg_heading_error: 5.0,
            max_action_distance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutcome {
    pub report: EvalReport,
    pub agreement: ActionAgreement,
    pub passed: bool,
}

impl DeploymentGate {
    pub fn check(
        &self,
        policy: &Policy,
        gains: &ExpertGains,
        duration: f64,
        params: &SimParams,
    ) -> Result<GateOutcome> {
        let report = evaluate_policy(policy, self.trials, self.seed, duration, params)?;
        let agreement = action_agreement(policy, gains, self.trials, self.seed, duration, params)?;
        let passed =
            report.avg_heading_error < self.max_avg_heading_error && agreement.mean_distance < self.max_action_distance;
        Ok(GateOutcome {
            report,
            agreement,
            passed,
        })
    }
}

/// The two student error categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flaw {
    /// Lets altitude and airspeed wander: weak pitch control plus drift.
    PitchNeglect,
    /// Banks too aggressively without damping and flies through the target.
    Overshooter,
}

impl std::str::FromStr for Flaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "pitchneglect" => Ok(Flaw::PitchNeglect),
            "overshooter" => Ok(Flaw::Overshooter),
            _ => Err(Error::invalid(format!(
                "unknown flaw '{s}' (expected pitch-neglect or overshooter)"
            ))),
        }
    }
}

/// Peak pitch drift at severity 1, yoke units.
const DRIFT_AMPLITUDE: f64 = 0.35;

/// A perturbed copy of the expert standing in for a student pilot.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStudent {
    pub flaw: Flaw,
    pub severity: f64,
    pub gains: ExpertGains,
    pitch_scale: f64,
    drift: [(f64, f64, f64); 2],
}

impl SyntheticStudent {
    pub fn action(&self, state: &AircraftState, task: &TaskSpec) -> ControlInput {
        let pitch = self.gains.pitch_command(state, task) * self.pitch_scale + self.drift(state.t);
        ControlInput::new(pitch, self.gains.roll_command(state, task))
    }

    /// Low-frequency pitch disturbance at time `t`, yoke units.
    pub fn drift(&self, t: f64) -> f64 {
        self.drift
            .iter()
            .map(|(amp, freq, phase)| amp * (TAU * freq * t + phase).sin())
            .sum()
    }

    pub fn pilot(&self, task: TaskSpec) -> impl FnMut(&AircraftState) -> ControlInput + '_ {
        move |s: &AircraftState| self.action(s, &task)
    }
}

/// Builds a flawed student from the expert's gains.
///
/// `PitchNeglect` scales the pitch command by `1 - severity` and adds a
/// seeded two-tone drift (periods around 20 s and 9 s). `Overshooter`
/// multiplies the heading-to-bank gain by `1 + 2 severity` and scales the
/// roll damping by `1 - severity`.
pub fn synthesize_student(base: &ExpertGains, flaw: Flaw, severity: f64, seed: u64) -> Result<SyntheticStudent> {
    if !(severity > 0.0 && severity <= 1.0) {
        return Err(Error::invalid(format!("severity must be in (0, 1], got {severity}")));
    }
    let mut gains = *base;
    let mut pitch_scale = 1.0;
    let mut drift = [(0.0, 0.0, 0.0); 2];
    match flaw {
        Flaw::PitchNeglect => {
            pitch_scale = 1.0 - severity;
            let mut rng = seeds::rng(seeds::derive(seed, stream::STUDENT, 0));
            drift = [
                (0.7 * DRIFT_AMPLITUDE * severity, 0.05, rng.random_range(0.0..TAU)),
                (0.3 * DRIFT_AMPLITUDE * severity, 0.11, rng.random_range(0.0..TAU)),
            ];
        }
        Flaw::Overshooter => {
            gains.k_hdg_to_bank *= 1.0 + 2.0 * severity;
            gains.k_roll_d *= 1.0 - severity;
        }
    }
    Ok(SyntheticStudent {
        flaw,
        severity,
        gains,
        pitch_scale,
        drift,
    })
}
