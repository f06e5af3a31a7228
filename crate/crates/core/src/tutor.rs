//! Shadow-mode tutor.
//!
//! The trained policy is queried on the student's own state every tick. Its
//! pitch and roll commands are compared with the student's:
//!
//! * pitch deviation when `|p_agent - p_student| >= d1`
//! * roll deviation when `|r_agent - r_student| >= d2`
//!
//! A deviation must persist for `min_flag_duration` before it is raised and
//! clears only once the difference falls below `clear_hysteresis` times its
//! threshold.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bc::{forward, Policy};
use crate::dataset::featurize;
use crate::expert::TaskSpec;
use crate::flightdyn::{AircraftState, ControlInput, SimParams};
use crate::{Error, Result};

/// Bank of a feedback line at full roll deflection, degrees.
pub const MAX_LINE_SLOPE_DEG: f64 = 45.0;

/// Slack on the persistence comparison so that an exact multiple of the tick
/// counts as reached.
const TIME_EPS: f64 = 1e-9;

/// What is compared between agent and student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonBasis {
    /// Raw yoke deflections.
    #[default]
    Yoke,
    /// Attitude each command would reach after one tick, normalized by the
    /// attitude limits.
    CommandedAttitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TutorThresholds {
    /// Pitch threshold, normalized units.
    pub d1: f64,
    /// Roll threshold, normalized units.
    pub d2: f64,
    /// Seconds a violation must persist before it is raised.
    pub min_flag_duration: f64,
    /// Fraction of the threshold below which a raised flag clears.
    pub clear_hysteresis: f64,
    pub basis: ComparisonBasis,
}

impl Default for TutorThresholds {
    fn default() -> Self {
        Self {
            d1: 0.15,
            d2: 0.20,
            min_flag_duration: 0.5,
            clear_hysteresis: 0.8,
            basis: ComparisonBasis::Yoke,
        }
    }
}

impl TutorThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.d1 >= 0.0 && self.d2 >= 0.0) {
            return Err(Error::invalid("tutor.d1 and tutor.d2 must be >= 0"));
        }
        if !(self.min_flag_duration >= 0.0 && self.min_flag_duration.is_finite()) {
            return Err(Error::invalid("tutor.min_flag_duration must be >= 0"));
        }
        if !(self.clear_hysteresis > 0.0 && self.clear_hysteresis <= 1.0) {
            return Err(Error::invalid("tutor.clear_hysteresis must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Altitude and airspeed not held.
    PitchDeviation,
    /// Heading overshoot.
    RollDeviation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorFlag {
    pub kind: ErrorKind,
    /// When the flag was raised (or detected, for stateless detection).
    pub t: f64,
    /// `|agent - student|` at that time.
    pub magnitude: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verification {
    OnTrack,
    OffTrack,
}

/// One line of the overlay. The center is `(roll, pitch)`; the line is
/// banked by `slope_angle` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackLine {
    pub center_x: f64,
    pub center_y: f64,
    pub slope_angle: f64,
}

impl FeedbackLine {
    fn from_values(pitch: f64, roll: f64) -> Self {
        let x = roll.clamp(-1.0, 1.0);
        let y = pitch.clamp(-1.0, 1.0);
        Self {
            center_x: x,
            center_y: y,
            slope_angle: x * MAX_LINE_SLOPE_DEG,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub t: f64,
    pub verification: Verification,
    /// Raised flags that have not cleared yet.
    pub flags: Vec<ErrorFlag>,
    pub hint: String,
    pub agent_line: FeedbackLine,
    pub student_line: FeedbackLine,
    /// Whether the overlay is shown.
    pub active: bool,
}

impl FeedbackEvent {
    pub fn has(&self, kind: ErrorKind) -> bool {
        self.flags.iter().any(|f| f.kind == kind)
    }
}

/// Stateless check of both deviation rules.
pub fn detect_errors(agent: &ControlInput, student: &ControlInput, th: &TutorThresholds, t: f64) -> Vec<ErrorFlag> {
    detect_values(
        (agent.yoke_pitch, agent.yoke_roll),
        (student.yoke_pitch, student.yoke_roll),
        th,
        t,
    )
}

fn detect_values(agent: (f64, f64), student: (f64, f64), th: &TutorThresholds, t: f64) -> Vec<ErrorFlag> {
    let mut flags = Vec::new();
    let dp = (agent.0 - student.0).abs();
    if dp >= th.d1 {
        flags.push(ErrorFlag {
            kind: ErrorKind::PitchDeviation,
            t,
            magnitude: dp,
            threshold: th.d1,
        });
    }
    let dr = (agent.1 - student.1).abs();
    if dr >= th.d2 {
        flags.push(ErrorFlag {
            kind: ErrorKind::RollDeviation,
            t,
            magnitude: dr,
            threshold: th.d2,
        });
    }
    flags
}

/// The `(pitch, roll)` pair compared under `basis`.
pub fn compared_values(
    state: &AircraftState,
    control: &ControlInput,
    basis: ComparisonBasis,
    params: &SimParams,
) -> (f64, f64) {
    match basis {
        ComparisonBasis::Yoke => (control.yoke_pitch, control.yoke_roll),
        ComparisonBasis::CommandedAttitude => {
            let pitch = (state.pitch_att + control.yoke_pitch * params.pitch_rate_gain * params.dt)
                .clamp(-params.pitch_limit, params.pitch_limit);
            let roll = (state.roll_att + control.yoke_roll * params.roll_rate_gain * params.dt)
                .clamp(-params.roll_limit, params.roll_limit);
            (pitch / params.pitch_limit, roll / params.roll_limit)
        }
    }
}

/// Debounce/hysteresis state of one flag kind.
#[derive(Debug, Clone, Default, PartialEq)]
struct FlagTracker {
    violating_since: Option<f64>,
    raised: Option<ErrorFlag>,
}

impl FlagTracker {
    fn update(&mut self, kind: ErrorKind, diff: f64, threshold: f64, t: f64, th: &TutorThresholds) {
        if self.raised.is_some() {
            if diff < th.clear_hysteresis * threshold {
                self.raised = None;
                self.violating_since = None;
            }
            return;
        }
        if diff >= threshold {
            let since = *self.violating_since.get_or_insert(t);
            if t - since + TIME_EPS >= th.min_flag_duration {
                self.raised = Some(ErrorFlag {
                    kind,
                    t,
                    magnitude: diff,
                    threshold,
                });
            }
        } else {
            self.violating_since = None;
        }
    }
}

/// Per-session tutor: a shared policy plus flag timers.
#[derive(Debug, Clone)]
pub struct Tutor {
    policy: Arc<Policy>,
    thresholds: TutorThresholds,
    params: SimParams,
    pitch: FlagTracker,
    roll: FlagTracker,
}

impl Tutor {
    pub fn new(policy: Arc<Policy>, thresholds: TutorThresholds, params: SimParams) -> Result<Self> {
        policy.check_schema()?;
        thresholds.validate()?;
        Ok(Self {
            policy,
            thresholds,
            params,
            pitch: FlagTracker::default(),
            roll: FlagTracker::default(),
        })
    }

    pub fn thresholds(&self) -> &TutorThresholds {
        &self.thresholds
    }

    pub fn policy(&self) -> &Arc<Policy> {
        &self.policy
    }

    /// Forgets all pending and raised flags.
    pub fn reset(&mut self) {
        self.pitch = FlagTracker::default();
        self.roll = FlagTracker::default();
    }

    /// The agent's action on `state`.
    pub fn agent_action(&self, state: &AircraftState, task: &TaskSpec) -> Result<ControlInput> {
        forward(&self.policy, &featurize(state, task, &self.params))
    }

    /// Compares the student's command with the agent's on the same state.
    pub fn step(
        &mut self,
        state: &AircraftState,
        task: &TaskSpec,
        student: &ControlInput,
        t: f64,
    ) -> Result<FeedbackEvent> {
        let agent = self.agent_action(state, task)?;
        Ok(self.step_with_agent(state, &agent, student, t))
    }

    /// Like [`Tutor::step`] with an externally computed agent action.
    pub fn step_with_agent(
        &mut self,
        state: &AircraftState,
        agent: &ControlInput,
        student: &ControlInput,
        t: f64,
    ) -> FeedbackEvent {
        let th = self.thresholds;
        let (pa, ra) = compared_values(state, agent, th.basis, &self.params);
        let (ps, rs) = compared_values(state, student, th.basis, &self.params);
        self.pitch
            .update(ErrorKind::PitchDeviation, (pa - ps).abs(), th.d1, t, &th);
        self.roll
            .update(ErrorKind::RollDeviation, (ra - rs).abs(), th.d2, t, &th);

        let flags: Vec<ErrorFlag> = [self.pitch.raised, self.roll.raised].into_iter().flatten().collect();
        let active = !flags.is_empty();
        FeedbackEvent {
            t,
            verification: if active {
                Verification::OffTrack
            } else {
                Verification::OnTrack
            },
            hint: hint_text(&flags, pa - ps, ra - rs),
            flags,
            agent_line: FeedbackLine::from_values(pa, ra),
            student_line: FeedbackLine::from_values(ps, rs),
            active,
        }
    }
}

const ON_TRACK_HINT: &str = "On track: holding heading and altitude. Keep this attitude.";

fn hint_text(flags: &[ErrorFlag], pitch_diff: f64, roll_diff: f64) -> String {
    if flags.is_empty() {
        return ON_TRACK_HINT.to_string();
    }
    let mut parts = Vec::with_capacity(2);
    for f in flags {
        parts.push(match (f.kind, pitch_diff >= 0.0, roll_diff >= 0.0) {
            (ErrorKind::PitchDeviation, true, _) => {
                "Altitude and airspeed are drifting: ease back on the yoke to raise the nose."
            }
            (ErrorKind::PitchDeviation, false, _) => {
                "Altitude and airspeed are drifting: ease the yoke forward to lower the nose."
            }
            (ErrorKind::RollDeviation, _, true) => {
                "Heading overshoot: roll right, you are banked too far left for the target heading."
            }
            (ErrorKind::RollDeviation, _, false) => {
                "Heading overshoot: roll left, you are banked too far right for the target heading."
            }
        });
    }
    parts.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bc::DEFAULT_LAYER_SIZES;
    use crate::expert::INITIAL_ALTITUDE;
    use proptest::prelude::*;

    fn zero_tutor(th: TutorThresholds) -> Tutor {
        Tutor::new(Arc::new(Policy::zeros(&DEFAULT_LAYER_SIZES)), th, SimParams::default()).unwrap()
    }

    fn task() -> TaskSpec {
        TaskSpec {
            initial_heading: 0.0,
            target_heading: 10.0,
            target_altitude: INITIAL_ALTITUDE,
            target_airspeed: 60.0,
            duration: 30.0,
            seed: 0,
        }
    }

    fn state() -> AircraftState {
        AircraftState::trimmed(0.0, INITIAL_ALTITUDE, &SimParams::default())
    }

    #[test]
    fn pitch_boundary_fires() {
        let th = TutorThresholds::default();
        let flags = detect_errors(&ControlInput::new(0.20, 0.0), &ControlInput::new(0.05, 0.0), &th, 1.0);
        // 0.20 - 0.05 is 0.15000000000000002 in binary; check the exact case too
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].kind, ErrorKind::PitchDeviation);
        let exact = detect_errors(
            &ControlInput::new(0.25, 0.0),
            &ControlInput::new(0.0, 0.0),
            &TutorThresholds { d1: 0.25, ..th },
            1.0,
        );
        assert_eq!(exact.len(), 1);
    }

    #[test]
    fn identical_inputs_never_flag() {
        let th = TutorThresholds {
            d1: 1e-9,
            d2: 1e-9,
            ..TutorThresholds::default()
        };
        let c = ControlInput::new(0.3, -0.7);
        assert!(detect_errors(&c, &c, &th, 0.0).is_empty());
    }

    #[test]
    fn roll_magnitude() {
        let th = TutorThresholds::default();
        let flags = detect_errors(&ControlInput::new(0.0, 0.5), &ControlInput::new(0.0, 0.1), &th, 2.0);
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].kind, ErrorKind::RollDeviation);
        assert!((flags[0].magnitude - 0.4).abs() < 1e-15);
    }

    #[test]
    fn agreeing_student_stays_on_track() {
        let mut tutor = zero_tutor(TutorThresholds::default());
        for k in 0..200 {
            let ev = tutor
                .step(&state(), &task(), &ControlInput::NEUTRAL, k as f64 * 0.05)
                .unwrap();
            assert_eq!(ev.verification, Verification::OnTrack);
            assert!(!ev.active && ev.flags.is_empty());
            assert_eq!(ev.hint, ON_TRACK_HINT);
        }
    }

    #[test]
    fn short_violation_is_debounced() {
        let mut tutor = zero_tutor(TutorThresholds::default());
        let bad = ControlInput::new(0.5, 0.0);
        // 0.3 s of violation: ticks at 0.00 .. 0.30
        for k in 0..=6 {
            let ev = tutor.step(&state(), &task(), &bad, k as f64 * 0.05).unwrap();
            assert!(!ev.active);
        }
        let ev = tutor.step(&state(), &task(), &ControlInput::NEUTRAL, 0.35).unwrap();
        assert!(!ev.active);
        // a sustained one raises once 0.5 s have elapsed
        let mut raised_at = None;
        for k in 8..40 {
            let t = k as f64 * 0.05;
            let ev = tutor.step(&state(), &task(), &bad, t).unwrap();
            if ev.active && raised_at.is_none() {
                raised_at = Some(t);
                assert!(ev.flags[0].magnitude >= ev.flags[0].threshold);
                assert_eq!(ev.verification, Verification::OffTrack);
                assert!(ev.hint.contains("forward"), "{}", ev.hint);
            }
        }
        assert!((raised_at.unwrap() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn hysteresis_holds_then_clears() {
        let th = TutorThresholds {
            min_flag_duration: 0.0,
            ..TutorThresholds::default()
        };
        let mut tutor = zero_tutor(th);
        let s = state();
        let ev = tutor.step(&s, &task(), &ControlInput::new(0.0, 0.25), 0.0).unwrap();
        assert!(ev.has(ErrorKind::RollDeviation));
        assert!(ev.hint.contains("roll left"));
        // 0.18 is below d2 but above 0.8 * d2
        let ev = tutor.step(&s, &task(), &ControlInput::new(0.0, 0.18), 0.05).unwrap();
        assert!(ev.active);
        let ev = tutor.step(&s, &task(), &ControlInput::new(0.0, 0.15), 0.10).unwrap();
        assert!(!ev.active);
        // back at 0.18: must reach the full threshold before re-raising
        let ev = tutor.step(&s, &task(), &ControlInput::new(0.0, 0.18), 0.15).unwrap();
        assert!(!ev.active);
    }

    #[test]
    fn line_geometry() {
        let mut tutor = zero_tutor(TutorThresholds::default());
        let ev = tutor
            .step(&state(), &task(), &ControlInput::new(0.4, -1.0), 0.0)
            .unwrap();
        assert_eq!(
            ev.agent_line,
            FeedbackLine {
                center_x: 0.0,
                center_y: 0.0,
                slope_angle: 0.0
            }
        );
        assert_eq!(
            ev.student_line,
            FeedbackLine {
                center_x: -1.0,
                center_y: 0.4,
                slope_angle: -45.0
            }
        );
    }

    #[test]
    fn attitude_basis_compares_commanded_attitude() {
        let th = TutorThresholds {
            basis: ComparisonBasis::CommandedAttitude,
            min_flag_duration: 0.0,
            d2: 0.02,
            ..TutorThresholds::default()
        };
        let mut tutor = zero_tutor(th);
        let p = SimParams::default();
        // full right roll for one tick: 30 deg/s * 0.05 s = 1.5 deg = 1/30 of the limit
        let ev = tutor
            .step(&state(), &task(), &ControlInput::new(0.0, 1.0), 0.0)
            .unwrap();
        assert!((ev.student_line.center_x - 1.5 / p.roll_limit).abs() < 1e-12);
        assert!(ev.has(ErrorKind::RollDeviation));
    }

    #[test]
    fn rejects_bad_thresholds_and_schema() {
        let p = Arc::new(Policy::zeros(&DEFAULT_LAYER_SIZES));
        let bad = TutorThresholds {
            clear_hysteresis: 0.0,
            ..TutorThresholds::default()
        };
        assert!(Tutor::new(p.clone(), bad, SimParams::default()).is_err());
        let bad = TutorThresholds {
            d1: -0.1,
            ..TutorThresholds::default()
        };
        assert!(Tutor::new(p, bad, SimParams::default()).is_err());
        let mut other = Policy::zeros(&DEFAULT_LAYER_SIZES);
        other.feature_schema = "x".into();
        assert!(matches!(
            Tutor::new(Arc::new(other), TutorThresholds::default(), SimParams::default()),
            Err(Error::Schema { .. })
        ));
    }

    fn arb_control() -> impl Strategy<Value = ControlInput> {
        (-1.0f64..=1.0, -1.0f64..=1.0).prop_map(|(p, r)| ControlInput::new(p, r))
    }

    proptest! {
        #[test]
        fn detection_is_symmetric(a in arb_control(), s in arb_control(), d1 in 0.0f64..2.0, d2 in 0.0f64..2.0) {
            let th = TutorThresholds { d1, d2, ..TutorThresholds::default() };
            prop_assert_eq!(detect_errors(&a, &s, &th, 0.0), detect_errors(&s, &a, &th, 0.0));
        }

        #[test]
        fn raising_thresholds_never_adds_active_flags(
            stream in proptest::collection::vec((arb_control(), arb_control()), 1..200),
            d1 in 0.0f64..1.0, d2 in 0.0f64..1.0, bump1 in 0.0f64..0.5, bump2 in 0.0f64..0.5,
        ) {
            let lo = TutorThresholds { d1, d2, ..TutorThresholds::default() };
            let hi = TutorThresholds { d1: d1 + bump1, d2: d2 + bump2, ..lo };
            let mut t_lo = zero_tutor(lo);
            let mut t_hi = zero_tutor(hi);
            let s = state();
            for (k, (a, st)) in stream.iter().enumerate() {
                let t = k as f64 * 0.05;
                let e_lo = t_lo.step_with_agent(&s, a, st, t);
                let e_hi = t_hi.step_with_agent(&s, a, st, t);
                for kind in [ErrorKind::PitchDeviation, ErrorKind::RollDeviation] {
                    prop_assert!(!e_hi.has(kind) || e_lo.has(kind), "tick {}", k);
                }
            }
        }

        #[test]
        fn cleared_flag_needs_full_threshold_to_return(
            stream in proptest::collection::vec((arb_control(), arb_control()), 1..300),
        ) {
            let th = TutorThresholds { min_flag_duration: 0.1, ..TutorThresholds::default() };
            let mut tutor = zero_tutor(th);
            let s = state();
            let mut was_active = false;
            let mut cleared_since_full = false;
            for (k, (a, st)) in stream.iter().enumerate() {
                let ev = tutor.step_with_agent(&s, a, st, k as f64 * 0.05);
                let diff = (a.yoke_roll - st.yoke_roll).abs();
                let active = ev.has(ErrorKind::RollDeviation);
                if was_active && !active {
                    cleared_since_full = true;
                }
                if diff >= th.d2 {
                    cleared_since_full = false;
                }
                if !was_active && active {
                    prop_assert!(!cleared_since_full);
                    prop_assert!(diff >= th.d2);
                }
                was_active = active;
            }
        }

        #[test]
        fn line_centers_stay_in_unit_square(a in arb_control(), st in arb_control()) {
            let mut tutor = zero_tutor(TutorThresholds::default());
            let ev = tutor.step_with_agent(&state(), &a, &st, 0.0);
            for l in [ev.agent_line, ev.student_line] {
                prop_assert!(l.center_x.abs() <= 1.0 && l.center_y.abs() <= 1.0);
                prop_assert!(l.slope_angle.abs() <= MAX_LINE_SLOPE_DEG);
            }
        }
    }
}
