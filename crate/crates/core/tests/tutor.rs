mod common;

use tutor_core::eval::{eval_tasks, expert_pilot, rollout, synthesize_student, Flaw, Trajectory};
use tutor_core::expert::ExpertGains;
use tutor_core::flightdyn::SimParams;
use tutor_core::seeds::stream;
use tutor_core::tutor::{ErrorKind, Tutor, TutorThresholds};

/// Raise counts `(pitch, roll)` when the tutor watches `traj`.
fn raised(traj: &Trajectory) -> (usize, usize) {
    let mut tutor = Tutor::new(common::trained_policy(), TutorThresholds::default(), traj.sim).unwrap();
    let (mut pitch, mut roll) = (0, 0);
    let (mut was_p, mut was_r) = (false, false);
    for p in &traj.points {
        let ev = tutor.step(&p.state, &traj.task, &p.control, p.state.t).unwrap();
        let (is_p, is_r) = (ev.has(ErrorKind::PitchDeviation), ev.has(ErrorKind::RollDeviation));
        pitch += usize::from(is_p && !was_p);
        roll += usize::from(is_r && !was_r);
        (was_p, was_r) = (is_p, is_r);
    }
    (pitch, roll)
}

#[test]
fn expert_flights_raise_nothing() {
    let p = SimParams::default();
    for task in eval_tasks(20, 11, stream::EVAL, 30.0, &p) {
        let traj = rollout(expert_pilot(ExpertGains::default(), task), &task, &p).unwrap();
        assert_eq!(raised(&traj), (0, 0), "offset {:.1}", task.offset());
    }
}

#[test]
fn overshooter_raises_roll_deviation() {
    let p = SimParams::default();
    let mut checked = 0;
    for task in eval_tasks(20, 12, stream::EVAL, 30.0, &p) {
        // a goal a few degrees away leaves nothing to overshoot
        if task.offset().abs() < 10.0 {
            continue;
        }
        let student = synthesize_student(&ExpertGains::default(), Flaw::Overshooter, 1.0, task.seed).unwrap();
        let traj = rollout(student.pilot(task), &task, &p).unwrap();
        let (_, roll) = raised(&traj);
        assert!(roll >= 1, "offset {:.1}", task.offset());
        checked += 1;
    }
    assert!(checked >= 5);
}

#[test]
fn pitch_neglect_raises_pitch_deviation() {
    let p = SimParams::default();
    for task in eval_tasks(20, 13, stream::EVAL, 30.0, &p) {
        let student = synthesize_student(&ExpertGains::default(), Flaw::PitchNeglect, 1.0, task.seed).unwrap();
        let traj = rollout(student.pilot(task), &task, &p).unwrap();
        let (pitch, _) = raised(&traj);
        assert!(pitch >= 1, "offset {:.1}", task.offset());
    }
}

#[test]
fn mild_overshooter_flags_less_than_severe() {
    let p = SimParams::default();
    let (mut mild, mut severe) = (0, 0);
    for task in eval_tasks(10, 14, stream::EVAL, 30.0, &p) {
        for (sev, total) in [(0.2, &mut mild), (1.0, &mut severe)] {
            let s = synthesize_student(&ExpertGains::default(), Flaw::Overshooter, sev, task.seed).unwrap();
            *total += raised(&rollout(s.pilot(task), &task, &p).unwrap()).1;
        }
    }
    assert!(mild < severe, "mild {mild} severe {severe}");
}
