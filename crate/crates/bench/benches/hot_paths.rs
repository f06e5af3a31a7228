use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use tutor_core::bc::{bc_grad, forward, Policy, DEFAULT_LAYER_SIZES};
use tutor_core::dataset::featurize;
use tutor_core::expert::{generate_demos, ExpertGains, TaskSpec};
use tutor_core::flightdyn::{step, ControlInput, SimParams};
use tutor_core::tutor::{Tutor, TutorThresholds};

fn bench_step(c: &mut Criterion) {
    let params = SimParams::default();
    let state = TaskSpec::default().initial_state(&params);
    let control = ControlInput::new(0.2, -0.4);
    c.bench_function("flightdyn step", |b| {
        b.iter(|| step(black_box(&state), black_box(&control), &params))
    });
}

fn bench_forward(c: &mut Criterion) {
    let params = SimParams::default();
    let task = TaskSpec::default();
    let policy = Policy::init(&DEFAULT_LAYER_SIZES, 1);
    let features = featurize(&task.initial_state(&params), &task, &params);
    c.bench_function("policy forward", |b| {
        b.iter(|| forward(black_box(&policy), black_box(&features)))
    });
}

fn bench_grad(c: &mut Criterion) {
    let demos = generate_demos(1, 10.0, &ExpertGains::default(), &SimParams::default(), 1).unwrap();
    let batch = &demos.samples[..64];
    let policy = Policy::init(&DEFAULT_LAYER_SIZES, 1);
    c.bench_function("bc_grad batch 64", |b| {
        b.iter(|| bc_grad(black_box(&policy), black_box(batch)))
    });
}

fn bench_tutor(c: &mut Criterion) {
    let params = SimParams::default();
    let task = TaskSpec::default();
    let state = task.initial_state(&params);
    let policy = Arc::new(Policy::init(&DEFAULT_LAYER_SIZES, 1));
    let mut tutor = Tutor::new(policy, TutorThresholds::default(), params).unwrap();
    let student = ControlInput::new(0.5, -0.5);
    let mut t = 0.0;
    c.bench_function("tutor step", |b| {
        b.iter(|| {
            t += params.dt;
            tutor.step(black_box(&state), &task, black_box(&student), t)
        })
    });
}

criterion_group!(benches, bench_step, bench_forward, bench_grad, bench_tutor);
criterion_main!(benches);
