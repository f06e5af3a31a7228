#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use tutor_core::bc::{Policy, TrainConfig};
use tutor_core::eval::train_policy;
use tutor_core::expert::{generate_demos, ExpertGains};
use tutor_core::flightdyn::SimParams;

/// Policy trained on the default demonstration protocol, shared by every
/// test in the binary.
pub fn trained_policy() -> Arc<Policy> {
    static POLICY: OnceLock<Arc<Policy>> = OnceLock::new();
    POLICY
        .get_or_init(|| {
            let demos = generate_demos(25, 30.0, &ExpertGains::default(), &SimParams::default(), 1).unwrap();
            let (policy, _) = train_policy(&demos, &TrainConfig::default()).unwrap();
            Arc::new(policy)
        })
        .clone()
}
