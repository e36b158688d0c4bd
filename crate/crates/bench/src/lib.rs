//! Shared fixtures for the benchmarks.

use crex_core::config::RunConfig;
use crex_core::data::{generate_synthetic_sequence, SyntheticSpec, TaskSequence};

/// A five-task synthetic sequence with 30 samples per relation.
pub fn sequence() -> TaskSequence {
    let spec = SyntheticSpec {
        samples_per_relation: 30,
        ..SyntheticSpec::default()
    };
    generate_synthetic_sequence(&spec).expect("default synthetic spec is valid").sequence
}

/// The default profile shrunk to a couple of epochs.
pub fn config(hidden_dim: usize) -> RunConfig {
    let mut run = RunConfig::fewrel();
    run.encoder.hidden_dim = hidden_dim;
    run.encoder.projection_dim = hidden_dim;
    run.optimizer.new_task_epochs = 2;
    run.optimizer.replay_epochs = 2;
    run
}
