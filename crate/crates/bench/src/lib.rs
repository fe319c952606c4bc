//! Fixtures shared by the benchmarks.

use maskdiff_core::audiofront::AudioConfig;
use maskdiff_core::datagen::{generate, RecordKind};
use maskdiff_core::pipeline::{desk_model_config, prepare, InputFormat, Prepared};
use maskdiff_core::ModelState;

/// A freshly initialized desk-size model.
pub fn desk_state() -> ModelState {
    ModelState::init(desk_model_config(), 1).expect("desk config is valid")
}

/// `n` prepared records of `kind`.
pub fn prepared(state: &ModelState, kind: RecordKind, n: usize) -> Vec<Prepared> {
    let corpus = generate(kind, n, 99, &AudioConfig::default()).expect("count is positive");
    prepare(state, &corpus, &InputFormat::default()).expect("records fit the format")
}
