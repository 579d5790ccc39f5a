//! Degraded-corpus construction: room responses, loudness-calibrated noise,
//! four-way condition assignment, and the synthetic toy corpus.

mod corpus;
mod mix;
mod room;
mod toy;

pub use corpus::{
    assign_conditions, build_corpus, build_mixtures, condition_counts, hash_bytes, relative_path, BuildOutcome,
    ConditionRatios, DegradeConfig, Manifest, RowError, UtteranceRecord,
};
pub use mix::{
    apply_rir, apply_rir_with_gain, convolve, degrade_utterance, fit_noise_length, parse_conditions,
    DegradationCondition, DegradationMeta, Degraded, Degrader, DEFAULT_NOISE_LUFS,
};
pub use room::{
    sabine_absorption, schroeder_t60, simulate_rir, simulate_rir_with_absorption, Point, RoomSpec,
    FRACTIONAL_DELAY_TAPS, SABINE_CONSTANT,
};
pub use toy::{generate_toy_corpus, noise_clip, noise_clip_path, write_toy_corpus, ToyCorpus, ToyCorpusSpec, SILENCE};
