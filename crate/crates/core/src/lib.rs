//! CNN-RNN networks with GRU heads on several backbone taps, for
//! frame-level valence/arousal estimation, with the concordance-correlation
//! objective, utterance-level data pipeline and post-processing chain that
//! go with them.

pub mod config;
pub mod data;
pub mod model;
pub mod objective;
pub mod plot;
pub mod postproc;
pub mod tensor;
pub mod trainer;
