pub mod contrast;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod jsonl;
pub mod model;
pub mod pivot;
pub mod shuffle;
pub mod synth;
pub mod trace;
pub mod types;
