pub mod aligner;
pub mod annograph;
pub mod config;
pub mod downstream;
pub mod graph;
pub mod pipeline;
pub mod providers;
pub mod seed;
pub mod selector;
pub mod tensor;
