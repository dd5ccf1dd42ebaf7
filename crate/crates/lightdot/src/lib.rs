pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod index;
pub mod objectives;
pub mod optim;
pub mod rerank;
pub mod synth;
pub mod tensor;
pub mod train;
