//! Data, training, checkpoints, decoding and run bookkeeping.

pub mod checkpoint;
pub mod corpus;
pub mod generate;
pub mod manifest;
pub mod tokenizer;
pub mod train;
