//! File formats, configuration and command implementations behind the
//! `seqlab` binary. The numeric work lives in `seqlab-core`; this crate
//! adds the IO shell: TOML run configs, the binary checkpoint format,
//! corpus files, JSONL train logs, and the experiment grid runner.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus_io;
pub mod grid;
