//! Library surface of the `cdgan` binary: file formats, checkpointing,
//! dataset IO, metrics logging, and the command drivers. The binary is a
//! thin clap wrapper over [`commands`].

pub mod checkpoint;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod logs;
