//! Library surface of the experiment harness; the `stip` binary and the
//! acceptance suite both drive the pipeline through these modules.

pub mod commands;
pub mod config;
pub mod output;
pub mod pipeline;
