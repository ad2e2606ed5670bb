//! `motiongen` command-line pipeline: config loading, artifact directories with
//! fingerprinted manifests, and one function per subcommand.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
