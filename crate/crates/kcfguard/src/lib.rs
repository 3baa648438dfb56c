//! File formats, HTTP backend, external scanners and the command line for
//! the `kcfguard` pipeline. The pipeline itself lives in `kcfguard-core`.

pub mod cli;
pub mod config;
pub mod io;
pub mod limiter;
pub mod remote;
pub mod tools;
