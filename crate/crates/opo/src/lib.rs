//! File formats, storage layouts and the command-line front end of the
//! optimise-predict-optimise pipeline. The computation lives in `opo-core`.

pub mod cli;
pub mod clock;
pub mod config;
pub mod format;
pub mod report;
pub mod store;
