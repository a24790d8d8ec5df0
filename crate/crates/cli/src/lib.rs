//! Library half of the `snips` command-line tool.

pub mod config;
pub mod experiment;
pub mod imageio;
pub mod prior;
pub mod vecfile;
