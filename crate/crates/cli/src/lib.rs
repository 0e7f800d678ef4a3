//! Library side of the `dak` command-line tool.

pub mod bench;
pub mod checks;
pub mod experiment;
pub mod toy;
