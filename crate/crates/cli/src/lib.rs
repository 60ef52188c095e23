//! Library surface of the `msvar` command-line tool: the JSON model-file
//! schema and the tabular output renderer, shared with the test suites.

pub mod file;
pub mod output;
