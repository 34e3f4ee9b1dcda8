//! Library side of the `slackdyn` command-line tool: case-file parsing,
//! CSV trajectory serialization, SVG plotting and capability report
//! assembly. The binary in `main.rs` is a thin argument-handling layer over
//! these modules, and the integration tests drive them directly.

pub mod case;
pub mod csvio;
pub mod report;
pub mod svg;
