//! File formats, multi-threaded drivers and the pipeline behind the `snm`
//! command-line tool.

pub mod formats;
pub mod parallel;
pub mod pipeline;
pub mod presets;
