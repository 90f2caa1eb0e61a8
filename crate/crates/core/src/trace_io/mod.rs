//! Configuration parsing, seeded substreams, and serialization of
//! instances and traces.

pub mod config;
pub mod instance;
pub mod rng;
pub mod trace;

pub use config::{
    emit, load_compare_config, load_config, parse_compare_config_in, parse_config, parse_config_in, CompareConfigFile,
    RunConfigFile,
};
pub use instance::{load_instance, save_instance};
pub use trace::{read_trace, read_trace_rows, write_trace, write_trace_json, TraceFile, TraceHeader};
