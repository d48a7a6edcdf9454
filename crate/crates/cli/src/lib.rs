//! Orchestration on top of `cfs_core`: run configuration, corpus runs,
//! strategy benchmarking and toy-set training, shared by the `cfs` binary
//! and the acceptance tests.

pub mod bench;
pub mod config;
pub mod corpus;
pub mod pipeline;
pub mod train;

pub use bench::{bench, BenchReport, BenchRow, Toggles};
pub use config::RunConfig;
pub use corpus::{run_corpus, run_entries, CorpusItem, CorpusReport, ItemReport, TraceFile};
pub use pipeline::{Inpainted, Models, Pipeline};
pub use train::{train_toy, ToyTraining, TrainingOutput};

/// Top-level `"version"` of every JSON report.
pub const REPORT_VERSION: u32 = 1;

/// Removes every `wall_clock_s` key, recursively, for reproducibility
/// comparisons.
pub fn strip_wall_clock(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove("wall_clock_s");
            map.values_mut().for_each(strip_wall_clock);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_wall_clock),
        _ => {}
    }
}
