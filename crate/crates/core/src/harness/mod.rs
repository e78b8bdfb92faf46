//! Scenario files, assertion checking, metrics and sweeps.

mod metrics;
mod run;
mod scenario;
mod sweep;

pub use metrics::{mean_stddev, to_csv_string, write_csv, Metric, MetricRecord, SeedColumn, CSV_HEADER};
pub use run::{
    collect_metrics, evaluate, load_scenario, run, run_scenario, write_artifacts, Artifacts, AssertionResult,
    HarnessError, RunOptions, RunOutcome,
};
pub use scenario::{
    parse_millis, parse_scenario, parse_value, Assertion, Check, ClientDecl, EventAction, NodeDecl, ParseError,
    Scenario, ScenarioEvent, DEFAULT_BLOCK_SIZE, FORMAT_HEADER, FORMAT_VERSION,
};
pub use sweep::{
    canonical_scenario, derive_seed, expand_range, map_runs, run_canonical, sweep, CanonicalParams, CanonicalRun,
    Execution, SweepParam, SweepResult, SweepSpec, CANONICAL_CLIENT, CANONICAL_NODE, DEFAULT_HOPS, DEFAULT_STATE_COUNT,
};

/// Scenarios shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = &[("fig12_19", include_str!("../../scenarios/fig12_19.scn"))];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}
