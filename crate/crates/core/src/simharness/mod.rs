//! Deterministic whole-network simulation, scenario files, run bundles and
//! the socket-based real mode driving the same node reactor.

mod bundle;
mod real;
mod scenario;
mod sim;

pub use bundle::{summary_text, write_bundle, write_telemetry, write_usage, write_wire, CSV_DIR, TABLE_DIR, USAGE_DIR, WIRE_DIR};
pub use real::{node_config_text, now_ms, run_node, NodeConfig, NodeRunError, NodeRunSummary};
pub use scenario::{
    bundled, bundled_names, bundled_text, load_scenario, secs_to_us, to_toml, Fault, NodeSpec, Outage, OutageScope,
    Scenario, DEFAULT_HOP_DELAY_S,
};
pub use sim::{
    derive_nk_seed, derive_psk, node_setup, run_sim, LinkSummary, NodeSummary, NodeTables, RunSummary, SimError,
    SimOptions, SimReport, Stat,
};
