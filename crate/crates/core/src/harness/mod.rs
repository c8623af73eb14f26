//! CLI-facing orchestration: configuration, experiment runs over
//! (source, target, method) grids, result persistence, and report emission.

pub mod config;
pub mod report;
pub mod run;

pub use config::{
    desk_benchmark, desk_smoke, full_profile, AdaptGridSpec, AdaptKind, Budgets, ConfigError,
    DataSource, DomainInfoSpec, FeatureMode, MethodSpec, ModelFamily, NnGrid, PairSpec, RunConfig,
    TargetAllocation,
};
pub use run::{reaggregate, run, Manifest, PairDiagnostics, RunError, RunReport};
