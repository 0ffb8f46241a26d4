//! Shared fixtures for the criterion benchmarks.

use iace_core::dataset::NormStats;
use iace_core::harness::synthetic_observation;
use iace_core::policy::{ObservationFrame, PolicyConfig, PolicyModel, PolicyVariant};

/// A desk-scale model with a deterministic synthetic observation.
pub fn desk_fixture(variant: PolicyVariant) -> (PolicyModel, ObservationFrame) {
    let cfg = PolicyConfig::desk(variant);
    let model = PolicyModel::new(cfg.clone(), NormStats::identity(2 * cfg.joints_per_arm), 7)
        .expect("desk config builds");
    let obs = synthetic_observation(&cfg, 11);
    (model, obs)
}
