//! Discrepancy minimization by a derandomized barrier-potential walk.
//!
//! The crate builds `+1/-1` colorings of real matrices whose maximum row
//! imbalance is certifiably small. One engine covers the classic set-coloring
//! and vector-balancing regimes through parameter presets, and two extensions
//! share its machinery: a combined walk over two matrices with a weighted sum
//! of potentials, and a multi-class walk for sparse 0/1 hypergraphs.
//!
//! Modules
//! - [`instance`]: matrices, row-norm envelopes, the sign/split row system.
//! - [`subspace`]: nullspace bases, spectral restriction, direction choice.
//! - [`walk`]: the core engine, invariant audits, rounding, run summaries.
//! - [`presets`]: parameter derivations for each application regime.
//! - [`multiwalk`]: the two-matrix and hypergraph walks.
//! - [`harness`]: generators, exact oracle, baselines, bench reporting.

pub mod error;
pub mod harness;
pub mod instance;
pub mod linalg;
pub mod multiwalk;
pub mod presets;
pub mod subspace;
pub mod walk;

pub use error::{Error, Result};
pub use instance::{build_instance, evaluate_h, preprocess, ExtendedInstance, HFunction, Instance};
pub use presets::{preset_general, preset_komlos, preset_spencer, preset_sub_gaussian, Preset, PresetResult};
pub use walk::{
    run_pipeline, run_walk, BarrierRule, RoundedColoring, RunSummary, WalkConfig, WalkMode,
};
