//! Joint cache-version selection and content placement for hierarchical
//! edge-cache networks, solved by dual decomposition.
//!
//! Users pick a (cache, version) pair under link prices ([`cave`]), caches
//! pick what to store under consistency prices ([`cop`]), and [`sim`] runs
//! both on a fluid network model. [`oracle`] holds exhaustive solvers for
//! small instances.

pub mod cave;
pub mod cli;
pub mod cop;
pub mod model;
pub mod oracle;
pub mod sim;

pub use cave::{Choice, Selection, StepSchedule};
pub use cop::PlacementState;
pub use model::{generate_scenario, validate, Scenario, ScenarioParams};
pub use sim::{run_policy, PolicyKind};
