//! Language-agent tree search: Monte Carlo tree search over textual agent
//! trajectories, with pluggable policy, value and reflection backends and
//! small bundled environments.

pub mod env;
pub mod policy;
pub mod reflection;
pub mod search;
pub mod trace;
pub mod tree;
pub mod valuation;
