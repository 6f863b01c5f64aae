//! Shared fixtures for the solver benchmarks.

use qsg_core::{generate_instance, GameInstance, Overrides};

/// Default-parameter instance used across benchmark groups.
pub fn fixture(n_centers: usize, seed: u64) -> GameInstance {
    generate_instance(seed, n_centers, &Overrides::default()).expect("default parameters are valid for n >= 10")
}
