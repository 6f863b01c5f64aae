//! Joint center selection and security allocation against a quantal-response
//! attacker.
//!
//! The defender picks a set of operated centers `S` and marginal coverage
//! `x_S` to maximize its expected utility. Solvers:
//!
//! * [`dualheur`]: polynomial dual heuristic with certificates,
//! * [`milp`]: piecewise-linear MILP model, LP export and exact small-scale paths,
//! * [`search`]: Dinkelbach bisection and the hybrid of both,
//! * [`baselines`]: all-centers and sort-then-select comparisons,
//! * [`oracle`]: brute-force ground truth for small instances.

pub mod baselines;
pub mod dualheur;
pub mod error;
pub mod lp;
pub mod experiment;
pub mod milp;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod oracle;
pub mod search;
pub mod verify;

pub use error::{QsgError, Result};
pub use model::{
    generate_instance, read_instance, write_instance, GameInstance, InstanceData, Overrides,
    Strategy,
};
pub use objective::{bopt_value, defender_utility, qr_probs};
pub use search::{hybrid_solve, solve, HybridOptions, Method, SolveReport};
