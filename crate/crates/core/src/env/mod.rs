//! Grid implementations of the treasure-collection and cooperative
//! navigation games behind a common step/reset interface.

mod grid;
mod oracle;
mod render;
mod spec;

pub use grid::{start_cells, EnvState, GridEnv, JointObservation, StepOutcome};
pub use oracle::{oracle_optimal_return, MAX_ORACLE_STATES, ORACLE_TOLERANCE};
pub use render::render;
pub use spec::{Action, EnvSpec, GameKind, Pos, Rewards, NUM_ACTIONS};
