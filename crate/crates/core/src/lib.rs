//! Pixel-wise Q-map learning for multi-step manipulation on a discrete grid.
//!
//! Modules, bottom up: `gridsim` (environment), `reward` (task-progress reward
//! and its Gaussian spread), `policy` (action selection and loss-adjusted
//! exploration), `qfunc` (convolutional Q-networks and training), `replay`
//! (rank-prioritized buffer), `harness` (train / evaluate / ablate).

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gridsim;
pub mod harness;
pub mod output;
pub mod policy;
pub mod qfunc;
pub mod replay;
pub mod reward;
pub mod selftest;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use gridsim::{Action, Observation, Primitive, StepResult, TaskConfig, TaskKind, Workspace};
pub use harness::{evaluate, run_ablation, train, Metrics, TrainReport, Variant};
pub use policy::{ExplorationMode, QMapSet};
pub use qfunc::{NetworkParams, PrevActionContext, QNetwork};
pub use replay::{ReplayBuffer, Transition};
pub use reward::{RewardMap, RewardMode, RewardParams};
