//! Offline Q-learning laboratory.
//!
//! Small stochastic MDPs stand in for Atari: an online DQN collects a logged
//! replay dataset, agents (DQN, Ensemble-DQN, Averaged Ensemble-DQN, REM and
//! QR-DQN) are trained offline on that frozen log, and exact dynamic
//! programming on the true or dataset-induced MDP serves as the oracle.
//!
//! Module map:
//!
//! - [`env`]: tabular MDPs, episode dynamics, sticky actions.
//! - [`oracle`]: value iteration, policy evaluation, induced MDP estimation.
//! - [`qfunc`]: tabular / linear / MLP Q-ensembles with hand-derived
//!   gradients, Adam, target snapshots and checkpoints.
//! - [`losses`]: Huber, DQN, Ensemble-DQN, REM, Averaged Ensemble-DQN and
//!   QR-DQN objectives.
//! - [`replay`]: FIFO replay buffer, the `OFRLDS01` dataset format and the
//!   subsampling / prefix ablations.
//! - [`train`]: online collection, offline training, evaluation, online REM.
//! - [`metrics`]: score normalization, aggregation and report emission.
//! - [`config`]: the sectioned run configuration file.

pub mod config;
pub mod env;
pub mod losses;
pub mod metrics;
pub mod oracle;
pub mod qfunc;
pub mod replay;
pub mod rng;
pub mod train;

mod error;

pub use error::Error;
