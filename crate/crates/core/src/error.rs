use thiserror::Error;

use crate::{config, env, losses, metrics, oracle, qfunc, replay, train};

/// Union of the module errors, for callers that drive the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Env(#[from] env::EnvError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error(transparent)]
    QFunc(#[from] qfunc::QFuncError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Replay(#[from] replay::ReplayError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
