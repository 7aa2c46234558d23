use super::{HeadValues, QEnsemble, QFuncError};

/// Frozen copy of an ensemble used for bootstrap targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSnapshot {
    network: QEnsemble,
    sync_step: u64,
}

impl TargetSnapshot {
    pub fn new(q: &QEnsemble) -> Self {
        TargetSnapshot { network: q.clone(), sync_step: 0 }
    }

    /// Copies the online parameters and records the update count.
    pub fn sync(&mut self, q: &QEnsemble, update: u64) -> Result<(), QFuncError> {
        if q.spec() != self.network.spec() {
            return Err(QFuncError::ShapeMismatch("target and online specs differ".into()));
        }
        self.network.params_mut().copy_from_slice(q.params());
        self.sync_step = update;
        Ok(())
    }

    pub fn sync_step(&self) -> u64 {
        self.sync_step
    }

    pub fn network(&self) -> &QEnsemble {
        &self.network
    }

    pub fn forward(&self, obs: &[f32]) -> Result<HeadValues, QFuncError> {
        self.network.forward(obs)
    }
}

/// Target synchronization every `period` gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncSchedule {
    pub period: u64,
}

impl SyncSchedule {
    /// True when a sync is due after update number `update` (1-based).
    pub fn due(&self, update: u64) -> bool {
        self.period > 0 && update > 0 && update.is_multiple_of(self.period)
    }
}
