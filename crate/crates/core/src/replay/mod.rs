//! Experience storage: the online FIFO buffer, the logged dataset and its
//! file format, and the subsampling ablations.

mod ablation;
mod dataset;

pub use ablation::{subsample_trajectories, take_prefix};
pub use dataset::{
    load_dataset, save_dataset, DatasetMeta, DatasetWriter, EpisodeSpan, LoggedDataset, DATASET_MAGIC, DATASET_VERSION,
    DESCRIPTOR_LEN,
};

use rand::Rng as _;
use thiserror::Error;

use crate::losses::MiniBatch;
use crate::rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("episode {episode}: expected step {expected}, got {got}")]
    StepGap { episode: u64, expected: u32, got: u32 },
    #[error("episode {episode} started before episode {previous} reached a terminal transition")]
    UnfinishedEpisode { episode: u64, previous: u64 },
    #[error("episode {episode} appended after its terminal transition")]
    AfterTerminal { episode: u64 },
    #[error("episode id {episode} does not increase past {previous}")]
    EpisodeOrder { episode: u64, previous: u64 },
    #[error("observation length {got}, expected {expected}")]
    ObservationLength { expected: usize, got: usize },
    #[error("action {action} out of range for {num_actions} actions")]
    ActionOutOfRange { action: usize, num_actions: usize },
    #[error("non-finite reward")]
    NonFiniteReward,
    #[error("store is empty")]
    Empty,
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("prefix length {k} outside 1..={total}")]
    PrefixOutOfRange { k: usize, total: usize },
    #[error("descriptor longer than 64 bytes")]
    DescriptorTooLong,
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("truncated file: {expected} bytes expected, {got} present")]
    Truncated { expected: u64, got: u64 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for ReplayError {
    fn from(e: std::io::Error) -> Self {
        ReplayError::Io(e.to_string())
    }
}

/// One logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Vec<f32>,
    pub action: usize,
    pub reward: f32,
    pub next_observation: Vec<f32>,
    pub terminal: bool,
    pub episode_id: u64,
    pub step_in_episode: u32,
}

/// Borrowed view of a stored transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionView<'a> {
    pub observation: &'a [f32],
    pub action: usize,
    pub reward: f32,
    pub next_observation: &'a [f32],
    pub terminal: bool,
}

/// Random-access transition storage.
pub trait TransitionStore {
    fn len(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn view(&self, i: usize) -> TransitionView<'_>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Uniform sampling with replacement.
pub fn sample_batch<S: TransitionStore + ?Sized>(
    store: &S,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<MiniBatch, ReplayError> {
    if store.is_empty() || batch_size == 0 {
        return Err(ReplayError::Empty);
    }
    let dim = store.obs_dim();
    let mut obs = Vec::with_capacity(batch_size * dim);
    let mut next = Vec::with_capacity(batch_size * dim);
    let mut actions = Vec::with_capacity(batch_size);
    let mut rewards = Vec::with_capacity(batch_size);
    let mut terminals = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let t = store.view(rng.random_range(0..store.len()));
        obs.extend_from_slice(t.observation);
        next.extend_from_slice(t.next_observation);
        actions.push(t.action);
        rewards.push(t.reward as f64);
        terminals.push(t.terminal);
    }
    MiniBatch::new(dim, obs, actions, rewards, next, terminals).map_err(|e| ReplayError::Corrupt(e.to_string()))
}

/// Enforces episode contiguity across consecutive appends.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct EpisodeTracker {
    last: Option<(u64, u32, bool)>,
}

impl EpisodeTracker {
    pub(crate) fn check(&self, episode: u64, step: u32, terminal: bool) -> Result<Self, ReplayError> {
        match self.last {
            Some((prev, prev_step, prev_terminal)) if prev == episode => {
                if prev_terminal {
                    return Err(ReplayError::AfterTerminal { episode });
                }
                if step != prev_step + 1 {
                    return Err(ReplayError::StepGap { episode, expected: prev_step + 1, got: step });
                }
            }
            Some((prev, _, prev_terminal)) => {
                if episode < prev {
                    return Err(ReplayError::EpisodeOrder { episode, previous: prev });
                }
                if !prev_terminal {
                    return Err(ReplayError::UnfinishedEpisode { episode, previous: prev });
                }
                if step != 0 {
                    return Err(ReplayError::StepGap { episode, expected: 0, got: step });
                }
            }
            None => {
                if step != 0 {
                    return Err(ReplayError::StepGap { episode, expected: 0, got: step });
                }
            }
        }
        Ok(EpisodeTracker { last: Some((episode, step, terminal)) })
    }
}

fn check_shape(t: &Transition, dim: usize) -> Result<(), ReplayError> {
    for len in [t.observation.len(), t.next_observation.len()] {
        if len != dim {
            return Err(ReplayError::ObservationLength { expected: dim, got: len });
        }
    }
    if t.action > u16::MAX as usize {
        return Err(ReplayError::ActionOutOfRange { action: t.action, num_actions: u16::MAX as usize + 1 });
    }
    if !t.reward.is_finite() {
        return Err(ReplayError::NonFiniteReward);
    }
    Ok(())
}

/// Fixed-capacity FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    len: usize,
    cursor: usize,
    observations: Vec<f32>,
    next_observations: Vec<f32>,
    actions: Vec<u16>,
    rewards: Vec<f32>,
    terminals: Vec<bool>,
    tracker: EpisodeTracker,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        Ok(ReplayBuffer {
            capacity,
            obs_dim,
            len: 0,
            cursor: 0,
            observations: Vec::new(),
            next_observations: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
            tracker: EpisodeTracker::default(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends `t`, evicting the oldest transition when full.
    pub fn append(&mut self, t: &Transition) -> Result<(), ReplayError> {
        check_shape(t, self.obs_dim)?;
        self.tracker = self.tracker.check(t.episode_id, t.step_in_episode, t.terminal)?;
        let d = self.obs_dim;
        if self.len < self.capacity {
            self.observations.extend_from_slice(&t.observation);
            self.next_observations.extend_from_slice(&t.next_observation);
            self.actions.push(t.action as u16);
            self.rewards.push(t.reward);
            self.terminals.push(t.terminal);
            self.len += 1;
        } else {
            let c = self.cursor;
            self.observations[c * d..(c + 1) * d].copy_from_slice(&t.observation);
            self.next_observations[c * d..(c + 1) * d].copy_from_slice(&t.next_observation);
            self.actions[c] = t.action as u16;
            self.rewards[c] = t.reward;
            self.terminals[c] = t.terminal;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    fn physical(&self, i: usize) -> usize {
        if self.len < self.capacity {
            i
        } else {
            (self.cursor + i) % self.capacity
        }
    }
}

impl TransitionStore for ReplayBuffer {
    fn len(&self) -> usize {
        self.len
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// Index 0 is the oldest stored transition.
    fn view(&self, i: usize) -> TransitionView<'_> {
        assert!(i < self.len, "index {i} out of range");
        let p = self.physical(i);
        let d = self.obs_dim;
        TransitionView {
            observation: &self.observations[p * d..(p + 1) * d],
            action: self.actions[p] as usize,
            reward: self.rewards[p],
            next_observation: &self.next_observations[p * d..(p + 1) * d],
            terminal: self.terminals[p],
        }
    }
}
