//! Seeded random streams.
//!
//! Every source of randomness in a run is a separate ChaCha stream derived
//! from the run seed, so the environment, the agent and dataset sampling can
//! be replayed independently of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Environment transitions, reward noise and sticky draws.
    Env,
    /// Parameter initialization.
    Init,
    /// Epsilon-greedy action selection during training.
    Agent,
    /// Mini-batch sampling and dataset shuffles.
    Sampling,
    /// Per-mini-batch REM mixing weights.
    BatchMixture,
    /// Per-episode REM behavior mixing weights.
    EpisodeMixture,
    /// Evaluation episodes; offset by the iteration index.
    Eval(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Env => 1,
            Stream::Init => 2,
            Stream::Agent => 3,
            Stream::Sampling => 4,
            Stream::BatchMixture => 5,
            Stream::EpisodeMixture => 6,
            Stream::Eval(i) => 1024 + i,
        }
    }
}

/// Returns the generator for `stream` under `seed`.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
