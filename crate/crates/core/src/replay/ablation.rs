use rand::seq::SliceRandom;

use crate::rng::Rng;

use super::{LoggedDataset, ReplayError};

/// Whole complete episodes drawn at random until their transition count first
/// reaches `fraction` of the complete-episode total. The partial final
/// episode, if any, is never drawn. Output keeps log order.
pub fn subsample_trajectories(ds: &LoggedDataset, fraction: f64, rng: &mut Rng) -> Result<LoggedDataset, ReplayError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ReplayError::InvalidFraction(fraction));
    }
    let complete = ds.complete_episodes();
    if complete.is_empty() {
        return Err(ReplayError::Empty);
    }
    let total: usize = complete.iter().map(|e| e.len).sum();
    let target = fraction * total as f64;
    let mut order: Vec<usize> = (0..complete.len()).collect();
    order.shuffle(rng);
    let mut chosen = Vec::new();
    let mut count = 0usize;
    for i in order {
        if count as f64 >= target {
            break;
        }
        chosen.push(i);
        count += complete[i].len;
    }
    chosen.sort_unstable();
    let spans: Vec<_> = chosen.into_iter().map(|i| complete[i]).collect();
    Ok(ds.select(&spans))
}

/// The first `k` transitions, extended to the end of the episode holding
/// transition `k`.
pub fn take_prefix(ds: &LoggedDataset, k: usize) -> Result<LoggedDataset, ReplayError> {
    let total = ds.transition_count();
    if k == 0 || k > total {
        return Err(ReplayError::PrefixOutOfRange { k, total });
    }
    let last = ds.episodes().partition_point(|e| e.start + e.len < k);
    Ok(ds.select(&ds.episodes()[..=last]))
}
