//! The logged dataset and its binary file format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "OFRLDS01"
//! version    u32
//! encoding   u8       observation encoding tag
//! obs_dim    u32
//! actions    u32
//! discount   f64
//! count      u64      transitions
//! episodes   u64
//! seed       u64      collection seed
//! descriptor 64 bytes zero-padded UTF-8, "<environment>;<agent>"
//! index      episodes x (u64 episode_id, u64 byte offset, u32 record count)
//! records    count x (f32 x obs_dim, u16 action, f32 reward, f32 x obs_dim, u8 terminal)
//! checksum   u32      CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::env::ObsEncoding;

use super::{check_shape, EpisodeTracker, ReplayError, Transition, TransitionStore, TransitionView};

pub const DATASET_MAGIC: &[u8; 8] = b"OFRLDS01";
pub const DATASET_VERSION: u32 = 1;
pub const DESCRIPTOR_LEN: usize = 64;

const HEADER_LEN: usize = 8 + 4 + 1 + 4 + 4 + 8 + 8 + 8 + 8 + DESCRIPTOR_LEN;
const INDEX_ENTRY_LEN: usize = 8 + 8 + 4;

/// Header fields other than the counts, which are derived from the records.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub encoding: ObsEncoding,
    pub obs_dim: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub seed: u64,
    /// `<environment>;<agent>`, at most 64 bytes.
    pub descriptor: String,
}

impl DatasetMeta {
    /// Environment part of the descriptor.
    pub fn environment(&self) -> &str {
        self.descriptor.split(';').next().unwrap_or("")
    }

    /// Collection-agent part of the descriptor.
    pub fn agent(&self) -> &str {
        self.descriptor.split_once(';').map(|(_, a)| a).unwrap_or("")
    }

    fn validate(&self) -> Result<(), ReplayError> {
        if self.descriptor.len() > DESCRIPTOR_LEN {
            return Err(ReplayError::DescriptorTooLong);
        }
        if self.descriptor.as_bytes().contains(&0) {
            return Err(ReplayError::Corrupt("descriptor contains a zero byte".into()));
        }
        if self.num_actions == 0 || self.num_actions > u16::MAX as usize + 1 {
            return Err(ReplayError::Corrupt(format!("{} actions", self.num_actions)));
        }
        if self.obs_dim == 0 || self.obs_dim > u32::MAX as usize {
            return Err(ReplayError::Corrupt(format!("observation dimension {}", self.obs_dim)));
        }
        Ok(())
    }
}

/// One episode's contiguous run of transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpan {
    pub episode_id: u64,
    /// Index of the first transition.
    pub start: usize,
    pub len: usize,
}

/// Immutable, trajectory-indexed transition log.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedDataset {
    meta: DatasetMeta,
    episodes: Vec<EpisodeSpan>,
    observations: Vec<f32>,
    next_observations: Vec<f32>,
    actions: Vec<u16>,
    rewards: Vec<f32>,
    terminals: Vec<bool>,
}

impl LoggedDataset {
    fn empty(meta: DatasetMeta) -> Self {
        LoggedDataset {
            meta,
            episodes: Vec::new(),
            observations: Vec::new(),
            next_observations: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
        }
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn transition_count(&self) -> usize {
        self.actions.len()
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn episodes(&self) -> &[EpisodeSpan] {
        &self.episodes
    }

    /// True when the last episode has no terminal transition, i.e. collection
    /// stopped mid-episode.
    pub fn has_partial_final_episode(&self) -> bool {
        self.episodes.last().is_some_and(|e| !self.terminals[e.start + e.len - 1])
    }

    /// Episodes that end in a terminal transition.
    pub fn complete_episodes(&self) -> &[EpisodeSpan] {
        let n = self.episodes.len() - usize::from(self.has_partial_final_episode());
        &self.episodes[..n]
    }

    /// Undiscounted return of every complete episode, in order.
    pub fn episode_returns(&self) -> Vec<f64> {
        self.complete_episodes()
            .iter()
            .map(|e| self.rewards[e.start..e.start + e.len].iter().map(|&r| r as f64).sum())
            .collect()
    }

    /// Mean return over complete episodes, `None` when there are none.
    pub fn average_return(&self) -> Option<f64> {
        let r = self.episode_returns();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }

    /// All transitions with their episode bookkeeping, in log order.
    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        self.episodes.iter().flat_map(move |e| {
            (0..e.len).map(move |j| {
                let v = self.view(e.start + j);
                Transition {
                    observation: v.observation.to_vec(),
                    action: v.action,
                    reward: v.reward,
                    next_observation: v.next_observation.to_vec(),
                    terminal: v.terminal,
                    episode_id: e.episode_id,
                    step_in_episode: j as u32,
                }
            })
        })
    }

    /// Copy holding only the given episodes, in the given order.
    pub(crate) fn select(&self, spans: &[EpisodeSpan]) -> LoggedDataset {
        let mut out = LoggedDataset::empty(self.meta.clone());
        let d = self.meta.obs_dim;
        for e in spans {
            out.episodes.push(EpisodeSpan { episode_id: e.episode_id, start: out.actions.len(), len: e.len });
            let r = e.start..e.start + e.len;
            out.observations.extend_from_slice(&self.observations[r.start * d..r.end * d]);
            out.next_observations.extend_from_slice(&self.next_observations[r.start * d..r.end * d]);
            out.actions.extend_from_slice(&self.actions[r.clone()]);
            out.rewards.extend_from_slice(&self.rewards[r.clone()]);
            out.terminals.extend_from_slice(&self.terminals[r]);
        }
        out
    }

    fn record_len(&self) -> usize {
        8 * self.meta.obs_dim + 7
    }

    /// Serialized file contents.
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.meta;
        let records_start = HEADER_LEN + INDEX_ENTRY_LEN * self.episodes.len();
        let total = records_start + self.record_len() * self.transition_count() + 4;
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.push(m.encoding.tag());
        out.extend_from_slice(&(m.obs_dim as u32).to_le_bytes());
        out.extend_from_slice(&(m.num_actions as u32).to_le_bytes());
        out.extend_from_slice(&m.discount.to_le_bytes());
        out.extend_from_slice(&(self.transition_count() as u64).to_le_bytes());
        out.extend_from_slice(&(self.episode_count() as u64).to_le_bytes());
        out.extend_from_slice(&m.seed.to_le_bytes());
        let mut desc = [0u8; DESCRIPTOR_LEN];
        desc[..m.descriptor.len()].copy_from_slice(m.descriptor.as_bytes());
        out.extend_from_slice(&desc);
        for e in &self.episodes {
            out.extend_from_slice(&e.episode_id.to_le_bytes());
            let offset = (records_start + e.start * self.record_len()) as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(e.len as u32).to_le_bytes());
        }
        let d = m.obs_dim;
        for i in 0..self.transition_count() {
            for x in &self.observations[i * d..(i + 1) * d] {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out.extend_from_slice(&self.actions[i].to_le_bytes());
            out.extend_from_slice(&self.rewards[i].to_le_bytes());
            for x in &self.next_observations[i * d..(i + 1) * d] {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out.push(u8::from(self.terminals[i]));
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// CRC32 of the serialized form.
    pub fn checksum(&self) -> u32 {
        let bytes = self.to_bytes();
        u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"))
    }

    /// Parses and validates a serialized dataset.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ReplayError> {
        if bytes.len() < 12 || &bytes[..8] != DATASET_MAGIC {
            return Err(ReplayError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 8 };
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(ReplayError::Version(version));
        }
        let tag = r.u8()?;
        let obs_dim = r.u32()? as usize;
        let num_actions = r.u32()? as usize;
        let discount = r.f64()?;
        let count = r.u64()?;
        let episodes = r.u64()?;
        let seed = r.u64()?;
        let desc = r.take(DESCRIPTOR_LEN)?;

        let record_len = 8 * obs_dim as u64 + 7;
        let expected = (HEADER_LEN as u64)
            .checked_add(episodes.saturating_mul(INDEX_ENTRY_LEN as u64))
            .and_then(|v| v.checked_add(count.checked_mul(record_len)?))
            .and_then(|v| v.checked_add(4))
            .unwrap_or(u64::MAX);
        let got = bytes.len() as u64;
        if got < expected {
            return Err(ReplayError::Truncated { expected, got });
        }
        if got > expected {
            return Err(ReplayError::Corrupt(format!("{} trailing bytes", got - expected)));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(ReplayError::Checksum { stored, computed });
        }

        let encoding = ObsEncoding::from_tag(tag).ok_or_else(|| ReplayError::Corrupt(format!("encoding tag {tag}")))?;
        let end = desc.iter().position(|&b| b == 0).unwrap_or(DESCRIPTOR_LEN);
        if desc[end..].iter().any(|&b| b != 0) {
            return Err(ReplayError::Corrupt("descriptor padding is not zero".into()));
        }
        let descriptor = std::str::from_utf8(&desc[..end])
            .map_err(|_| ReplayError::Corrupt("descriptor is not UTF-8".into()))?
            .to_string();
        let meta = DatasetMeta { encoding, obs_dim, num_actions, discount, seed, descriptor };
        meta.validate()?;

        let count = count as usize;
        let records_start = HEADER_LEN + INDEX_ENTRY_LEN * episodes as usize;
        let mut ds = LoggedDataset::empty(meta);
        let mut start = 0usize;
        for _ in 0..episodes {
            let episode_id = r.u64()?;
            let offset = r.u64()?;
            let len = r.u32()? as usize;
            if offset != (records_start + start * record_len as usize) as u64 {
                return Err(ReplayError::Corrupt(format!("episode {episode_id} has offset {offset}")));
            }
            if len == 0 {
                return Err(ReplayError::Corrupt(format!("episode {episode_id} is empty")));
            }
            ds.episodes.push(EpisodeSpan { episode_id, start, len });
            start += len;
        }
        if start != count {
            return Err(ReplayError::Corrupt(format!("index covers {start} of {count} records")));
        }
        ds.observations.reserve(count * obs_dim);
        ds.next_observations.reserve(count * obs_dim);
        for _ in 0..count {
            for _ in 0..obs_dim {
                ds.observations.push(r.f32()?);
            }
            ds.actions.push(r.u16()?);
            ds.rewards.push(r.f32()?);
            for _ in 0..obs_dim {
                ds.next_observations.push(r.f32()?);
            }
            ds.terminals.push(match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(ReplayError::Corrupt(format!("terminal byte {b}"))),
            });
        }
        ds.check_invariants()?;
        Ok(ds)
    }

    fn check_invariants(&self) -> Result<(), ReplayError> {
        let mut tracker = EpisodeTracker::default();
        for t in self.transitions() {
            if t.action >= self.meta.num_actions {
                return Err(ReplayError::Corrupt(format!("action {} out of range", t.action)));
            }
            if !t.reward.is_finite() {
                return Err(ReplayError::NonFiniteReward);
            }
            tracker = tracker
                .check(t.episode_id, t.step_in_episode, t.terminal)
                .map_err(|e| ReplayError::Corrupt(e.to_string()))?;
        }
        Ok(())
    }
}

impl TransitionStore for LoggedDataset {
    fn len(&self) -> usize {
        self.actions.len()
    }

    fn obs_dim(&self) -> usize {
        self.meta.obs_dim
    }

    fn view(&self, i: usize) -> TransitionView<'_> {
        let d = self.meta.obs_dim;
        TransitionView {
            observation: &self.observations[i * d..(i + 1) * d],
            action: self.actions[i] as usize,
            reward: self.rewards[i],
            next_observation: &self.next_observations[i * d..(i + 1) * d],
            terminal: self.terminals[i],
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ReplayError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(ReplayError::Truncated { expected: end as u64, got: self.bytes.len() as u64 });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ReplayError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ReplayError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ReplayError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ReplayError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, ReplayError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ReplayError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Append-only builder for a [`LoggedDataset`]. Never evicts.
#[derive(Debug, Clone)]
pub struct DatasetWriter {
    data: LoggedDataset,
    tracker: EpisodeTracker,
}

impl DatasetWriter {
    pub fn new(meta: DatasetMeta) -> Result<Self, ReplayError> {
        meta.validate()?;
        Ok(DatasetWriter { data: LoggedDataset::empty(meta), tracker: EpisodeTracker::default() })
    }

    pub fn len(&self) -> usize {
        self.data.transition_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn append(&mut self, t: &Transition) -> Result<(), ReplayError> {
        check_shape(t, self.data.meta.obs_dim)?;
        if t.action >= self.data.meta.num_actions {
            return Err(ReplayError::ActionOutOfRange { action: t.action, num_actions: self.data.meta.num_actions });
        }
        self.tracker = self.tracker.check(t.episode_id, t.step_in_episode, t.terminal)?;
        let d = &mut self.data;
        if t.step_in_episode == 0 {
            d.episodes.push(EpisodeSpan { episode_id: t.episode_id, start: d.actions.len(), len: 0 });
        }
        d.episodes.last_mut().expect("episode opened").len += 1;
        d.observations.extend_from_slice(&t.observation);
        d.next_observations.extend_from_slice(&t.next_observation);
        d.actions.push(t.action as u16);
        d.rewards.push(t.reward);
        d.terminals.push(t.terminal);
        Ok(())
    }

    /// Seals the log. A trailing episode without a terminal transition is
    /// kept and reported by [`LoggedDataset::has_partial_final_episode`].
    pub fn finalize(self) -> LoggedDataset {
        self.data
    }
}

pub fn save_dataset(ds: &LoggedDataset, path: impl AsRef<Path>) -> Result<(), ReplayError> {
    fs::write(path, ds.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LoggedDataset, ReplayError> {
    let bytes = fs::read(path)?;
    LoggedDataset::from_bytes(&bytes)
}
