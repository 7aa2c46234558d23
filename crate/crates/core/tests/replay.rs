use std::collections::BTreeMap;

use ofrl::config::TrainConfig;
use ofrl::env::{EnvKind, ObsEncoding};
use ofrl::qfunc::Architecture;
use ofrl::replay::{
    load_dataset, sample_batch, save_dataset, subsample_trajectories, take_prefix, DatasetMeta, DatasetWriter,
    LoggedDataset, ReplayBuffer, ReplayError, Transition, TransitionStore,
};
use ofrl::rng::{stream, Stream};
use ofrl::train::{build_env, run_online_collection};
use proptest::prelude::*;

fn meta(dim: usize) -> DatasetMeta {
    DatasetMeta {
        encoding: if dim == 1 { ObsEncoding::Index } else { ObsEncoding::OneHot },
        obs_dim: dim,
        num_actions: 3,
        discount: 0.97,
        seed: 42,
        descriptor: "chain:5:0;dqn".into(),
    }
}

/// Builds a dataset from episode lengths; a trailing `open` episode has no
/// terminal flag.
fn build(dim: usize, lens: &[u32], open: u32) -> LoggedDataset {
    let mut w = DatasetWriter::new(meta(dim)).unwrap();
    let mut id = 0u64;
    let mut push = |len: u32, close: bool, w: &mut DatasetWriter| {
        for s in 0..len {
            let x = (id as usize * 7 + s as usize) % dim;
            let mut obs = vec![0.0f32; dim];
            obs[x] = if dim == 1 { x as f32 } else { 1.0 };
            w.append(&Transition {
                observation: obs.clone(),
                action: (s % 3) as usize,
                reward: id as f32 + s as f32 * 0.5,
                next_observation: obs,
                terminal: close && s + 1 == len,
                episode_id: id,
                step_in_episode: s,
            })
            .unwrap();
        }
        id += 1;
    };
    for &l in lens {
        push(l, true, &mut w);
    }
    if open > 0 {
        push(open, false, &mut w);
    }
    w.finalize()
}

fn lens() -> impl Strategy<Value = (Vec<u32>, u32)> {
    (prop::collection::vec(1u32..12, 0..25), prop_oneof![Just(0u32), 1u32..6])
}

/// Groups transitions by episode id, checking each group is contiguous.
fn episodes_of(ds: &LoggedDataset) -> BTreeMap<u64, Vec<Transition>> {
    let mut out: BTreeMap<u64, Vec<Transition>> = BTreeMap::new();
    for t in ds.transitions() {
        out.entry(t.episode_id).or_default().push(t);
    }
    out
}

#[test]
fn byte_layout_matches_the_documented_format() {
    let ds = build(2, &[1], 0);
    let mut want = Vec::new();
    want.extend_from_slice(b"OFRLDS01");
    want.extend_from_slice(&1u32.to_le_bytes());
    want.push(ObsEncoding::OneHot.tag());
    want.extend_from_slice(&2u32.to_le_bytes());
    want.extend_from_slice(&3u32.to_le_bytes());
    want.extend_from_slice(&0.97f64.to_le_bytes());
    want.extend_from_slice(&1u64.to_le_bytes());
    want.extend_from_slice(&1u64.to_le_bytes());
    want.extend_from_slice(&42u64.to_le_bytes());
    let mut desc = [0u8; 64];
    desc[..13].copy_from_slice(b"chain:5:0;dqn");
    want.extend_from_slice(&desc);
    let records_at = want.len() as u64 + 20;
    want.extend_from_slice(&0u64.to_le_bytes());
    want.extend_from_slice(&records_at.to_le_bytes());
    want.extend_from_slice(&1u32.to_le_bytes());
    for x in [1.0f32, 0.0] {
        want.extend_from_slice(&x.to_le_bytes());
    }
    want.extend_from_slice(&0u16.to_le_bytes());
    want.extend_from_slice(&0.0f32.to_le_bytes());
    for x in [1.0f32, 0.0] {
        want.extend_from_slice(&x.to_le_bytes());
    }
    want.push(1);
    let crc = crc32fast_oracle(&want);
    want.extend_from_slice(&crc.to_le_bytes());
    assert_eq!(ds.to_bytes(), want);
}

/// Bitwise CRC-32 (IEEE, reflected), written out independently.
fn crc32fast_oracle(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

#[test]
fn specific_corruptions_give_specific_errors() {
    let bytes = build(3, &[4, 2], 0).to_bytes();
    let mut b = bytes.clone();
    b[0] = b'X';
    assert_eq!(LoggedDataset::from_bytes(&b), Err(ReplayError::BadMagic));
    let mut b = bytes.clone();
    b[8] = 9;
    assert_eq!(LoggedDataset::from_bytes(&b), Err(ReplayError::Version(9)));
    assert!(matches!(LoggedDataset::from_bytes(&bytes[..bytes.len() - 10]), Err(ReplayError::Truncated { .. })));
    let mut b = bytes.clone();
    let n = b.len();
    b[n - 12] ^= 0x40;
    assert!(matches!(LoggedDataset::from_bytes(&b), Err(ReplayError::Checksum { .. })));
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ofrlds");
    let ds = build(4, &[3, 5, 1], 2);
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);
    assert!(back.has_partial_final_episode());
    assert_eq!(std::fs::read(&path).unwrap(), ds.to_bytes());
    assert!(load_dataset(dir.path().join("missing")).is_err());
}

#[test]
fn tenth_of_a_collected_log() {
    let mut c = TrainConfig::default();
    c.env.kind = EnvKind::Gridworld;
    c.env.size = 6;
    c.agent.architecture = Architecture::Tabular;
    c.optimizer.lr = 5e-5;
    c.train.iterations = 20;
    c.eval.episodes = 5;
    let mdp = build_env(&c).unwrap();
    let ds = run_online_collection(&c, &mdp).unwrap().dataset;
    let longest = ds.complete_episodes().iter().map(|e| e.len).max().unwrap();
    let total: usize = ds.complete_episodes().iter().map(|e| e.len).sum();
    for seed in 0..10 {
        let sub = subsample_trajectories(&ds, 0.1, &mut stream(seed, Stream::Sampling)).unwrap();
        let n = sub.transition_count() as f64;
        assert!(n >= 0.1 * total as f64 && n < 0.1 * total as f64 + longest as f64);
    }
    // The collecting learner improves, so early data is worse than late data.
    let tenth = ds.transition_count() / 10;
    let head = take_prefix(&ds, tenth).unwrap().average_return().unwrap();
    let tail_eps: Vec<f64> = {
        let returns = ds.episode_returns();
        let complete = ds.complete_episodes();
        let cutoff = ds.transition_count() - tenth;
        complete.iter().zip(returns).filter(|(e, _)| e.start >= cutoff).map(|(_, r)| r).collect()
    };
    let tail = tail_eps.iter().sum::<f64>() / tail_eps.len() as f64;
    assert!(head <= tail, "prefix average {head}, suffix average {tail}");
}

#[test]
fn sampling_reproduces_and_rejects_empty() {
    let ds = build(2, &[5, 5, 5], 0);
    let a = sample_batch(&ds, 16, &mut stream(1, Stream::Sampling)).unwrap();
    let b = sample_batch(&ds, 16, &mut stream(1, Stream::Sampling)).unwrap();
    assert_eq!(a, b);
    let empty = ReplayBuffer::new(4, 2).unwrap();
    assert_eq!(sample_batch(&empty, 4, &mut stream(1, Stream::Sampling)), Err(ReplayError::Empty));
    assert_eq!(ReplayBuffer::new(0, 2).err(), Some(ReplayError::ZeroCapacity));
}

#[test]
fn contiguity_errors() {
    let mut w = DatasetWriter::new(meta(1)).unwrap();
    let t = |ep, step, terminal| Transition {
        observation: vec![0.0],
        action: 0,
        reward: 0.0,
        next_observation: vec![0.0],
        terminal,
        episode_id: ep,
        step_in_episode: step,
    };
    w.append(&t(0, 0, false)).unwrap();
    assert!(matches!(w.append(&t(0, 2, false)), Err(ReplayError::StepGap { .. })));
    assert!(matches!(w.append(&t(1, 0, false)), Err(ReplayError::UnfinishedEpisode { .. })));
    w.append(&t(0, 1, true)).unwrap();
    assert!(matches!(w.append(&t(0, 2, false)), Err(ReplayError::AfterTerminal { .. })));
    assert_eq!(w.finalize().transition_count(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_is_bit_exact((l, open) in lens(), dim in 1usize..6) {
        let ds = build(dim, &l, open);
        let bytes = ds.to_bytes();
        let back = LoggedDataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.transition_count(), l.iter().sum::<u32>() as usize + open as usize);
        prop_assert_eq!(back.complete_episodes().len(), l.len());
        prop_assert_eq!(back.has_partial_final_episode(), open > 0);
    }

    #[test]
    fn any_single_bit_flip_is_detected((l, open) in lens(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let bytes = build(2, &l, open).to_bytes();
        let mut bad = bytes.clone();
        let i = pos.index(bad.len());
        bad[i] ^= 1 << bit;
        prop_assert!(LoggedDataset::from_bytes(&bad).is_err());
    }

    #[test]
    fn subsamples_are_whole((l, open) in lens(), fraction in 0.001f64..=1.0, seed in any::<u64>()) {
        prop_assume!(!l.is_empty());
        let ds = build(2, &l, open);
        let sub = subsample_trajectories(&ds, fraction, &mut stream(seed, Stream::Sampling)).unwrap();
        let original = episodes_of(&ds);
        let total: usize = l.iter().sum::<u32>() as usize;
        prop_assert!(sub.transition_count() as f64 >= fraction * total as f64);
        prop_assert!(!sub.has_partial_final_episode());
        for (id, ts) in episodes_of(&sub) {
            prop_assert_eq!(Some(&ts), original.get(&id));
            prop_assert!(ts.last().unwrap().terminal);
        }
        let again = subsample_trajectories(&ds, fraction, &mut stream(seed, Stream::Sampling)).unwrap();
        prop_assert_eq!(again, sub);
    }

    #[test]
    fn prefixes_end_on_episode_boundaries((l, open) in lens(), k in any::<prop::sample::Index>()) {
        let ds = build(2, &l, open);
        prop_assume!(ds.transition_count() > 0);
        let k = 1 + k.index(ds.transition_count());
        let p = take_prefix(&ds, k).unwrap();
        prop_assert!(p.transition_count() >= k);
        let all: Vec<_> = ds.transitions().collect();
        let got: Vec<_> = p.transitions().collect();
        prop_assert_eq!(&all[..got.len()], &got[..]);
        // The prefix ends where an episode ends in the source.
        let last = got.last().unwrap();
        prop_assert!(got.len() == all.len() || all[got.len()].episode_id != last.episode_id);
    }

    #[test]
    fn fifo_holds_the_most_recent(capacity in 1usize..20, n in 0usize..60) {
        let mut buf = ReplayBuffer::new(capacity, 1).unwrap();
        for i in 0..n {
            buf.append(&Transition {
                observation: vec![i as f32],
                action: 0,
                reward: i as f32,
                next_observation: vec![0.0],
                terminal: false,
                episode_id: 0,
                step_in_episode: i as u32,
            }).unwrap();
        }
        prop_assert_eq!(buf.len(), n.min(capacity));
        let held: Vec<f32> = (0..buf.len()).map(|i| buf.view(i).reward).collect();
        let want: Vec<f32> = (n.saturating_sub(capacity)..n).map(|i| i as f32).collect();
        prop_assert_eq!(held, want);
    }
}
