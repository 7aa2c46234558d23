use ofrl::env::{make_env, make_env_with, EnvKind, EnvParams, EnvState, MdpSpec, ObsEncoding};
use ofrl::oracle::{
    expected_return, induced_mdp, policy_evaluation, value_iteration, PolicySpec, UnvisitedRule, ValueIteration,
};
use ofrl::replay::{DatasetMeta, DatasetWriter, LoggedDataset, Transition};
use ofrl::rng::{stream, Stream};
use proptest::prelude::*;
use rand::Rng as _;

fn random_mdp(states: usize, actions: usize, seed: u64, discount: f64) -> MdpSpec {
    let p = EnvParams { discount: Some(discount), actions: Some(actions), ..EnvParams::default() };
    make_env_with(EnvKind::RandomMdp, states, seed, &p).unwrap()
}

fn index_meta(num_actions: usize, discount: f64) -> DatasetMeta {
    DatasetMeta {
        encoding: ObsEncoding::Index,
        obs_dim: 1,
        num_actions,
        discount,
        seed: 0,
        descriptor: "test;none".into(),
    }
}

fn tr(s: usize, a: usize, r: f32, next: usize, terminal: bool, ep: u64, step: u32) -> Transition {
    Transition {
        observation: vec![s as f32],
        action: a,
        reward: r,
        next_observation: vec![next as f32],
        terminal,
        episode_id: ep,
        step_in_episode: step,
    }
}

#[test]
fn two_state_chain_by_hand() {
    let mdp = make_env(EnvKind::Chain, 2, 0).unwrap().with_discount(0.5).unwrap();
    let q = value_iteration(&mdp, 1e-12).unwrap();
    for a in 0..mdp.num_actions() {
        assert!(q.get(1, 0) >= q.get(1, a));
    }
    assert!((q.state_value(1) - 1.0).abs() < 1e-12);
    assert!((q.state_value(0) - 0.5).abs() < 1e-12);
    assert!(q.row(2).iter().all(|v| *v == 0.0));
}

#[test]
fn zero_rewards_give_zero_values() {
    let base = random_mdp(5, 2, 4, 0.9);
    let zero = MdpSpec::new(
        5,
        2,
        (0..5)
            .flat_map(|s| (0..2).flat_map(move |a| (0..5).map(move |t| (s, a, t))))
            .map(|(s, a, t)| base.transition_prob(s, a, t))
            .collect(),
        vec![0.0; 10],
        vec![0.0; 10],
        1.0,
        0.9,
        vec![false; 5],
        vec![0.2; 5],
    )
    .unwrap();
    assert!(value_iteration(&zero, 1e-10).unwrap().values().iter().all(|v| *v == 0.0));
}

#[test]
fn uniform_policy_on_a_bandit() {
    // One decision state, two arms paying 0 and 1, then a terminal state.
    let mdp = MdpSpec::new(
        2,
        2,
        vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
        vec![0.0, 1.0, 0.0, 0.0],
        vec![0.0; 4],
        1.0,
        0.7,
        vec![false, true],
        vec![1.0, 0.0],
    )
    .unwrap();
    let q = policy_evaluation(&mdp, &PolicySpec::uniform(2, 2), 1e-12).unwrap();
    let v0: f64 = q.row(0).iter().sum::<f64>() / 2.0;
    assert!((v0 - 0.5).abs() < 1e-12);
}

#[test]
fn uniform_policy_matches_monte_carlo() {
    let mdp = random_mdp(5, 2, 11, 0.9);
    let pi = PolicySpec::uniform(5, 2);
    let exact = expected_return(&mdp, &policy_evaluation(&mdp, &pi, 1e-12).unwrap(), &pi);
    let episodes = 200_000;
    // 0.9^250 is below 1e-11; truncation bias is negligible.
    let horizon = 250;
    let mut env = EnvState::new(17, horizon);
    let mut rng = stream(17, Stream::Agent);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..episodes {
        env.reset(&mdp);
        let (mut g, mut disc) = (0.0, 1.0);
        loop {
            let out = env.step(&mdp, rng.random_range(0..2), 0.0).unwrap();
            g += disc * out.reward;
            disc *= 0.9;
            if out.terminal {
                break;
            }
        }
        sum += g;
        sq += g * g;
    }
    let mean = sum / episodes as f64;
    let se = ((sq / episodes as f64 - mean * mean) / episodes as f64).sqrt();
    assert!((mean - exact).abs() <= 3.0 * se, "exact {exact}, monte carlo {mean} ± {se}");
}

#[test]
fn count_ratio() {
    let mut w = DatasetWriter::new(index_meta(1, 0.9)).unwrap();
    for (ep, next) in [1usize, 1, 2, 1].into_iter().enumerate() {
        w.append(&tr(0, 0, 0.0, next, false, ep as u64, 0)).unwrap();
        w.append(&tr(next, 0, 0.0, 0, true, ep as u64, 1)).unwrap();
    }
    let ind = induced_mdp(&w.finalize(), Some(3), UnvisitedRule::SelfLoop).unwrap();
    assert_eq!(ind.mdp.transition_prob(0, 0, 1), 0.75);
    assert_eq!(ind.mdp.transition_prob(0, 0, 2), 0.25);
    assert_eq!(ind.visits(0, 0), 4);
}

#[test]
fn exhaustive_visit_recovers_a_deterministic_mdp() {
    // Ring of n states plus a terminal: action 1 stays, action 0 advances,
    // and advancing from the last state ends the episode.
    let n = 5;
    let na = 2;
    let total = n + 1;
    let mut transition = vec![0.0; total * na * total];
    let mut reward = vec![0.0; total * na];
    for s in 0..total {
        for a in 0..na {
            let next = if s == n {
                n
            } else if a == 1 {
                s
            } else {
                s + 1
            };
            transition[(s * na + a) * total + next] = 1.0;
            if s < n {
                reward[s * na + a] = 0.25 * (s as f64) - 0.5 * a as f64;
            }
        }
    }
    let mut initial = vec![0.0; total];
    initial[0] = 1.0;
    let mut terminals = vec![false; total];
    terminals[n] = true;
    let truth =
        MdpSpec::new(total, na, transition, reward, vec![0.0; total * na], 1.0, 0.8, terminals, initial).unwrap();

    let mut w = DatasetWriter::new(index_meta(na, 0.8)).unwrap();
    let mut step = 0;
    for s in 0..n {
        for a in [1, 0] {
            let next = if a == 1 { s } else { s + 1 };
            w.append(&tr(s, a, truth.reward(s, a) as f32, next, next == n, 0, step)).unwrap();
            step += 1;
        }
    }
    let ind = induced_mdp(&w.finalize(), Some(n), UnvisitedRule::SelfLoop).unwrap();
    assert_eq!(ind.absorbing_state, n);
    assert!(ind.covers(0..n));
    let m = &ind.mdp;
    assert_eq!(m.num_states(), truth.num_states());
    assert_eq!(m.discount(), truth.discount());
    assert_eq!(m.initial_distribution(), truth.initial_distribution());
    for s in 0..total {
        assert_eq!(m.is_terminal(s), truth.is_terminal(s));
        for a in 0..na {
            assert_eq!(m.transition_row(s, a), truth.transition_row(s, a), "row ({s}, {a})");
            assert_eq!(m.reward(s, a), truth.reward(s, a));
        }
    }
}

#[test]
fn epsilon_greedy_log_recovers_transition_probabilities() {
    let mdp = random_mdp(5, 2, 11, 0.9);
    let greedy = value_iteration(&mdp, 1e-10).unwrap().greedy_policy();
    let mut env = EnvState::new(3, usize::MAX);
    let mut rng = stream(3, Stream::Agent);
    let mut w = DatasetWriter::new(index_meta(2, 0.9)).unwrap();
    let steps = 100_000;
    let mut s = env.reset(&mdp).observation;
    for i in 0..steps {
        let a = if rng.random::<f64>() < 0.3 {
            rng.random_range(0..2)
        } else {
            greedy.row(s).iter().position(|p| *p == 1.0).unwrap()
        };
        let out = env.step(&mdp, a, 0.0).unwrap();
        w.append(&tr(s, a, out.reward as f32, out.observation, i + 1 == steps, 0, i as u32)).unwrap();
        s = out.observation;
    }
    let ind = induced_mdp(&w.finalize(), Some(5), UnvisitedRule::SelfLoop).unwrap();
    for s in 0..5 {
        for a in 0..2 {
            let n = ind.visits(s, a) as f64;
            assert!(n > 1000.0);
            for t in 0..5 {
                let p = mdp.transition_prob(s, a, t);
                let se = (p * (1.0 - p) / n).sqrt();
                // One logged transition (the closing one) goes to the absorbing state.
                let slack = 1.0 / n;
                let got = ind.mdp.transition_prob(s, a, t);
                assert!((got - p).abs() <= 3.0 * se + slack, "P({t}|{s},{a}) = {p}, estimated {got}");
            }
        }
    }
}

#[test]
fn empty_dataset_rejected() {
    let ds: LoggedDataset = DatasetWriter::new(index_meta(2, 0.9)).unwrap().finalize();
    assert!(induced_mdp(&ds, None, UnvisitedRule::SelfLoop).is_err());
}

#[test]
fn malformed_policy_rejected() {
    assert!(PolicySpec::new(1, 2, vec![0.5, 0.6]).is_err());
    assert!(PolicySpec::new(1, 2, vec![1.5, -0.5]).is_err());
    let mdp = random_mdp(3, 2, 0, 0.9);
    assert!(policy_evaluation(&mdp, &PolicySpec::uniform(4, 2), 1e-6).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn greedy_policy_attains_optimal_values(states in 1usize..8, actions in 1usize..4, seed in any::<u64>(), discount in 0.0f64..0.95) {
        let mdp = random_mdp(states, actions, seed, discount);
        let tol = 1e-9;
        let star = value_iteration(&mdp, tol).unwrap();
        prop_assert!(star.bellman_residual() <= tol);
        let q_pi = policy_evaluation(&mdp, &star.greedy_policy(), tol).unwrap();
        for (a, b) in star.values().iter().zip(q_pi.values()) {
            prop_assert!((a - b).abs() <= 2.0 * tol, "{} vs {}", a, b);
        }
    }

    #[test]
    fn optimistic_iterates_decrease(states in 1usize..8, seed in any::<u64>(), discount in 0.0f64..0.95) {
        let mdp = random_mdp(states, 3, seed, discount);
        // Rewards lie in [-1, 1].
        let mut vi = ValueIteration::new(&mdp, 1.0 / (1.0 - discount));
        let mut prev = vi.values().to_vec();
        for _ in 0..30 {
            vi.sweep();
            for (new, old) in vi.values().iter().zip(&prev) {
                prop_assert!(*new <= *old + 1e-12);
            }
            prev = vi.values().to_vec();
        }
    }
}
