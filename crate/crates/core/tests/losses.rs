use ofrl::env::ObsEncoding;
use ofrl::losses::{
    averaged_ensemble_dqn_loss, dqn_loss, ensemble_dqn_loss, huber, huber_grad, qr_dqn_loss, quantile_midpoints,
    rem_loss, rem_loss_per_sample, sample_simplex, LossParams, MiniBatch, SimplexWeights,
};
use ofrl::qfunc::{Activation, Architecture, EnsembleSpec, QEnsemble, TargetSnapshot, Topology};
use ofrl::rng::{stream, Rng, Stream};
use proptest::prelude::*;
use rand::Rng as _;

struct Case {
    q: QEnsemble,
    t: QEnsemble,
    batch: MiniBatch,
    p: LossParams,
}

fn case(arch: Architecture, heads: usize, seed: u64) -> Case {
    let (ns, na) = (4, 3);
    let spec = EnsembleSpec {
        architecture: arch,
        topology: if seed % 2 == 0 { Topology::MultiHead } else { Topology::Separate },
        heads,
        num_states: ns,
        num_actions: na,
        encoding: ObsEncoding::OneHot,
        hidden: vec![6],
        activation: Activation::Relu,
        init_scale: 1.0,
    };
    let mut rng = stream(seed, Stream::Init);
    let q = QEnsemble::new(spec.clone(), &mut rng).unwrap();
    let t = QEnsemble::new(spec, &mut rng).unwrap();
    let n = 7;
    let mut obs = Vec::new();
    let mut next = Vec::new();
    for _ in 0..n {
        obs.extend(ObsEncoding::OneHot.encode(rng.random_range(0..ns), ns));
        next.extend(ObsEncoding::OneHot.encode(rng.random_range(0..ns), ns));
    }
    let batch = MiniBatch::new(
        ns,
        obs,
        (0..n).map(|_| rng.random_range(0..na)).collect(),
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        next,
        (0..n).map(|_| rng.random::<f64>() < 0.3).collect(),
    )
    .unwrap();
    let p = LossParams::new(rng.random_range(0.0..0.99), rng.random_range(0.3..2.0));
    Case { q, t, batch, p }
}

fn arch() -> impl Strategy<Value = Architecture> {
    prop_oneof![Just(Architecture::Tabular), Just(Architecture::Linear), Just(Architecture::Mlp)]
}

/// Per-sample online row and next-state target rows, straight from forward.
fn rows(c: &Case, i: usize) -> (Vec<Vec<f64>>, Option<Vec<Vec<f64>>>) {
    let k = c.q.heads();
    let on = c.q.forward(c.batch.observation(i)).unwrap();
    let online = (0..k).map(|h| on.row(h).to_vec()).collect();
    let next = (!c.batch.terminals()[i]).then(|| {
        let v = c.t.forward(c.batch.next_observation(i)).unwrap();
        (0..k).map(|h| v.row(h).to_vec()).collect()
    });
    (online, next)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn first_argmax(v: &[f64]) -> usize {
    let m = max(v);
    v.iter().position(|x| *x == m).unwrap()
}

fn oracle_ensemble(c: &Case) -> f64 {
    let (n, k) = (c.batch.len(), c.q.heads());
    let mut total = 0.0;
    for i in 0..n {
        let (on, next) = rows(c, i);
        let (a, r) = (c.batch.actions()[i], c.batch.rewards()[i]);
        for h in 0..k {
            let y = r + next.as_ref().map_or(0.0, |nx| c.p.discount * max(&nx[h]));
            total += huber(on[h][a] - y, c.p.huber);
        }
    }
    total / (n * k) as f64
}

fn oracle_averaged(c: &Case) -> f64 {
    let (n, k) = (c.batch.len(), c.q.heads());
    let mut total = 0.0;
    for i in 0..n {
        let (on, next) = rows(c, i);
        let (a, r) = (c.batch.actions()[i], c.batch.rewards()[i]);
        let y = r + next.as_ref().map_or(0.0, |nx| {
            let avg: Vec<f64> = (0..nx[0].len()).map(|b| nx.iter().map(|row| row[b]).sum::<f64>() / k as f64).collect();
            c.p.discount * max(&avg)
        });
        for row in &on {
            total += huber(row[a] - y, c.p.huber);
        }
    }
    total / (n * k) as f64
}

fn oracle_rem(c: &Case, alpha: &[f64]) -> f64 {
    let n = c.batch.len();
    let mut total = 0.0;
    for i in 0..n {
        let (on, next) = rows(c, i);
        let (a, r) = (c.batch.actions()[i], c.batch.rewards()[i]);
        let mixed: f64 = on.iter().zip(alpha).map(|(row, w)| w * row[a]).sum();
        let y = r + next.as_ref().map_or(0.0, |nx| {
            let mix: Vec<f64> =
                (0..nx[0].len()).map(|b| nx.iter().zip(alpha).map(|(row, w)| w * row[b]).sum()).collect();
            c.p.discount * max(&mix)
        });
        total += huber(mixed - y, c.p.huber);
    }
    total / n as f64
}

fn oracle_qr(c: &Case) -> f64 {
    let (n, k) = (c.batch.len(), c.q.heads());
    let kappa = c.p.huber;
    let mut total = 0.0;
    for i in 0..n {
        let (on, next) = rows(c, i);
        let (a, r) = (c.batch.actions()[i], c.batch.rewards()[i]);
        let targets: Vec<f64> = match &next {
            None => vec![r; k],
            Some(nx) => {
                let mean: Vec<f64> =
                    (0..nx[0].len()).map(|b| nx.iter().map(|row| row[b]).sum::<f64>() / k as f64).collect();
                let star = first_argmax(&mean);
                nx.iter().map(|row| r + c.p.discount * row[star]).collect()
            }
        };
        for (h, row) in on.iter().enumerate() {
            let tau = (2 * h + 1) as f64 / (2 * k) as f64;
            for t in &targets {
                let u = t - row[a];
                let indicator = if u < 0.0 { 1.0 } else { 0.0 };
                total += (tau - indicator).abs() * huber(u, kappa) / kappa / k as f64;
            }
        }
    }
    total / n as f64
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_match_direct_evaluation(arch in arch(), heads in 1usize..5, seed in any::<u64>()) {
        let c = case(arch, heads, seed);
        let t = TargetSnapshot::new(&c.t);
        let alpha = sample_simplex(heads, &mut stream(seed, Stream::BatchMixture));
        let e = ensemble_dqn_loss(&c.q, &t, &c.batch, &c.p).unwrap().loss;
        prop_assert!(close(e, oracle_ensemble(&c)), "{} vs {}", e, oracle_ensemble(&c));
        let av = averaged_ensemble_dqn_loss(&c.q, &t, &c.batch, &c.p).unwrap().loss;
        prop_assert!(close(av, oracle_averaged(&c)));
        let rem = rem_loss(&c.q, &t, &c.batch, &alpha, &c.p).unwrap().loss;
        prop_assert!(close(rem, oracle_rem(&c, alpha.as_slice())));
        let qr = qr_dqn_loss(&c.q, &t, &c.batch, &c.p).unwrap().loss;
        prop_assert!(close(qr, oracle_qr(&c)), "{} vs {}", qr, oracle_qr(&c));
        if heads == 1 {
            prop_assert_eq!(dqn_loss(&c.q, &t, &c.batch, &c.p).unwrap().loss, e);
        } else {
            prop_assert!(dqn_loss(&c.q, &t, &c.batch, &c.p).is_err());
        }
    }

    #[test]
    fn identical_heads_collapse_to_dqn(arch in arch(), heads in 1usize..5, seed in any::<u64>()) {
        let c = case(arch, heads, seed);
        let (q, t) = (c.q.broadcast_head(0), c.t.broadcast_head(0));
        let single = dqn_loss(&q.head(0), &TargetSnapshot::new(&t.head(0)), &c.batch, &c.p).unwrap().loss;
        let tt = TargetSnapshot::new(&t);
        let alpha = sample_simplex(heads, &mut stream(seed, Stream::BatchMixture));
        for l in [
            rem_loss(&q, &tt, &c.batch, &alpha, &c.p).unwrap().loss,
            ensemble_dqn_loss(&q, &tt, &c.batch, &c.p).unwrap().loss,
            averaged_ensemble_dqn_loss(&q, &tt, &c.batch, &c.p).unwrap().loss,
        ] {
            prop_assert!(close(l, single), "{} vs {}", l, single);
        }
    }

    #[test]
    fn one_hot_mixture_is_the_head_loss(arch in arch(), heads in 1usize..5, seed in any::<u64>(), k in 0usize..4) {
        let c = case(arch, heads, seed);
        let k = k % heads;
        let rem = rem_loss(&c.q, &TargetSnapshot::new(&c.t), &c.batch, &SimplexWeights::one_hot(k, heads), &c.p).unwrap();
        let single = dqn_loss(&c.q.head(k), &TargetSnapshot::new(&c.t.head(k)), &c.batch, &c.p).unwrap();
        prop_assert!((rem.loss - single.loss).abs() <= 1e-12);
    }

    #[test]
    fn shared_mixture_per_sample_equals_batch_mixture(arch in arch(), heads in 1usize..5, seed in any::<u64>()) {
        let c = case(arch, heads, seed);
        let t = TargetSnapshot::new(&c.t);
        let alpha = sample_simplex(heads, &mut stream(seed, Stream::BatchMixture));
        let a = rem_loss(&c.q, &t, &c.batch, &alpha, &c.p).unwrap();
        let b = rem_loss_per_sample(&c.q, &t, &c.batch, &vec![alpha; c.batch.len()], &c.p).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn losses_are_nonnegative_with_finite_gradients(arch in arch(), heads in 1usize..5, seed in any::<u64>()) {
        let c = case(arch, heads, seed);
        let t = TargetSnapshot::new(&c.t);
        let alpha = sample_simplex(heads, &mut stream(seed, Stream::BatchMixture));
        for r in [
            ensemble_dqn_loss(&c.q, &t, &c.batch, &c.p).unwrap(),
            averaged_ensemble_dqn_loss(&c.q, &t, &c.batch, &c.p).unwrap(),
            rem_loss(&c.q, &t, &c.batch, &alpha, &c.p).unwrap(),
            qr_dqn_loss(&c.q, &t, &c.batch, &c.p).unwrap(),
        ] {
            prop_assert!(r.loss >= 0.0);
            prop_assert!(r.grad.iter().all(|g| g.is_finite()));
            prop_assert!(r.max_abs_td >= r.mean_abs_td);
        }
    }

    #[test]
    fn huber_is_continuous_and_differentiable_at_the_knee(lambda in 0.01f64..10.0) {
        let e = 1e-9;
        prop_assert!((huber(lambda + e, lambda) - huber(lambda - e, lambda)).abs() < 1e-6 * lambda.max(1.0));
        prop_assert!((huber_grad(lambda + e, lambda) - huber_grad(lambda - e, lambda)).abs() < 1e-6);
        prop_assert_eq!(huber(-lambda * 3.0, lambda), huber(lambda * 3.0, lambda));
        prop_assert!(huber(0.0, lambda) == 0.0 && huber(1e-3, lambda) > 0.0);
    }

    #[test]
    fn simplex_draws_are_valid(k in 1usize..50, seed in any::<u64>()) {
        let mut rng: Rng = stream(seed, Stream::BatchMixture);
        let a = sample_simplex(k, &mut rng);
        prop_assert_eq!(a.len(), k);
        prop_assert!(a.as_slice().iter().all(|x| *x >= 0.0));
        prop_assert!((a.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(SimplexWeights::new(a.as_slice().to_vec()).is_ok());
    }
}

#[test]
fn converged_quantiles_have_zero_loss() {
    // One-step episode returning 2: every quantile equal to 2 is a fixed point.
    let spec = EnsembleSpec {
        architecture: Architecture::Tabular,
        topology: Topology::MultiHead,
        heads: 3,
        num_states: 2,
        num_actions: 1,
        encoding: ObsEncoding::Index,
        hidden: vec![],
        activation: Activation::Relu,
        init_scale: 0.0,
    };
    let q = QEnsemble::from_params(spec, vec![2.0, 0.0, 2.0, 0.0, 2.0, 0.0]).unwrap();
    let batch = MiniBatch::new(1, vec![0.0], vec![0], vec![2.0], vec![1.0], vec![true]).unwrap();
    let r = qr_dqn_loss(&q, &TargetSnapshot::new(&q), &batch, &LossParams::new(0.9, 1.0)).unwrap();
    assert_eq!(r.loss, 0.0);
    assert!(r.grad.iter().all(|g| *g == 0.0));
    assert_eq!(quantile_midpoints(4), vec![0.125, 0.375, 0.625, 0.875]);
}

#[test]
fn invalid_simplex_rejected() {
    assert!(SimplexWeights::new(vec![0.5, 0.6]).is_err());
    assert!(SimplexWeights::new(vec![1.5, -0.5]).is_err());
    assert!(SimplexWeights::new(vec![]).is_err());
}
