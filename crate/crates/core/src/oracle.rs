//! Exact dynamic programming on tabular MDPs.

use std::io::Write;

use thiserror::Error;

use crate::env::{MdpSpec, ObsEncoding};
use crate::replay::{LoggedDataset, TransitionStore};

/// Sweep cap for the iterative solvers.
pub const MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("no convergence after {sweeps} sweeps (residual {residual})")]
    NonConvergence { sweeps: usize, residual: f64 },
    #[error("tolerance must be positive and finite")]
    InvalidTolerance,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("dataset has no transitions")]
    EmptyDataset,
    #[error("observation does not decode to a state below {0}")]
    BadObservation(usize),
    #[error("induced model is invalid: {0}")]
    InvalidModel(String),
}

/// `Q[s][a]` with the discount it was solved under.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
    discount: f64,
    bellman_residual: f64,
}

impl QTable {
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Sup-norm residual measured when the solver stopped.
    pub fn bellman_residual(&self) -> f64 {
        self.bellman_residual
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `max_a Q(s, a)`.
    pub fn state_value(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy deterministic policy; the first maximizing action on ties.
    pub fn greedy_policy(&self) -> PolicySpec {
        let actions = (0..self.num_states).map(|s| crate::qfunc::argmax(self.row(s))).collect::<Vec<_>>();
        PolicySpec::deterministic(&actions, self.num_actions).expect("actions in range")
    }

    /// Writes `state,action,value` rows with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["state", "action", "value"])?;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                w.write_record([s.to_string(), a.to_string(), format!("{:.12e}", self.get(s, a))])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Stochastic policy `π[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    num_actions: usize,
    probs: Vec<f64>,
}

impl PolicySpec {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self, OracleError> {
        if num_actions == 0 || probs.len() != num_states * num_actions {
            return Err(OracleError::InvalidPolicy(format!(
                "{} entries for {num_states} x {num_actions}",
                probs.len()
            )));
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(OracleError::InvalidPolicy(format!("negative entry in row {s}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(OracleError::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(PolicySpec { num_actions, probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        PolicySpec { num_actions, probs: vec![1.0 / num_actions as f64; num_states * num_actions] }
    }

    pub fn deterministic(actions: &[usize], num_actions: usize) -> Result<Self, OracleError> {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(OracleError::InvalidPolicy(format!("action {a} in state {s}")));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Ok(PolicySpec { num_actions, probs })
    }

    pub fn num_states(&self) -> usize {
        self.probs.len() / self.num_actions
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }
}

/// How next-state values are aggregated in a backup.
enum Backup<'a> {
    Optimal,
    Policy(&'a PolicySpec),
}

/// One Bellman backup of `q`; terminal states stay at zero. Returns the new
/// table and the sup-norm change.
fn backup(mdp: &MdpSpec, q: &[f64], how: &Backup<'_>) -> (Vec<f64>, f64) {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let v: Vec<f64> = (0..ns)
        .map(|s| {
            let row = &q[s * na..(s + 1) * na];
            match how {
                Backup::Optimal => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Backup::Policy(pi) => row.iter().zip(pi.row(s)).map(|(q, p)| q * p).sum(),
            }
        })
        .collect();
    let mut next = vec![0.0; ns * na];
    let mut delta = 0.0_f64;
    for s in 0..ns {
        if mdp.is_terminal(s) {
            continue;
        }
        for a in 0..na {
            let ev: f64 = mdp.transition_row(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
            let val = mdp.reward(s, a) + mdp.discount() * ev;
            delta = delta.max((val - q[s * na + a]).abs());
            next[s * na + a] = val;
        }
    }
    (next, delta)
}

/// Step-by-step optimal value iteration from an arbitrary starting table.
#[derive(Debug, Clone)]
pub struct ValueIteration<'a> {
    mdp: &'a MdpSpec,
    values: Vec<f64>,
}

impl<'a> ValueIteration<'a> {
    /// Starts every non-terminal entry at `initial`.
    pub fn new(mdp: &'a MdpSpec, initial: f64) -> Self {
        let na = mdp.num_actions();
        let values = (0..mdp.num_states() * na).map(|i| if mdp.is_terminal(i / na) { 0.0 } else { initial }).collect();
        ValueIteration { mdp, values }
    }

    /// Applies one sweep and returns the sup-norm change.
    pub fn sweep(&mut self) -> f64 {
        let (next, delta) = backup(self.mdp, &self.values, &Backup::Optimal);
        self.values = next;
        delta
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn solve(mdp: &MdpSpec, tol: f64, how: Backup<'_>) -> Result<QTable, OracleError> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(OracleError::InvalidTolerance);
    }
    let mut q = vec![0.0; mdp.num_states() * mdp.num_actions()];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        let (next, delta) = backup(mdp, &q, &how);
        residual = delta;
        if delta <= tol {
            // `q` itself satisfies the residual bound just measured.
            return Ok(QTable {
                num_states: mdp.num_states(),
                num_actions: mdp.num_actions(),
                values: q,
                discount: mdp.discount(),
                bellman_residual: residual,
            });
        }
        q = next;
    }
    Err(OracleError::NonConvergence { sweeps: MAX_SWEEPS, residual })
}

/// `Q*` to sup-norm Bellman residual `tol`.
pub fn value_iteration(mdp: &MdpSpec, tol: f64) -> Result<QTable, OracleError> {
    solve(mdp, tol, Backup::Optimal)
}

/// `Q^π` to sup-norm Bellman residual `tol`.
pub fn policy_evaluation(mdp: &MdpSpec, policy: &PolicySpec, tol: f64) -> Result<QTable, OracleError> {
    if policy.num_states() != mdp.num_states() || policy.num_actions() != mdp.num_actions() {
        return Err(OracleError::ShapeMismatch(format!(
            "policy is {} x {}, mdp is {} x {}",
            policy.num_states(),
            policy.num_actions(),
            mdp.num_states(),
            mdp.num_actions()
        )));
    }
    solve(mdp, tol, Backup::Policy(policy))
}

/// Expected return from the initial distribution when following `policy`.
pub fn expected_return(mdp: &MdpSpec, q: &QTable, policy: &PolicySpec) -> f64 {
    mdp.initial_distribution()
        .iter()
        .enumerate()
        .map(|(s, mu)| mu * q.row(s).iter().zip(policy.row(s)).map(|(q, p)| q * p).sum::<f64>())
        .sum()
}

/// Model for state-action pairs the dataset never visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnvisitedRule {
    /// Zero-reward self-loop.
    #[default]
    SelfLoop,
    /// Zero-reward move into the absorbing state.
    Absorb,
}

/// Empirical MDP estimated from a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedMdp {
    pub mdp: MdpSpec,
    /// Index of the added absorbing state, equal to the observed state count.
    pub absorbing_state: usize,
    /// Visit count of each `(s, a)` of the original state space.
    pub visits: Vec<u64>,
}

impl InducedMdp {
    pub fn visits(&self, s: usize, a: usize) -> u64 {
        self.visits[s * self.mdp.num_actions() + a]
    }

    /// True when every `(s, a)` with `s` in `states` was observed.
    pub fn covers(&self, states: impl IntoIterator<Item = usize>) -> bool {
        let na = self.mdp.num_actions();
        states.into_iter().all(|s| (0..na).all(|a| self.visits(s, a) > 0))
    }
}

/// Count-based MDP estimate. States are decoded from observations; the state
/// space is `num_states` (for index encodings) or the observation dimension
/// (for one-hot). One extra absorbing zero-reward state receives every
/// transition flagged terminal. The start distribution is the empirical
/// distribution of episode start states, uniform if none is recorded.
pub fn induced_mdp(
    dataset: &LoggedDataset,
    num_states: Option<usize>,
    fallback: UnvisitedRule,
) -> Result<InducedMdp, OracleError> {
    if dataset.is_empty() {
        return Err(OracleError::EmptyDataset);
    }
    let meta = dataset.meta();
    let ns = match (meta.encoding, num_states) {
        (_, Some(n)) => n,
        (ObsEncoding::OneHot, None) => meta.obs_dim,
        (ObsEncoding::Index, None) => {
            let mut max = 0;
            for i in 0..dataset.len() {
                let v = dataset.view(i);
                for obs in [v.observation, v.next_observation] {
                    max = max.max(meta.encoding.decode(obs).ok_or(OracleError::BadObservation(usize::MAX))?);
                }
            }
            max + 1
        }
    };
    let na = meta.num_actions;
    let total = ns + 1;
    let absorbing = ns;
    let decode = |obs: &[f32]| match meta.encoding.decode(obs) {
        Some(s) if s < ns => Ok(s),
        _ => Err(OracleError::BadObservation(ns)),
    };
    let mut counts = vec![0u64; total * na * total];
    let mut reward_sum = vec![0.0f64; total * na];
    let mut visits = vec![0u64; total * na];
    for i in 0..dataset.len() {
        let v = dataset.view(i);
        let s = decode(v.observation)?;
        let next = if v.terminal { absorbing } else { decode(v.next_observation)? };
        let sa = s * na + v.action;
        counts[sa * total + next] += 1;
        reward_sum[sa] += v.reward as f64;
        visits[sa] += 1;
    }
    let mut transition = vec![0.0; total * na * total];
    let mut reward = vec![0.0; total * na];
    for s in 0..total {
        for a in 0..na {
            let sa = s * na + a;
            let row = &mut transition[sa * total..(sa + 1) * total];
            if visits[sa] == 0 {
                let to = match (s == absorbing, fallback) {
                    (true, _) | (false, UnvisitedRule::SelfLoop) => s,
                    (false, UnvisitedRule::Absorb) => absorbing,
                };
                row[to] = 1.0;
            } else {
                let n = visits[sa] as f64;
                for (p, &c) in row.iter_mut().zip(&counts[sa * total..(sa + 1) * total]) {
                    *p = c as f64 / n;
                }
                reward[sa] = reward_sum[sa] / n;
            }
        }
    }
    let mut initial = vec![0.0; total];
    let starts = dataset.episodes();
    if starts.is_empty() {
        initial[..ns].iter_mut().for_each(|p| *p = 1.0 / ns as f64);
    } else {
        for e in starts {
            initial[decode(dataset.view(e.start).observation)?] += 1.0 / starts.len() as f64;
        }
    }
    let mut terminals = vec![false; total];
    terminals[absorbing] = true;
    let mdp =
        MdpSpec::new(total, na, transition, reward, vec![0.0; total * na], 0.0, meta.discount, terminals, initial)
            .map_err(|e| OracleError::InvalidModel(e.to_string()))?;
    visits.truncate(ns * na);
    Ok(InducedMdp { mdp, absorbing_state: absorbing, visits })
}
