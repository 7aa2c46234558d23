//! Tabular stochastic MDPs and their episode dynamics.
//!
//! An [`MdpSpec`] is an explicit `(S, A, R, P, γ)` model. It serves both as
//! the ground-truth simulator and as the container for models estimated from
//! data (see [`crate::oracle::induced_mdp`]). [`EnvState`] runs episodes on a
//! spec with sticky actions and an episode cap.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng, Stream};

const ROW_TOLERANCE: f64 = 1e-9;

/// Default maximum episode length.
pub const DEFAULT_EPISODE_CAP: usize = 200;

/// Per-step reward in the grid environments.
const STEP_COST: f64 = -0.01;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("unknown environment kind `{0}`")]
    UnknownKind(String),
    #[error("size {size} out of bounds for {kind} (allowed {min}..={max})")]
    SizeOutOfBounds { kind: EnvKind, size: usize, min: usize, max: usize },
    #[error("invalid MDP: {0}")]
    InvalidSpec(String),
    #[error("action {action} out of range for {num_actions} actions")]
    ActionOutOfRange { action: usize, num_actions: usize },
    #[error("sticky probability {0} outside [0, 1]")]
    InvalidStickyProb(f64),
    #[error("episode has terminated; call reset before stepping")]
    EpisodeOver,
}

/// An explicit tabular MDP.
///
/// Tables are stored row-major: `transition[(s * A + a) * S + s']` and
/// `reward_mean[s * A + a]`. Terminal states are absorbing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    reward_mean: Vec<f64>,
    reward_noise: Vec<f64>,
    noise_clip: f64,
    discount: f64,
    terminals: Vec<bool>,
    initial_distribution: Vec<f64>,
}

impl MdpSpec {
    /// Builds a spec, checking every probability row and the discount.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward_mean: Vec<f64>,
        reward_noise: Vec<f64>,
        noise_clip: f64,
        discount: f64,
        terminals: Vec<bool>,
        initial_distribution: Vec<f64>,
    ) -> Result<Self, EnvError> {
        let spec = MdpSpec {
            num_states,
            num_actions,
            transition,
            reward_mean,
            reward_noise,
            noise_clip,
            discount,
            terminals,
            initial_distribution,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Re-checks the invariants; used after deserialization.
    pub fn validate(&self) -> Result<(), EnvError> {
        let (s, a) = (self.num_states, self.num_actions);
        let bad = |msg: String| Err(EnvError::InvalidSpec(msg));
        if s == 0 || a == 0 {
            return bad("state and action counts must be positive".into());
        }
        if self.transition.len() != s * a * s
            || self.reward_mean.len() != s * a
            || self.reward_noise.len() != s * a
            || self.terminals.len() != s
            || self.initial_distribution.len() != s
        {
            return bad("table shapes do not match state/action counts".into());
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!("discount {} not in [0, 1)", self.discount));
        }
        if !self.noise_clip.is_finite() || self.noise_clip < 0.0 {
            return bad(format!("noise clip {} must be finite and >= 0", self.noise_clip));
        }
        for (i, row) in self.transition.chunks(s).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return bad(format!("negative or non-finite probability in row {i}"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return bad(format!("transition row (s={}, a={}) sums to {sum}", i / a, i % a));
            }
        }
        if self.reward_mean.iter().any(|r| !r.is_finite()) {
            return bad("non-finite reward".into());
        }
        if self.reward_noise.iter().any(|n| !n.is_finite() || *n < 0.0) {
            return bad("reward noise must be finite and >= 0".into());
        }
        let init_sum: f64 = self.initial_distribution.iter().sum();
        if self.initial_distribution.iter().any(|p| !p.is_finite() || *p < 0.0)
            || (init_sum - 1.0).abs() > ROW_TOLERANCE
        {
            return bad(format!("initial distribution sums to {init_sum}"));
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Same model with a different discount.
    pub fn with_discount(mut self, discount: f64) -> Result<Self, EnvError> {
        self.discount = discount;
        self.validate()?;
        Ok(self)
    }

    /// `P(· | s, a)`.
    pub fn transition_row(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.num_actions + action) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn transition_prob(&self, state: usize, action: usize, next: usize) -> f64 {
        self.transition_row(state, action)[next]
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.reward_mean[state * self.num_actions + action]
    }

    pub fn reward_noise(&self, state: usize, action: usize) -> f64 {
        self.reward_noise[state * self.num_actions + action]
    }

    pub fn noise_clip(&self) -> f64 {
        self.noise_clip
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminals[state]
    }

    pub fn terminals(&self) -> impl Iterator<Item = usize> + '_ {
        self.terminals.iter().enumerate().filter(|(_, t)| **t).map(|(s, _)| s)
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial_distribution
    }

    /// Draws `s' ~ P(· | s, a)`.
    pub fn sample_next(&self, state: usize, action: usize, rng: &mut Rng) -> usize {
        sample_categorical(self.transition_row(state, action), rng)
    }

    /// Draws a start state from the initial distribution.
    pub fn sample_initial(&self, rng: &mut Rng) -> usize {
        sample_categorical(&self.initial_distribution, rng)
    }

    /// Draws `R(s, a)` plus clipped Gaussian noise.
    pub fn sample_reward(&self, state: usize, action: usize, rng: &mut Rng) -> f64 {
        let mean = self.reward(state, action);
        let std = self.reward_noise(state, action);
        if std == 0.0 {
            return mean;
        }
        let noise: f64 = Normal::new(0.0, std).expect("finite std").sample(rng);
        mean + noise.clamp(-self.noise_clip, self.noise_clip)
    }
}

fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    // Rounding left `u` above the accumulated mass.
    last_positive
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Chain,
    Gridworld,
    Cliff,
    RandomMdp,
}

impl EnvKind {
    /// Inclusive size bounds accepted by [`make_env`].
    pub fn size_bounds(self) -> (usize, usize) {
        match self {
            EnvKind::Chain => (1, 64),
            EnvKind::Gridworld => (2, 12),
            EnvKind::Cliff => (3, 16),
            EnvKind::RandomMdp => (1, 64),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Chain => "chain",
            EnvKind::Gridworld => "gridworld",
            EnvKind::Cliff => "cliff",
            EnvKind::RandomMdp => "random-mdp",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chain" => Ok(EnvKind::Chain),
            "gridworld" => Ok(EnvKind::Gridworld),
            "cliff" => Ok(EnvKind::Cliff),
            "random-mdp" => Ok(EnvKind::RandomMdp),
            other => Err(EnvError::UnknownKind(other.to_string())),
        }
    }
}

/// Optional knobs for [`make_env_with`]. `None` selects the per-kind default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnvParams {
    /// Discount; defaults to 0.9 for chain and random-mdp, 0.95 for grids.
    pub discount: Option<f64>,
    /// Probability that a grid move goes in a uniformly random direction.
    /// Defaults to 0.1 for gridworld, 0 for cliff.
    pub slip: Option<f64>,
    /// Standard deviation of the Gaussian reward noise, for every (s, a).
    pub reward_noise: f64,
    /// Reward noise is clipped to `[-noise_clip, noise_clip]`; default 1.
    pub noise_clip: Option<f64>,
    /// Action count for random-mdp; default 3.
    pub actions: Option<usize>,
}

/// Builds an environment with default parameters.
pub fn make_env(kind: EnvKind, size: usize, seed: u64) -> Result<MdpSpec, EnvError> {
    make_env_with(kind, size, seed, &EnvParams::default())
}

/// Builds an environment. Identical arguments always yield an identical spec.
pub fn make_env_with(kind: EnvKind, size: usize, seed: u64, params: &EnvParams) -> Result<MdpSpec, EnvError> {
    let (min, max) = kind.size_bounds();
    if size < min || size > max {
        return Err(EnvError::SizeOutOfBounds { kind, size, min, max });
    }
    let noise_clip = params.noise_clip.unwrap_or(1.0);
    let mut rng = rng::stream(seed, Stream::Env);
    let mut builder = match kind {
        EnvKind::Chain => chain(size),
        EnvKind::Gridworld => gridworld(size, params.slip.unwrap_or(0.1), &mut rng)?,
        EnvKind::Cliff => cliff(size, params.slip.unwrap_or(0.0)),
        EnvKind::RandomMdp => random_mdp(size, params.actions.unwrap_or(3), &mut rng)?,
    };
    builder.discount = params.discount.unwrap_or(match kind {
        EnvKind::Chain | EnvKind::RandomMdp => 0.9,
        EnvKind::Gridworld | EnvKind::Cliff => 0.95,
    });
    builder.reward_noise = vec![params.reward_noise; builder.reward_mean.len()];
    builder.noise_clip = noise_clip;
    builder.validate()?;
    Ok(builder)
}

fn blank(num_states: usize, num_actions: usize) -> MdpSpec {
    MdpSpec {
        num_states,
        num_actions,
        transition: vec![0.0; num_states * num_actions * num_states],
        reward_mean: vec![0.0; num_states * num_actions],
        reward_noise: vec![0.0; num_states * num_actions],
        noise_clip: 1.0,
        discount: 0.9,
        terminals: vec![false; num_states],
        initial_distribution: {
            let mut d = vec![0.0; num_states];
            d[0] = 1.0;
            d
        },
    }
}

fn make_absorbing(spec: &mut MdpSpec, state: usize) {
    spec.terminals[state] = true;
    for a in 0..spec.num_actions {
        let start = (state * spec.num_actions + a) * spec.num_states;
        spec.transition[start..start + spec.num_states].fill(0.0);
        spec.transition[start + state] = 1.0;
        spec.reward_mean[state * spec.num_actions + a] = 0.0;
    }
}

/// `size` transient states in a row plus an absorbing terminal at index
/// `size`. Action 0 advances, action 1 steps back (staying put at 0).
/// Advancing from the last transient state pays 1 and terminates.
fn chain(size: usize) -> MdpSpec {
    let terminal = size;
    let mut spec = blank(size + 1, 2);
    for s in 0..size {
        let fwd = s + 1;
        let back = s.saturating_sub(1);
        spec.transition[(s * 2) * spec.num_states + fwd] = 1.0;
        spec.transition[(s * 2 + 1) * spec.num_states + back] = 1.0;
        if fwd == terminal {
            spec.reward_mean[s * 2] = 1.0;
        }
    }
    make_absorbing(&mut spec, terminal);
    spec
}

const MOVES: [(i64, i64); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

struct Grid {
    rows: usize,
    cols: usize,
}

impl Grid {
    fn step(&self, state: usize, dir: usize) -> usize {
        let (r, c) = ((state / self.cols) as i64, (state % self.cols) as i64);
        let (dr, dc) = MOVES[dir];
        let (nr, nc) = (r + dr, c + dc);
        if nr < 0 || nc < 0 || nr >= self.rows as i64 || nc >= self.cols as i64 {
            state
        } else {
            nr as usize * self.cols + nc as usize
        }
    }

    /// Distribution of the landing cell for intended direction `dir`.
    fn move_distribution(&self, state: usize, dir: usize, slip: f64) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(5);
        let mut add = |s: usize, p: f64| {
            if p == 0.0 {
                return;
            }
            match out.iter_mut().find(|(t, _)| *t == s) {
                Some(entry) => entry.1 += p,
                None => out.push((s, p)),
            }
        };
        add(self.step(state, dir), 1.0 - slip);
        for d in 0..4 {
            add(self.step(state, d), slip / 4.0);
        }
        out
    }
}

/// Every non-pit cell can reach the goal through non-pit cells.
fn goal_reachable(grid: &Grid, pits: &[bool], goal: usize) -> bool {
    let n = grid.rows * grid.cols;
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([goal]);
    seen[goal] = true;
    while let Some(s) = queue.pop_front() {
        for d in 0..4 {
            let t = grid.step(s, d);
            if !seen[t] && !pits[t] {
                seen[t] = true;
                queue.push_back(t);
            }
        }
    }
    (0..n).all(|s| pits[s] || seen[s])
}

/// `size × size` grid with four moves. Start top-left, goal bottom-right
/// (+1, terminal), `size² / 8` seeded pits (−1, terminal), −0.01 per step
/// otherwise.
fn gridworld(size: usize, slip: f64, rng: &mut Rng) -> Result<MdpSpec, EnvError> {
    if !(0.0..=1.0).contains(&slip) {
        return Err(EnvError::InvalidSpec(format!("slip {slip} outside [0, 1]")));
    }
    let grid = Grid { rows: size, cols: size };
    let n = size * size;
    let (start, goal) = (0, n - 1);
    let num_pits = n / 8;
    let mut pits = vec![false; n];
    let mut placed = false;
    for _ in 0..1000 {
        pits.fill(false);
        let mut count = 0;
        while count < num_pits {
            let cell = rng.random_range(0..n);
            if cell != start && cell != goal && !pits[cell] {
                pits[cell] = true;
                count += 1;
            }
        }
        if goal_reachable(&grid, &pits, goal) {
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(EnvError::InvalidSpec("could not place pits".into()));
    }
    let cell_reward = |s: usize| {
        if s == goal {
            1.0
        } else if pits[s] {
            -1.0
        } else {
            STEP_COST
        }
    };
    let mut spec = blank(n, 4);
    for s in 0..n {
        for a in 0..4 {
            let row = (s * 4 + a) * n;
            let mut expected = 0.0;
            for (t, p) in grid.move_distribution(s, a, slip) {
                spec.transition[row + t] += p;
                expected += p * cell_reward(t);
            }
            spec.reward_mean[s * 4 + a] = expected;
        }
    }
    make_absorbing(&mut spec, goal);
    for s in (0..n).filter(|&s| pits[s]) {
        make_absorbing(&mut spec, s);
    }
    Ok(spec)
}

/// Cliff walk on a 4 × `size` grid: start bottom-left, goal bottom-right
/// (+1, terminal). The bottom cells in between are a cliff: stepping onto one
/// pays −1 and returns the agent to the start. Other moves cost 0.01.
fn cliff(size: usize, slip: f64) -> MdpSpec {
    let grid = Grid { rows: 4, cols: size };
    let n = 4 * size;
    let start = 3 * size;
    let goal = n - 1;
    let is_cliff = |s: usize| s > start && s < goal;
    let mut spec = blank(n, 4);
    spec.initial_distribution.fill(0.0);
    spec.initial_distribution[start] = 1.0;
    for s in 0..n {
        for a in 0..4 {
            let row = (s * 4 + a) * n;
            let mut expected = 0.0;
            for (t, p) in grid.move_distribution(s, a, slip) {
                let (landing, r) = if t == goal {
                    (t, 1.0)
                } else if is_cliff(t) {
                    (start, -1.0)
                } else {
                    (t, STEP_COST)
                };
                spec.transition[row + landing] += p;
                expected += p * r;
            }
            spec.reward_mean[s * 4 + a] = expected;
        }
    }
    make_absorbing(&mut spec, goal);
    // Cliff cells are unreachable; park them as absorbing so rows stay valid.
    for s in (0..n).filter(|&s| is_cliff(s)) {
        make_absorbing(&mut spec, s);
    }
    spec
}

/// Dense random MDP: Dirichlet(1) transition rows, rewards uniform in
/// [−1, 1], uniform start distribution, no terminal states.
fn random_mdp(size: usize, actions: usize, rng: &mut Rng) -> Result<MdpSpec, EnvError> {
    if actions == 0 || actions > 16 {
        return Err(EnvError::InvalidSpec(format!("random-mdp actions {actions} not in 1..=16")));
    }
    let mut spec = blank(size, actions);
    for row in spec.transition.chunks_mut(size) {
        for p in row.iter_mut() {
            // Exponential(1) draws normalize to a Dirichlet(1, ..., 1) row.
            let u: f64 = rng.random();
            *p = -(1.0 - u).ln();
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= sum);
    }
    for r in spec.reward_mean.iter_mut() {
        *r = rng.random_range(-1.0..=1.0);
    }
    spec.initial_distribution.fill(1.0 / size as f64);
    Ok(spec)
}

/// How observations are written to datasets and fed to agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObsEncoding {
    /// A single float holding the state index.
    Index,
    /// One-hot vector over states.
    OneHot,
}

impl ObsEncoding {
    pub fn tag(self) -> u8 {
        match self {
            ObsEncoding::Index => 0,
            ObsEncoding::OneHot => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ObsEncoding::Index),
            1 => Some(ObsEncoding::OneHot),
            _ => None,
        }
    }

    pub fn dim(self, num_states: usize) -> usize {
        match self {
            ObsEncoding::Index => 1,
            ObsEncoding::OneHot => num_states,
        }
    }

    pub fn encode(self, state: usize, num_states: usize) -> Vec<f32> {
        match self {
            ObsEncoding::Index => vec![state as f32],
            ObsEncoding::OneHot => {
                let mut v = vec![0.0; num_states];
                v[state] = 1.0;
                v
            }
        }
    }

    /// Recovers the state index, or `None` if `obs` is not a valid encoding.
    pub fn decode(self, obs: &[f32]) -> Option<usize> {
        match self {
            ObsEncoding::Index => match obs {
                [x] if *x >= 0.0 && x.fract() == 0.0 => Some(*x as usize),
                _ => None,
            },
            ObsEncoding::OneHot => {
                let mut hot = None;
                for (i, &x) in obs.iter().enumerate() {
                    if x == 1.0 && hot.is_none() {
                        hot = Some(i);
                    } else if x != 0.0 {
                        return None;
                    }
                }
                hot
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObsEncoding::Index => "index",
            ObsEncoding::OneHot => "one-hot",
        }
    }
}

impl FromStr for ObsEncoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "index" => Ok(ObsEncoding::Index),
            "one-hot" => Ok(ObsEncoding::OneHot),
            other => Err(format!("unknown observation encoding `{other}`")),
        }
    }
}

/// Result of [`EnvState::reset`] or [`EnvState::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// State index after the step.
    pub observation: usize,
    pub reward: f64,
    /// Episode ended: terminal state reached or episode cap hit.
    pub terminal: bool,
    /// The episode ended on the cap rather than in a terminal state.
    pub truncated: bool,
    /// Action actually applied; differs from the request when the sticky draw
    /// repeated the previous action.
    pub executed_action: usize,
}

/// Mutable episode state on top of an immutable [`MdpSpec`].
#[derive(Debug, Clone)]
pub struct EnvState {
    current_state: usize,
    previous_action: Option<usize>,
    steps_elapsed: usize,
    episode_cap: usize,
    episode_return: f64,
    active: bool,
    rng: Rng,
}

impl EnvState {
    pub fn new(seed: u64, episode_cap: usize) -> Self {
        Self::with_rng(rng::stream(seed, Stream::Env), episode_cap)
    }

    pub fn with_rng(rng: Rng, episode_cap: usize) -> Self {
        assert!(episode_cap > 0, "episode cap must be positive");
        EnvState {
            current_state: 0,
            previous_action: None,
            steps_elapsed: 0,
            episode_cap,
            episode_return: 0.0,
            active: false,
            rng,
        }
    }

    pub fn current_state(&self) -> usize {
        self.current_state
    }

    pub fn previous_action(&self) -> Option<usize> {
        self.previous_action
    }

    pub fn steps_elapsed(&self) -> usize {
        self.steps_elapsed
    }

    pub fn episode_cap(&self) -> usize {
        self.episode_cap
    }

    pub fn episode_return(&self) -> f64 {
        self.episode_return
    }

    /// An episode is in progress.
    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Starts a new episode. The sticky latch is cleared.
    pub fn reset(&mut self, mdp: &MdpSpec) -> StepOutcome {
        self.current_state = mdp.sample_initial(&mut self.rng);
        self.previous_action = None;
        self.steps_elapsed = 0;
        self.episode_return = 0.0;
        self.active = true;
        StepOutcome {
            observation: self.current_state,
            reward: 0.0,
            terminal: false,
            truncated: false,
            executed_action: 0,
        }
    }

    /// Applies `action`, repeating the previous executed action instead with
    /// probability `sticky_prob`.
    pub fn step(&mut self, mdp: &MdpSpec, action: usize, sticky_prob: f64) -> Result<StepOutcome, EnvError> {
        if !self.active {
            return Err(EnvError::EpisodeOver);
        }
        if action >= mdp.num_actions() {
            return Err(EnvError::ActionOutOfRange { action, num_actions: mdp.num_actions() });
        }
        if !(0.0..=1.0).contains(&sticky_prob) {
            return Err(EnvError::InvalidStickyProb(sticky_prob));
        }
        let executed = match self.previous_action {
            Some(prev) if sticky_prob > 0.0 && self.rng.random::<f64>() < sticky_prob => prev,
            _ => action,
        };
        let state = self.current_state;
        let reward = mdp.sample_reward(state, executed, &mut self.rng);
        let next = mdp.sample_next(state, executed, &mut self.rng);
        self.current_state = next;
        self.previous_action = Some(executed);
        self.steps_elapsed += 1;
        self.episode_return += reward;
        let at_terminal = mdp.is_terminal(next);
        let capped = self.steps_elapsed >= self.episode_cap;
        let terminal = at_terminal || capped;
        if terminal {
            self.active = false;
        }
        Ok(StepOutcome {
            observation: next,
            reward,
            terminal,
            truncated: capped && !at_terminal,
            executed_action: executed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_of_two_matches_hand_construction() {
        let mdp = make_env(EnvKind::Chain, 2, 123).unwrap();
        assert_eq!(mdp.num_states(), 3);
        assert_eq!(mdp.transition_prob(0, 0, 1), 1.0);
        assert_eq!(mdp.reward(0, 0), 0.0);
        assert_eq!(mdp.transition_prob(1, 0, 2), 1.0);
        assert_eq!(mdp.reward(1, 0), 1.0);
        assert!(mdp.is_terminal(2));
        assert_eq!(mdp, make_env(EnvKind::Chain, 2, 999).unwrap());
    }

    #[test]
    fn gridworld_is_deterministic_in_seed() {
        let a = make_env(EnvKind::Gridworld, 4, 7).unwrap();
        let b = make_env(EnvKind::Gridworld, 4, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.terminals().count(), 1 + 16 / 8);
    }

    #[test]
    fn random_mdp_rows_sum_to_one() {
        let mdp = make_env(EnvKind::RandomMdp, 6, 3).unwrap();
        for s in 0..6 {
            for a in 0..mdp.num_actions() {
                let sum: f64 = mdp.transition_row(s, a).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_unknown_kind_and_bad_size() {
        assert_eq!("maze".parse::<EnvKind>(), Err(EnvError::UnknownKind("maze".into())));
        assert!(matches!(make_env(EnvKind::Gridworld, 40, 0), Err(EnvError::SizeOutOfBounds { .. })));
        assert!(make_env(EnvKind::Cliff, 2, 0).is_err());
    }

    #[test]
    fn every_kind_validates() {
        for kind in [EnvKind::Chain, EnvKind::Gridworld, EnvKind::Cliff, EnvKind::RandomMdp] {
            let (lo, hi) = kind.size_bounds();
            for size in [lo, (lo + hi) / 2, hi] {
                make_env(kind, size, 5).unwrap().validate().unwrap();
            }
        }
    }

    #[test]
    fn zero_sticky_executes_request() {
        let mdp = make_env(EnvKind::RandomMdp, 4, 1).unwrap();
        let mut env = EnvState::new(3, 50);
        env.reset(&mdp);
        for t in 0..40 {
            let out = env.step(&mdp, t % 3, 0.0).unwrap();
            assert_eq!(out.executed_action, t % 3);
        }
    }

    #[test]
    fn first_step_ignores_sticky() {
        let mdp = make_env(EnvKind::RandomMdp, 4, 1).unwrap();
        let mut env = EnvState::new(3, 50);
        for _ in 0..20 {
            env.reset(&mdp);
            assert_eq!(env.step(&mdp, 2, 1.0).unwrap().executed_action, 2);
            assert_eq!(env.step(&mdp, 0, 1.0).unwrap().executed_action, 2);
        }
    }

    #[test]
    fn reset_clears_episode_state() {
        let mdp = make_env(EnvKind::Chain, 3, 0).unwrap();
        let mut env = EnvState::new(0, 10);
        let out = env.reset(&mdp);
        assert_eq!(out.observation, 0);
        assert_eq!(out.reward, 0.0);
        assert!(!out.terminal);
        env.step(&mdp, 0, 0.0).unwrap();
        env.reset(&mdp);
        assert_eq!(env.episode_return(), 0.0);
        assert_eq!(env.previous_action(), None);
        assert_eq!(env.steps_elapsed(), 0);
    }

    #[test]
    fn reset_sequence_is_seeded() {
        let mdp = make_env(EnvKind::RandomMdp, 6, 2).unwrap();
        let starts = |seed| {
            let mut env = EnvState::new(seed, 10);
            (0..20).map(|_| env.reset(&mdp).observation).collect::<Vec<_>>()
        };
        assert_eq!(starts(11), starts(11));
        assert_ne!(starts(11), starts(12));
    }

    #[test]
    fn stepping_after_termination_fails() {
        let mdp = make_env(EnvKind::Chain, 1, 0).unwrap();
        let mut env = EnvState::new(0, 10);
        assert_eq!(env.step(&mdp, 0, 0.0), Err(EnvError::EpisodeOver));
        env.reset(&mdp);
        let out = env.step(&mdp, 0, 0.0).unwrap();
        assert!(out.terminal && !out.truncated);
        assert_eq!(out.reward, 1.0);
        assert_eq!(env.step(&mdp, 0, 0.0), Err(EnvError::EpisodeOver));
    }

    #[test]
    fn episode_cap_truncates() {
        let mdp = make_env(EnvKind::RandomMdp, 3, 0).unwrap();
        let mut env = EnvState::new(0, 7);
        env.reset(&mdp);
        let mut steps = 0;
        loop {
            let out = env.step(&mdp, 0, 0.25).unwrap();
            steps += 1;
            if out.terminal {
                assert!(out.truncated);
                break;
            }
        }
        assert_eq!(steps, 7);
    }

    #[test]
    fn reward_noise_is_clipped() {
        let params = EnvParams { reward_noise: 5.0, noise_clip: Some(0.5), ..Default::default() };
        let mdp = make_env_with(EnvKind::RandomMdp, 3, 0, &params).unwrap();
        let mut rng = rng::stream(1, Stream::Env);
        for _ in 0..1000 {
            let r = mdp.sample_reward(1, 1, &mut rng);
            assert!((r - mdp.reward(1, 1)).abs() <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn encodings_round_trip() {
        for enc in [ObsEncoding::Index, ObsEncoding::OneHot] {
            for s in 0..7 {
                let v = enc.encode(s, 7);
                assert_eq!(v.len(), enc.dim(7));
                assert_eq!(enc.decode(&v), Some(s));
            }
            assert_eq!(ObsEncoding::from_tag(enc.tag()), Some(enc));
        }
        assert_eq!(ObsEncoding::OneHot.decode(&[0.0, 0.5, 0.0]), None);
    }
}
