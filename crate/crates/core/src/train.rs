//! Online collection, offline training, evaluation and online REM.
//!
//! Every run draws from separate seeded streams (see [`crate::rng`]): the
//! environment, parameter init, epsilon-greedy draws, mini-batch sampling,
//! per-batch and per-episode mixtures, and one evaluation stream per
//! iteration. Evaluation at iteration `i` therefore sees the same environment
//! randomness for every agent trained under the same seed.

use rand::{Rng as _, SeedableRng};
use thiserror::Error;

use crate::config::{AgentKind, ConfigError, TrainConfig};
use crate::env::{make_env_with, EnvError, EnvState, MdpSpec, ObsEncoding};
use crate::losses::{
    averaged_ensemble_dqn_loss, dqn_loss, ensemble_dqn_loss, qr_dqn_loss, rem_loss, rem_loss_per_sample,
    sample_simplex, LossError, LossParams, LossReport, SimplexWeights,
};
use crate::qfunc::{argmax, EnsembleSpec, OptimizerState, QEnsemble, QFuncError, SyncSchedule, TargetSnapshot};
use crate::replay::{
    sample_batch, DatasetMeta, DatasetWriter, LoggedDataset, ReplayBuffer, ReplayError, Transition, TransitionStore,
    DESCRIPTOR_LEN,
};
use crate::rng::{stream, Rng, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    QFunc(#[from] QFuncError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("dataset is incompatible with the run: {0}")]
    Incompatible(String),
    #[error("{operation} requires agent {expected}, config has {got}")]
    WrongAgent { operation: &'static str, expected: AgentKind, got: AgentKind },
}

/// One evaluation point of a learning curve.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub iteration: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub episodes: usize,
    pub gradient_updates: u64,
    /// Mean |TD error| over the iteration's updates; NaN without updates.
    pub mean_abs_td_error: f64,
    pub diverged: bool,
}

/// How evaluation episodes are run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub epsilon: f64,
    pub episodes: usize,
    pub sticky_prob: f64,
    pub episode_cap: usize,
}

impl EvalSettings {
    pub fn from_config(config: &TrainConfig) -> Self {
        EvalSettings {
            epsilon: config.eval.epsilon,
            episodes: config.eval.episodes,
            sticky_prob: config.env.sticky_prob,
            episode_cap: config.env.episode_cap,
        }
    }
}

/// Runs `settings.episodes` epsilon-greedy episodes on the head-averaged
/// values of `q` and reports undiscounted returns. Environment randomness is
/// forked from `rng` first, then action draws use `rng`.
pub fn evaluate_policy(q: &QEnsemble, mdp: &MdpSpec, settings: &EvalSettings, rng: &mut Rng) -> EvalRecord {
    assert!(settings.episodes >= 1, "at least one evaluation episode");
    let mut env = EnvState::with_rng(Rng::from_rng(&mut *rng), settings.episode_cap);
    let encoding = q.spec().encoding;
    let ns = mdp.num_states();
    let na = mdp.num_actions();
    let mut returns = Vec::with_capacity(settings.episodes);
    for _ in 0..settings.episodes {
        let mut state = env.reset(mdp).observation;
        loop {
            let action = if rng.random::<f64>() < settings.epsilon {
                rng.random_range(0..na)
            } else {
                greedy(q, &encoding.encode(state, ns), None).unwrap_or(0)
            };
            let out = env.step(mdp, action, settings.sticky_prob).expect("valid action on an active episode");
            state = out.observation;
            if out.terminal {
                break;
            }
        }
        returns.push(env.episode_return());
    }
    let (mean, std) = mean_std(&returns);
    EvalRecord {
        iteration: 0,
        mean_return: mean,
        std_return: std,
        episodes: returns.len(),
        gradient_updates: 0,
        mean_abs_td_error: f64::NAN,
        diverged: false,
    }
}

/// Sample mean and (n - 1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn greedy(q: &QEnsemble, obs: &[f32], mixture: Option<&SimplexWeights>) -> Result<usize, QFuncError> {
    let values = q.forward(obs)?;
    Ok(match mixture {
        Some(alpha) => argmax(&values.mix(alpha.as_slice())),
        None => argmax(&values.q_average()),
    })
}

/// Callbacks for inspecting a run while it executes.
pub trait TrainObserver {
    fn on_update(&mut self, _update: u64, _report: &LossReport) {}
    fn on_sync(&mut self, _update: u64) {}
    fn on_env_step(&mut self, _step: &StepInfo<'_>) {}
}

impl TrainObserver for () {}

/// One environment step taken while training online.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo<'a> {
    pub env_step: u64,
    pub episode: u64,
    pub epsilon: f64,
    pub requested_action: usize,
    pub executed_action: usize,
    /// Behavior mixture used for greedy actions (online REM only).
    pub behavior_mixture: Option<&'a SimplexWeights>,
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub curve: Vec<EvalRecord>,
    pub final_network: QEnsemble,
    /// Network at the evaluation with the highest mean return.
    pub best_network: QEnsemble,
    pub best_iteration: Option<u64>,
    /// Reason the run stopped early, if it diverged.
    pub divergence: Option<String>,
    pub env_steps: u64,
    pub gradient_updates: u64,
}

impl RunOutput {
    /// Highest evaluation mean, ignoring divergence markers.
    pub fn best_score(&self) -> Option<f64> {
        self.curve.iter().filter(|r| !r.diverged).map(|r| r.mean_return).fold(None, |m, v| match m {
            Some(m) if m >= v => Some(m),
            _ => Some(v),
        })
    }

    pub fn final_score(&self) -> Option<f64> {
        self.curve.iter().rev().find(|r| !r.diverged).map(|r| r.mean_return)
    }

    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }
}

/// Online collection result.
#[derive(Debug, Clone)]
pub struct CollectionOutput {
    pub run: RunOutput,
    pub dataset: LoggedDataset,
}

/// Builds the configured environment.
pub fn build_env(config: &TrainConfig) -> Result<MdpSpec, TrainError> {
    Ok(make_env_with(config.env.kind, config.env.size, config.env.seed, &config.env.params())?)
}

/// Network shape for `config` on a state space of `num_states`.
pub fn ensemble_spec(
    config: &TrainConfig,
    num_states: usize,
    num_actions: usize,
    encoding: ObsEncoding,
) -> EnsembleSpec {
    let a = &config.agent;
    EnsembleSpec {
        architecture: a.architecture,
        topology: a.topology,
        heads: a.effective_heads(),
        num_states,
        num_actions,
        encoding,
        hidden: a.hidden.clone(),
        activation: a.activation,
        init_scale: a.init_scale,
    }
}

enum UpdateOutcome {
    Done(f64),
    Diverged(String),
}

/// Network, target, optimizer and the loss-side random streams.
struct Learner {
    kind: AgentKind,
    q: QEnsemble,
    target: TargetSnapshot,
    opt: OptimizerState,
    schedule: SyncSchedule,
    params: LossParams,
    per_sample: bool,
    reward_clip: bool,
    batch_size: usize,
    max_abs_param: f64,
    sample_rng: Rng,
    mix_rng: Rng,
    updates: u64,
}

impl Learner {
    fn new(config: &TrainConfig, spec: EnsembleSpec, discount: f64) -> Result<Self, TrainError> {
        let seed = config.train.seed;
        let q = QEnsemble::new(spec, &mut stream(seed, Stream::Init))?;
        let o = &config.optimizer;
        Ok(Learner {
            kind: config.agent.kind,
            target: TargetSnapshot::new(&q),
            opt: OptimizerState::new(q.num_params(), o.lr, o.beta1, o.beta2, o.eps),
            q,
            schedule: SyncSchedule { period: config.train.target_update_period },
            params: LossParams::new(discount, config.agent.huber),
            per_sample: config.agent.rem_per_sample,
            reward_clip: config.agent.reward_clip,
            batch_size: config.train.batch_size,
            max_abs_param: config.train.max_abs_param,
            sample_rng: stream(seed, Stream::Sampling),
            mix_rng: stream(seed, Stream::BatchMixture),
            updates: 0,
        })
    }

    fn loss(&mut self, store: &dyn TransitionStore) -> Result<LossReport, TrainError> {
        let mut batch = sample_batch(store, self.batch_size, &mut self.sample_rng)?;
        if self.reward_clip {
            batch.clip_rewards();
        }
        let (q, t, p) = (&self.q, &self.target, &self.params);
        Ok(match self.kind {
            AgentKind::Dqn => dqn_loss(q, t, &batch, p)?,
            AgentKind::EnsembleDqn => ensemble_dqn_loss(q, t, &batch, p)?,
            AgentKind::AveragedEnsembleDqn => averaged_ensemble_dqn_loss(q, t, &batch, p)?,
            AgentKind::QrDqn => qr_dqn_loss(q, t, &batch, p)?,
            AgentKind::Rem if self.per_sample => {
                let alphas: Vec<_> = (0..batch.len()).map(|_| sample_simplex(q.heads(), &mut self.mix_rng)).collect();
                rem_loss_per_sample(q, t, &batch, &alphas, p)?
            }
            AgentKind::Rem => {
                let alpha = sample_simplex(q.heads(), &mut self.mix_rng);
                rem_loss(q, t, &batch, &alpha, p)?
            }
        })
    }

    fn update(
        &mut self,
        store: &dyn TransitionStore,
        obs: &mut dyn TrainObserver,
    ) -> Result<UpdateOutcome, TrainError> {
        let report = match self.loss(store) {
            Ok(r) => r,
            Err(TrainError::Loss(LossError::NonFiniteLoss)) => {
                return Ok(UpdateOutcome::Diverged(format!("non-finite loss at update {}", self.updates + 1)))
            }
            Err(TrainError::Loss(LossError::QFunc(QFuncError::NonFiniteOutput))) => {
                return Ok(UpdateOutcome::Diverged(format!("non-finite Q-value at update {}", self.updates + 1)))
            }
            Err(e) => return Err(e),
        };
        match self.opt.apply_update(&mut self.q, &report.grad) {
            Ok(()) => {}
            Err(QFuncError::NonFiniteGradient(i)) => {
                return Ok(UpdateOutcome::Diverged(format!(
                    "non-finite gradient entry {i} at update {}",
                    self.updates + 1
                )))
            }
            Err(e) => return Err(e.into()),
        }
        self.updates += 1;
        obs.on_update(self.updates, &report);
        let max = self.q.max_abs_param();
        if !(max <= self.max_abs_param) {
            return Ok(UpdateOutcome::Diverged(format!(
                "parameter magnitude {max} exceeds {} at update {}",
                self.max_abs_param, self.updates
            )));
        }
        if self.schedule.due(self.updates) {
            self.target.sync(&self.q, self.updates)?;
            obs.on_sync(self.updates);
        }
        Ok(UpdateOutcome::Done(report.mean_abs_td))
    }
}

/// Tracks the curve and the best network across iterations.
struct CurveLog {
    curve: Vec<EvalRecord>,
    best: Option<(f64, u64, QEnsemble)>,
}

impl CurveLog {
    fn new() -> Self {
        CurveLog { curve: Vec::new(), best: None }
    }

    fn evaluate(
        &mut self,
        config: &TrainConfig,
        mdp: &MdpSpec,
        q: &QEnsemble,
        iteration: u64,
        updates: u64,
        td: &[f64],
    ) {
        let mut rng = stream(config.train.seed, Stream::Eval(iteration));
        let mut rec = evaluate_policy(q, mdp, &EvalSettings::from_config(config), &mut rng);
        rec.iteration = iteration;
        rec.gradient_updates = updates;
        rec.mean_abs_td_error = if td.is_empty() { f64::NAN } else { td.iter().sum::<f64>() / td.len() as f64 };
        if self.best.as_ref().is_none_or(|(b, _, _)| rec.mean_return > *b) {
            self.best = Some((rec.mean_return, iteration, q.clone()));
        }
        self.curve.push(rec);
    }

    fn mark_divergence(&mut self, iteration: u64, updates: u64, td: &[f64], episodes: usize) {
        self.curve.push(EvalRecord {
            iteration,
            mean_return: f64::NAN,
            std_return: f64::NAN,
            episodes,
            gradient_updates: updates,
            mean_abs_td_error: if td.is_empty() { f64::NAN } else { td.iter().sum::<f64>() / td.len() as f64 },
            diverged: true,
        });
    }

    fn finish(self, learner: Learner, divergence: Option<String>, env_steps: u64) -> RunOutput {
        let (best_iteration, best_network) = match self.best {
            Some((_, i, net)) => (Some(i), net),
            None => (None, learner.q.clone()),
        };
        RunOutput {
            curve: self.curve,
            final_network: learner.q,
            best_network,
            best_iteration,
            divergence,
            env_steps,
            gradient_updates: learner.updates,
        }
    }
}

fn descriptor(config: &TrainConfig) -> String {
    let mut d = format!("{}:{}:{};{}", config.env.kind, config.env.size, config.env.seed, config.agent.kind);
    d.truncate(DESCRIPTOR_LEN);
    d
}

/// Which online regime to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OnlineMode {
    Plain,
    EpisodeMixture,
}

fn run_online_inner(
    config: &TrainConfig,
    mdp: &MdpSpec,
    mode: OnlineMode,
    log: bool,
    observer: &mut dyn TrainObserver,
) -> Result<(RunOutput, Option<LoggedDataset>), TrainError> {
    config.validate()?;
    let t = &config.train;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let encoding = config.env.encoding;
    let obs_dim = encoding.dim(ns);
    let discount = t.discount.unwrap_or(mdp.discount());
    let mut learner = Learner::new(config, ensemble_spec(config, ns, na, encoding), discount)?;
    let mut env = EnvState::with_rng(stream(t.seed, Stream::Env), config.env.episode_cap);
    let mut agent_rng = stream(t.seed, Stream::Agent);
    let mut episode_rng = stream(t.seed, Stream::EpisodeMixture);
    let mut buffer = ReplayBuffer::new(t.replay_capacity, obs_dim)?;
    let mut writer = if log {
        Some(DatasetWriter::new(DatasetMeta {
            encoding,
            obs_dim,
            num_actions: na,
            discount: mdp.discount(),
            seed: t.seed,
            descriptor: descriptor(config),
        })?)
    } else {
        None
    };
    let heads = learner.q.heads();
    let draw_mixture = |rng: &mut Rng| match mode {
        OnlineMode::Plain => None,
        OnlineMode::EpisodeMixture => Some(sample_simplex(heads, rng)),
    };

    let mut log_curve = CurveLog::new();
    let mut divergence = None;
    let mut env_steps = 0u64;
    let mut episode = 0u64;
    let mut step_in_episode = 0u32;
    let mut state = env.reset(mdp).observation;
    let mut mixture = draw_mixture(&mut episode_rng);
    'outer: for iteration in 0..t.iterations {
        let mut td = Vec::new();
        for _ in 0..t.env_steps_per_iteration() {
            let epsilon = t.epsilon(env_steps);
            let obs = encoding.encode(state, ns);
            let requested = if agent_rng.random::<f64>() < epsilon {
                agent_rng.random_range(0..na)
            } else {
                match greedy(&learner.q, &obs, mixture.as_ref()) {
                    Ok(a) => a,
                    Err(QFuncError::NonFiniteOutput) => {
                        divergence = Some(format!("non-finite Q-value at env step {env_steps}"));
                        log_curve.mark_divergence(iteration, learner.updates, &td, config.eval.episodes);
                        break 'outer;
                    }
                    Err(e) => return Err(e.into()),
                }
            };
            let out = env.step(mdp, requested, config.env.sticky_prob)?;
            observer.on_env_step(&StepInfo {
                env_step: env_steps,
                episode,
                epsilon,
                requested_action: requested,
                executed_action: out.executed_action,
                behavior_mixture: mixture.as_ref(),
            });
            let tr = Transition {
                observation: obs,
                action: out.executed_action,
                reward: out.reward as f32,
                next_observation: encoding.encode(out.observation, ns),
                terminal: out.terminal,
                episode_id: episode,
                step_in_episode,
            };
            buffer.append(&tr)?;
            if let Some(w) = writer.as_mut() {
                w.append(&tr)?;
            }
            env_steps += 1;
            if out.terminal {
                episode += 1;
                step_in_episode = 0;
                state = env.reset(mdp).observation;
                mixture = draw_mixture(&mut episode_rng);
            } else {
                step_in_episode += 1;
                state = out.observation;
            }
            if buffer.len() >= t.min_replay.max(1) && env_steps.is_multiple_of(t.update_period) {
                match learner.update(&buffer, observer)? {
                    UpdateOutcome::Done(d) => td.push(d),
                    UpdateOutcome::Diverged(reason) => {
                        divergence = Some(reason);
                        log_curve.mark_divergence(iteration, learner.updates, &td, config.eval.episodes);
                        break 'outer;
                    }
                }
            }
        }
        log_curve.evaluate(config, mdp, &learner.q, iteration, learner.updates, &td);
    }
    let dataset = writer.map(DatasetWriter::finalize);
    Ok((log_curve.finish(learner, divergence, env_steps), dataset))
}

/// Online DQN that logs every transition it experiences, with the executed
/// action, in experience order.
pub fn run_online_collection(config: &TrainConfig, mdp: &MdpSpec) -> Result<CollectionOutput, TrainError> {
    run_online_collection_with(config, mdp, &mut ())
}

pub fn run_online_collection_with(
    config: &TrainConfig,
    mdp: &MdpSpec,
    observer: &mut dyn TrainObserver,
) -> Result<CollectionOutput, TrainError> {
    if config.agent.kind != AgentKind::Dqn {
        return Err(TrainError::WrongAgent {
            operation: "collection",
            expected: AgentKind::Dqn,
            got: config.agent.kind,
        });
    }
    let (run, dataset) = run_online_inner(config, mdp, OnlineMode::Plain, true, observer)?;
    Ok(CollectionOutput { run, dataset: dataset.expect("logging enabled") })
}

/// Online training of any agent with a FIFO replay buffer and no logging.
pub fn run_online(
    config: &TrainConfig,
    mdp: &MdpSpec,
    observer: &mut dyn TrainObserver,
) -> Result<RunOutput, TrainError> {
    Ok(run_online_inner(config, mdp, OnlineMode::Plain, false, observer)?.0)
}

/// Online REM: one behavior mixture per episode, REM loss per mini-batch.
pub fn run_online_rem(config: &TrainConfig, mdp: &MdpSpec) -> Result<RunOutput, TrainError> {
    run_online_rem_with(config, mdp, &mut ())
}

pub fn run_online_rem_with(
    config: &TrainConfig,
    mdp: &MdpSpec,
    observer: &mut dyn TrainObserver,
) -> Result<RunOutput, TrainError> {
    if config.agent.kind != AgentKind::Rem {
        return Err(TrainError::WrongAgent {
            operation: "online rem",
            expected: AgentKind::Rem,
            got: config.agent.kind,
        });
    }
    Ok(run_online_inner(config, mdp, OnlineMode::EpisodeMixture, false, observer)?.0)
}

/// Trains on a frozen dataset for `iterations × offline_multiplier`
/// iterations of `updates_per_iteration` updates, evaluating on `eval_mdp`
/// after each. No environment step feeds training.
pub fn run_offline_training(
    config: &TrainConfig,
    dataset: &LoggedDataset,
    eval_mdp: &MdpSpec,
) -> Result<RunOutput, TrainError> {
    run_offline_training_with(config, dataset, eval_mdp, &mut ())
}

pub fn run_offline_training_with(
    config: &TrainConfig,
    dataset: &LoggedDataset,
    eval_mdp: &MdpSpec,
    observer: &mut dyn TrainObserver,
) -> Result<RunOutput, TrainError> {
    config.validate()?;
    let meta = dataset.meta();
    let (ns, na) = (eval_mdp.num_states(), eval_mdp.num_actions());
    if meta.num_actions != na {
        return Err(TrainError::Incompatible(format!("dataset has {} actions, environment {na}", meta.num_actions)));
    }
    if meta.obs_dim != meta.encoding.dim(ns) {
        return Err(TrainError::Incompatible(format!(
            "{} observations of length {} do not fit {ns} states",
            meta.encoding.as_str(),
            meta.obs_dim
        )));
    }
    if dataset.is_empty() {
        return Err(TrainError::Replay(ReplayError::Empty));
    }
    let t = &config.train;
    let discount = t.discount.unwrap_or(meta.discount);
    let mut learner = Learner::new(config, ensemble_spec(config, ns, na, meta.encoding), discount)?;
    let mut log_curve = CurveLog::new();
    let mut divergence = None;
    'outer: for iteration in 0..t.iterations * t.offline_multiplier {
        let mut td = Vec::with_capacity(t.updates_per_iteration as usize);
        for _ in 0..t.updates_per_iteration {
            match learner.update(dataset, observer)? {
                UpdateOutcome::Done(d) => td.push(d),
                UpdateOutcome::Diverged(reason) => {
                    divergence = Some(reason);
                    log_curve.mark_divergence(iteration, learner.updates, &td, config.eval.episodes);
                    break 'outer;
                }
            }
        }
        log_curve.evaluate(config, eval_mdp, &learner.q, iteration, learner.updates, &td);
    }
    Ok(log_curve.finish(learner, divergence, 0))
}

/// Mean return of the uniform-random policy (evaluation with epsilon 1),
/// using the evaluation stream of iteration 0.
pub fn random_policy_score(config: &TrainConfig, mdp: &MdpSpec) -> Result<EvalRecord, TrainError> {
    let spec = ensemble_spec(config, mdp.num_states(), mdp.num_actions(), config.env.encoding);
    let q = QEnsemble::zeros(spec)?;
    let mut settings = EvalSettings::from_config(config);
    settings.epsilon = 1.0;
    Ok(evaluate_policy(&q, mdp, &settings, &mut stream(config.train.seed, Stream::Eval(0))))
}
