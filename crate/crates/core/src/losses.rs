//! Temporal-difference objectives.
//!
//! Every loss is a pure function of the online ensemble, a frozen target and a
//! mini-batch. It returns the scalar loss, the parameter gradient of that loss
//! (the target is held constant) and TD-error diagnostics.

use rand::Rng as _;
use thiserror::Error;

use crate::qfunc::{argmax, HeadValues, QEnsemble, QFuncError, TargetSnapshot};
use crate::rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("{loss} expects {expected} heads, got {got}")]
    HeadCount { loss: &'static str, expected: usize, got: usize },
    #[error("invalid mixing weights: {0}")]
    InvalidSimplex(String),
    #[error("invalid mini-batch: {0}")]
    InvalidBatch(String),
    #[error("invalid loss parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error(transparent)]
    QFunc(#[from] QFuncError),
}

/// Huber loss with threshold `lambda`.
pub fn huber(u: f64, lambda: f64) -> f64 {
    let a = u.abs();
    if a <= lambda {
        0.5 * u * u
    } else {
        lambda * (a - 0.5 * lambda)
    }
}

/// Derivative of [`huber`] in `u`.
pub fn huber_grad(u: f64, lambda: f64) -> f64 {
    u.clamp(-lambda, lambda)
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self, LossError> {
        if alpha.is_empty() {
            return Err(LossError::InvalidSimplex("empty".into()));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(LossError::InvalidSimplex("negative or non-finite entry".into()));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LossError::InvalidSimplex(format!("entries sum to {sum}")));
        }
        Ok(SimplexWeights(alpha))
    }

    /// Vertex `k` of the `K`-simplex.
    pub fn one_hot(k: usize, len: usize) -> Self {
        assert!(k < len);
        let mut a = vec![0.0; len];
        a[k] = 1.0;
        SimplexWeights(a)
    }

    pub fn uniform(len: usize) -> Self {
        SimplexWeights(vec![1.0 / len as f64; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Draws `α'_k ~ U(0,1)` and normalizes. An all-zero draw is redrawn.
pub fn sample_simplex(k: usize, rng: &mut Rng) -> SimplexWeights {
    assert!(k >= 1, "simplex needs at least one component");
    loop {
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        if sum > 0.0 {
            return SimplexWeights(raw.into_iter().map(|a| a / sum).collect());
        }
    }
}

/// Transitions assembled for one gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    obs_dim: usize,
    observations: Vec<f32>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    next_observations: Vec<f32>,
    terminals: Vec<bool>,
}

impl MiniBatch {
    pub fn new(
        obs_dim: usize,
        observations: Vec<f32>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        next_observations: Vec<f32>,
        terminals: Vec<bool>,
    ) -> Result<Self, LossError> {
        let n = actions.len();
        if n == 0 {
            return Err(LossError::InvalidBatch("empty batch".into()));
        }
        if obs_dim == 0
            || observations.len() != n * obs_dim
            || next_observations.len() != n * obs_dim
            || rewards.len() != n
            || terminals.len() != n
        {
            return Err(LossError::InvalidBatch("array lengths disagree".into()));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(LossError::InvalidBatch("non-finite reward".into()));
        }
        Ok(MiniBatch { obs_dim, observations, actions, rewards, next_observations, terminals })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn observations(&self) -> &[f32] {
        &self.observations
    }

    pub fn observation(&self, i: usize) -> &[f32] {
        &self.observations[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn next_observation(&self, i: usize) -> &[f32] {
        &self.next_observations[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn terminals(&self) -> &[bool] {
        &self.terminals
    }

    /// Clips rewards to `[-1, 1]`.
    pub fn clip_rewards(&mut self) {
        self.rewards.iter_mut().for_each(|r| *r = r.clamp(-1.0, 1.0));
    }
}

/// Result of evaluating a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub mean_abs_td: f64,
    pub max_abs_td: f64,
}

/// Shared loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub discount: f64,
    /// Huber threshold λ, or κ for quantile regression.
    pub huber: f64,
}

impl LossParams {
    pub fn new(discount: f64, huber: f64) -> Self {
        LossParams { discount, huber }
    }

    fn validate(&self) -> Result<(), LossError> {
        if !(0.0..1.0).contains(&self.discount) {
            return Err(LossError::InvalidParameter(format!("discount {}", self.discount)));
        }
        if !(self.huber > 0.0 && self.huber.is_finite()) {
            return Err(LossError::InvalidParameter(format!("huber threshold {}", self.huber)));
        }
        Ok(())
    }
}

struct Pass {
    online: Vec<HeadValues>,
    next: Vec<Option<HeadValues>>,
}

fn prepare(q: &QEnsemble, target: &TargetSnapshot, batch: &MiniBatch, params: &LossParams) -> Result<Pass, LossError> {
    params.validate()?;
    if target.network().spec() != q.spec() {
        return Err(LossError::InvalidBatch("target shape differs from online network".into()));
    }
    if batch.obs_dim() != q.spec().obs_dim() {
        return Err(LossError::InvalidBatch(format!(
            "observation dimension {} but network expects {}",
            batch.obs_dim(),
            q.spec().obs_dim()
        )));
    }
    if let Some(&a) = batch.actions().iter().find(|&&a| a >= q.num_actions()) {
        return Err(LossError::InvalidBatch(format!("action {a} out of range")));
    }
    let mut online = Vec::with_capacity(batch.len());
    let mut next = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        online.push(q.forward(batch.observation(i))?);
        next.push(if batch.terminals()[i] { None } else { Some(target.forward(batch.next_observation(i))?) });
    }
    Ok(Pass { online, next })
}

struct Accum {
    loss: f64,
    upstream: Vec<f64>,
    td_sum: f64,
    td_max: f64,
    td_count: usize,
}

impl Accum {
    fn new(n: usize, block: usize) -> Self {
        Accum { loss: 0.0, upstream: vec![0.0; n * block], td_sum: 0.0, td_max: 0.0, td_count: 0 }
    }

    fn td(&mut self, d: f64) {
        self.td_sum += d.abs();
        self.td_max = self.td_max.max(d.abs());
        self.td_count += 1;
    }

    fn finish(self, q: &QEnsemble, batch: &MiniBatch) -> Result<LossReport, LossError> {
        if !self.loss.is_finite() {
            return Err(LossError::NonFiniteLoss);
        }
        let grad = q.gradient(batch.observations(), &self.upstream)?;
        Ok(LossReport {
            loss: self.loss,
            grad,
            mean_abs_td: self.td_sum / self.td_count.max(1) as f64,
            max_abs_td: self.td_max,
        })
    }
}

fn bootstrap(reward: f64, discount: f64, next: Option<f64>) -> f64 {
    match next {
        Some(v) => reward + discount * v,
        None => reward,
    }
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Single-network TD loss. Requires `K = 1`.
pub fn dqn_loss(
    q: &QEnsemble,
    target: &TargetSnapshot,
    batch: &MiniBatch,
    params: &LossParams,
) -> Result<LossReport, LossError> {
    if q.heads() != 1 {
        return Err(LossError::HeadCount { loss: "dqn", expected: 1, got: q.heads() });
    }
    ensemble_dqn_loss(q, target, batch, params)
}

/// Each head regresses onto its own target head; losses averaged over heads.
pub fn ensemble_dqn_loss(
    q: &QEnsemble,
    target: &TargetSnapshot,
    batch: &MiniBatch,
    params: &LossParams,
) -> Result<LossReport, LossError> {
    let pass = prepare(q, target, batch, params)?;
    let (k, na, n) = (q.heads(), q.num_actions(), batch.len());
    let scale = 1.0 / (k * n) as f64;
    let mut acc = Accum::new(n, k * na);
    for i in 0..n {
        let a = batch.actions()[i];
        for h in 0..k {
            let next = pass.next[i].as_ref().map(|v| max_of(v.row(h)));
            let y = bootstrap(batch.rewards()[i], params.discount, next);
            let d = pass.online[i].get(h, a) - y;
            acc.loss += scale * huber(d, params.huber);
            acc.upstream[i * k * na + h * na + a] = scale * huber_grad(d, params.huber);
            acc.td(d);
        }
    }
    acc.finish(q, batch)
}

/// Heads regress onto one target built from the mean of the target heads.
pub fn averaged_ensemble_dqn_loss(
    q: &QEnsemble,
    target: &TargetSnapshot,
    batch: &MiniBatch,
    params: &LossParams,
) -> Result<LossReport, LossError> {
    let pass = prepare(q, target, batch, params)?;
    let (k, na, n) = (q.heads(), q.num_actions(), batch.len());
    let scale = 1.0 / (k * n) as f64;
    let mut acc = Accum::new(n, k * na);
    for i in 0..n {
        let a = batch.actions()[i];
        let next = pass.next[i].as_ref().map(|v| max_of(&v.q_average()));
        let y = bootstrap(batch.rewards()[i], params.discount, next);
        for h in 0..k {
            let d = pass.online[i].get(h, a) - y;
            acc.loss += scale * huber(d, params.huber);
            acc.upstream[i * k * na + h * na + a] = scale * huber_grad(d, params.huber);
            acc.td(d);
        }
    }
    acc.finish(q, batch)
}

/// Random-mixture loss with one `α` for the whole mini-batch, applied to both
/// the online and the target combination. The target max is taken after
/// mixing.
pub fn rem_loss(
    q: &QEnsemble,
    target: &TargetSnapshot,
    batch: &MiniBatch,
    alpha: &SimplexWeights,
    params: &LossParams,
) -> Result<LossReport, LossError> {
    if alpha.len() != q.heads() {
        return Err(LossError::HeadCount { loss: "rem", expected: q.heads(), got: alpha.len() });
    }
    rem_loss_with(q, target, batch, params, |_| alpha)
}

/// REM variant with an independent `α` per transition.
pub fn rem_loss_per_sample(
    q: &QEnsemble,
    target: &TargetSnapshot,
    batch: &MiniBatch,
    alphas: &[SimplexWeights],
    params: &LossParams,
) -> Result<LossReport, LossError> {
    if alphas.len() != batch.len() {
        return Err(LossError::InvalidBatch(format!("{} weight vectors for {} samples", alphas.len(), batch.len())));
    }
    if let Some(a) = alphas.iter().find(|a| a.len() != q.heads()) {
        return Err(LossError::HeadCount { loss: "rem", expected: q.heads(), got: a.len() });
    }
    rem_loss_with(q, target, batch, params, |i| &alphas[i])
}

fn rem_loss_with<'a>(
    q: &QEnsemble,
    target: &TargetSnapshot,
    batch: &MiniBatch,
    params: &LossParams,
    alpha_for: impl Fn(usize) -> &'a SimplexWeights,
) -> Result<LossReport, LossError> {
    let pass = prepare(q, target, batch, params)?;
    let (k, na, n) = (q.heads(), q.num_actions(), batch.len());
    let scale = 1.0 / n as f64;
    let mut acc = Accum::new(n, k * na);
    for i in 0..n {
        let alpha = alpha_for(i).as_slice();
        let a = batch.actions()[i];
        let mixed: f64 = (0..k).map(|h| alpha[h] * pass.online[i].get(h, a)).sum();
        let next = pass.next[i].as_ref().map(|v| max_of(&v.mix(alpha)));
        let y = bootstrap(batch.rewards()[i], params.discount, next);
        let d = mixed - y;
        acc.loss += scale * huber(d, params.huber);
        let g = scale * huber_grad(d, params.huber);
        for h in 0..k {
            acc.upstream[i * k * na + h * na + a] = alpha[h] * g;
        }
        acc.td(d);
    }
    acc.finish(q, batch)
}

/// Quantile midpoints `(2i + 1) / (2K)` for zero-based `i`.
pub fn quantile_midpoints(k: usize) -> Vec<f64> {
    (0..k).map(|i| (2 * i + 1) as f64 / (2 * k) as f64).collect()
}

/// Quantile-regression loss; head `i` is the `i`-th quantile estimate.
///
/// Per sample: `Σ_i (1/K) Σ_j |τ_i − 1{u_ij < 0}| · huber_κ(u_ij) / κ` with
/// `u_ij = T_j − θ_i`, then averaged over the batch.
pub fn qr_dqn_loss(
    q: &QEnsemble,
    target: &TargetSnapshot,
    batch: &MiniBatch,
    params: &LossParams,
) -> Result<LossReport, LossError> {
    let pass = prepare(q, target, batch, params)?;
    let (k, na, n) = (q.heads(), q.num_actions(), batch.len());
    let kappa = params.huber;
    let tau = quantile_midpoints(k);
    let scale = 1.0 / (n * k) as f64;
    let mut acc = Accum::new(n, k * na);
    let mut targets = vec![0.0; k];
    for i in 0..n {
        let a = batch.actions()[i];
        let r = batch.rewards()[i];
        match &pass.next[i] {
            Some(v) => {
                let a_star = argmax(&v.q_average());
                for (j, t) in targets.iter_mut().enumerate() {
                    *t = r + params.discount * v.get(j, a_star);
                }
            }
            None => targets.iter_mut().for_each(|t| *t = r),
        }
        let mean_theta: f64 = (0..k).map(|h| pass.online[i].get(h, a)).sum::<f64>() / k as f64;
        let mean_target: f64 = targets.iter().sum::<f64>() / k as f64;
        acc.td(mean_theta - mean_target);
        for (h, &tau_h) in tau.iter().enumerate() {
            let theta = pass.online[i].get(h, a);
            let mut g = 0.0;
            for &t in &targets {
                let u = t - theta;
                let w = (tau_h - if u < 0.0 { 1.0 } else { 0.0 }).abs();
                acc.loss += scale * w * huber(u, kappa) / kappa;
                g -= scale * w * huber_grad(u, kappa) / kappa;
            }
            acc.upstream[i * k * na + h * na + a] = g;
        }
    }
    acc.finish(q, batch)
}
