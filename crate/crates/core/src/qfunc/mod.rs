//! Parameterized Q-function ensembles.
//!
//! A [`QEnsemble`] maps an observation to a `K × A` matrix of values, one row
//! per head. Three families share one flat parameter vector layout:
//!
//! - tabular: one `S × A` table per head;
//! - linear: one affine map per head over the observation features;
//! - mlp: dense layers with a nonlinearity, either a shared trunk with `K`
//!   final affine heads ([`Topology::MultiHead`]) or `K` disjoint networks
//!   ([`Topology::Separate`]).
//!
//! Gradients are derived by hand in [`QEnsemble::gradient`].

mod adam;
mod checkpoint;
mod target;

pub use adam::OptimizerState;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use target::{SyncSchedule, TargetSnapshot};

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::ObsEncoding;
use crate::rng::Rng;

/// Upper bound on the number of heads.
pub const MAX_HEADS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum QFuncError {
    #[error("observation of length {got} does not match {encoding} encoding of length {expected}")]
    EncodingMismatch { encoding: &'static str, expected: usize, got: usize },
    #[error("observation is not a valid state encoding")]
    InvalidObservation,
    #[error("non-finite value in network output")]
    NonFiniteOutput,
    #[error("non-finite gradient entry at {0}; update refused")]
    NonFiniteGradient(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid ensemble spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Tabular,
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// Shared layers, one final affine map per head.
    MultiHead,
    /// One independent network per head.
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and output `h`.
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

macro_rules! kebab_enum_str {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(<$ty>::$variant => $name),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok(<$ty>::$variant),)+
                    other => Err(format!("unknown {} `{other}`", stringify!($ty))),
                }
            }
        }
    };
}

kebab_enum_str!(Architecture { Tabular => "tabular", Linear => "linear", Mlp => "mlp" });
kebab_enum_str!(Topology { MultiHead => "multi-head", Separate => "separate" });
kebab_enum_str!(Activation { Relu => "relu", Tanh => "tanh" });

/// Shape and family of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub architecture: Architecture,
    pub topology: Topology,
    pub heads: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub encoding: ObsEncoding,
    /// Hidden layer widths; ignored unless the architecture is mlp.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Tabular entries start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<(), QFuncError> {
        let bad = |m: &str| Err(QFuncError::InvalidSpec(m.to_string()));
        if self.heads == 0 || self.heads > MAX_HEADS {
            return bad("heads must be in 1..=256");
        }
        if self.num_states == 0 || self.num_actions == 0 {
            return bad("state and action counts must be positive");
        }
        if self.architecture == Architecture::Mlp && self.hidden.is_empty() {
            return bad("mlp needs at least one hidden layer");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return bad("init scale must be finite and >= 0");
        }
        Ok(())
    }

    /// Observation length the ensemble accepts.
    pub fn obs_dim(&self) -> usize {
        self.encoding.dim(self.num_states)
    }

    /// Length of the dense feature vector fed to linear and mlp families.
    fn feature_dim(&self) -> usize {
        self.num_states
    }

    fn hidden_layers(&self) -> &[usize] {
        match self.architecture {
            Architecture::Mlp => &self.hidden,
            _ => &[],
        }
    }
}

/// One dense layer inside the flat parameter vector. Weights are stored
/// input-major: `w[i * n_out + o]`.
#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    fn range(&self) -> Range<usize> {
        self.w..self.w + self.len()
    }

    fn forward(&self, params: &[f64], x: &[f64], z: &mut [f64]) {
        z.copy_from_slice(&params[self.b..self.b + self.n_out]);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &params[self.w + i * self.n_out..self.w + (i + 1) * self.n_out];
            for (zo, &wo) in z.iter_mut().zip(row) {
                *zo += xi * wo;
            }
        }
    }

    /// Accumulates parameter gradients for upstream `dz`; writes `dx` if given.
    fn backward(&self, params: &[f64], x: &[f64], dz: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        for (g, &d) in grad[self.b..self.b + self.n_out].iter_mut().zip(dz) {
            *g += d;
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &mut grad[self.w + i * self.n_out..self.w + (i + 1) * self.n_out];
            for (g, &d) in row.iter_mut().zip(dz) {
                *g += xi * d;
            }
        }
        if let Some(dx) = dx {
            for (i, dxi) in dx.iter_mut().enumerate() {
                let row = &params[self.w + i * self.n_out..self.w + (i + 1) * self.n_out];
                *dxi = row.iter().zip(dz).map(|(w, d)| w * d).sum();
            }
        }
    }
}

/// Parameter layout of the dense families.
#[derive(Debug, Clone)]
struct DenseLayout {
    /// Hidden stacks. One shared stack for multi-head, one per head otherwise.
    towers: Vec<Vec<Dense>>,
    /// Final affine map of each head.
    heads: Vec<Dense>,
    head_tower: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Layout {
    Tabular,
    Dense(DenseLayout),
}

fn build_layout(spec: &EnsembleSpec) -> (Layout, usize) {
    if spec.architecture == Architecture::Tabular {
        return (Layout::Tabular, spec.heads * spec.num_states * spec.num_actions);
    }
    let mut offset = 0;
    let mut dense = |n_in: usize, n_out: usize| {
        let d = Dense { w: offset, b: offset + n_in * n_out, n_in, n_out };
        offset += d.len();
        d
    };
    let hidden = spec.hidden_layers();
    let tower = |dense: &mut dyn FnMut(usize, usize) -> Dense| {
        let mut n_in = spec.feature_dim();
        hidden
            .iter()
            .map(|&w| {
                let d = dense(n_in, w);
                n_in = w;
                d
            })
            .collect::<Vec<_>>()
    };
    let last = hidden.last().copied().unwrap_or(spec.feature_dim());
    let shared = spec.topology == Topology::MultiHead || hidden.is_empty();
    let mut towers = Vec::new();
    let mut heads = Vec::new();
    let mut head_tower = Vec::new();
    if shared {
        towers.push(tower(&mut dense));
        for _ in 0..spec.heads {
            heads.push(dense(last, spec.num_actions));
            head_tower.push(0);
        }
    } else {
        for k in 0..spec.heads {
            towers.push(tower(&mut dense));
            heads.push(dense(last, spec.num_actions));
            head_tower.push(k);
        }
    }
    (Layout::Dense(DenseLayout { towers, heads, head_tower }), offset)
}

/// Values of every head for one observation, row-major `K × A`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadValues {
    heads: usize,
    actions: usize,
    values: Vec<f64>,
}

impl HeadValues {
    pub fn new(heads: usize, actions: usize, values: Vec<f64>) -> Result<Self, QFuncError> {
        if heads == 0 || actions == 0 || values.len() != heads * actions {
            return Err(QFuncError::ShapeMismatch(format!("{} values for {heads} x {actions}", values.len())));
        }
        Ok(HeadValues { heads, actions, values })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn row(&self, head: usize) -> &[f64] {
        &self.values[head * self.actions..(head + 1) * self.actions]
    }

    pub fn get(&self, head: usize, action: usize) -> f64 {
        self.values[head * self.actions + action]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Per-action mean over heads.
    pub fn q_average(&self) -> Vec<f64> {
        q_average(self)
    }

    /// Per-action `Σ_k w_k Q^k`.
    pub fn mix(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.actions];
        for (k, &w) in weights.iter().enumerate().take(self.heads) {
            for (o, &v) in out.iter_mut().zip(self.row(k)) {
                *o += w * v;
            }
        }
        out
    }
}

/// Arithmetic mean over heads, per action.
pub fn q_average(values: &HeadValues) -> Vec<f64> {
    let mut out = vec![0.0; values.actions];
    for k in 0..values.heads {
        for (o, &v) in out.iter_mut().zip(values.row(k)) {
            *o += v;
        }
    }
    let k = values.heads as f64;
    out.iter_mut().for_each(|o| *o /= k);
    out
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// K parameterized Q-functions sharing one flat parameter vector.
#[derive(Debug, Clone)]
pub struct QEnsemble {
    spec: EnsembleSpec,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for QEnsemble {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

impl QEnsemble {
    /// Zero-initialized ensemble.
    pub fn zeros(spec: EnsembleSpec) -> Result<Self, QFuncError> {
        spec.validate()?;
        let (layout, len) = build_layout(&spec);
        Ok(QEnsemble { spec, layout, params: vec![0.0; len] })
    }

    /// Randomly initialized ensemble. Dense layers use fan-in scaled Gaussian
    /// weights (He scaling before rectifiers) and zero biases; each head and
    /// each separate network draws its own weights.
    pub fn new(spec: EnsembleSpec, rng: &mut Rng) -> Result<Self, QFuncError> {
        let mut q = Self::zeros(spec)?;
        match &q.layout {
            Layout::Tabular => {
                let scale = q.spec.init_scale;
                if scale > 0.0 {
                    for p in q.params.iter_mut() {
                        *p = rng.random_range(-scale..=scale);
                    }
                }
            }
            Layout::Dense(layout) => {
                let gain = match q.spec.activation {
                    Activation::Relu => 2.0,
                    Activation::Tanh => 1.0,
                };
                let layers: Vec<(Dense, f64)> = layout
                    .towers
                    .iter()
                    .flatten()
                    .map(|d| (*d, gain))
                    .chain(layout.heads.iter().map(|d| (*d, 1.0)))
                    .collect();
                for (d, g) in layers {
                    let std = (g / d.n_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    for p in &mut q.params[d.w..d.b] {
                        *p = normal.sample(rng);
                    }
                }
            }
        }
        Ok(q)
    }

    /// Ensemble with the given parameters.
    pub fn from_params(spec: EnsembleSpec, params: Vec<f64>) -> Result<Self, QFuncError> {
        let mut q = Self::zeros(spec)?;
        if params.len() != q.params.len() {
            return Err(QFuncError::ShapeMismatch(format!(
                "{} parameters, layout needs {}",
                params.len(),
                q.params.len()
            )));
        }
        q.params = params;
        Ok(q)
    }

    pub fn spec(&self) -> &EnsembleSpec {
        &self.spec
    }

    pub fn heads(&self) -> usize {
        self.spec.heads
    }

    pub fn num_actions(&self) -> usize {
        self.spec.num_actions
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Largest absolute parameter; infinite or NaN if any parameter is.
    pub fn max_abs_param(&self) -> f64 {
        self.params.iter().fold(0.0_f64, |m, p| if p.is_nan() { f64::NAN } else { m.max(p.abs()) })
    }

    /// Parameters owned by head `k` alone: its table, its final affine map
    /// (multi-head) or its whole network (separate).
    pub fn head_param_ranges(&self, k: usize) -> Vec<Range<usize>> {
        match &self.layout {
            Layout::Tabular => {
                let n = self.spec.num_states * self.spec.num_actions;
                vec![k * n..(k + 1) * n]
            }
            Layout::Dense(l) => {
                let mut ranges = vec![l.heads[k].range()];
                if l.towers.len() > 1 {
                    ranges.extend(l.towers[l.head_tower[k]].iter().map(Dense::range));
                }
                ranges
            }
        }
    }

    fn check_obs(&self, obs: &[f32]) -> Result<(), QFuncError> {
        let expected = self.spec.obs_dim();
        if obs.len() != expected {
            return Err(QFuncError::EncodingMismatch {
                encoding: self.spec.encoding.as_str(),
                expected,
                got: obs.len(),
            });
        }
        Ok(())
    }

    fn state_index(&self, obs: &[f32]) -> Result<usize, QFuncError> {
        self.check_obs(obs)?;
        match self.spec.encoding.decode(obs) {
            Some(s) if s < self.spec.num_states => Ok(s),
            _ => Err(QFuncError::InvalidObservation),
        }
    }

    fn features(&self, obs: &[f32]) -> Result<Vec<f64>, QFuncError> {
        self.check_obs(obs)?;
        match self.spec.encoding {
            ObsEncoding::OneHot => Ok(obs.iter().map(|&x| x as f64).collect()),
            ObsEncoding::Index => {
                let s = self.state_index(obs)?;
                let mut f = vec![0.0; self.spec.num_states];
                f[s] = 1.0;
                Ok(f)
            }
        }
    }

    /// `K × A` values for one observation.
    pub fn forward(&self, obs: &[f32]) -> Result<HeadValues, QFuncError> {
        let values = match &self.layout {
            Layout::Tabular => {
                let s = self.state_index(obs)?;
                let (ns, na) = (self.spec.num_states, self.spec.num_actions);
                (0..self.spec.heads)
                    .flat_map(|k| {
                        let start = (k * ns + s) * na;
                        self.params[start..start + na].iter().copied()
                    })
                    .collect()
            }
            Layout::Dense(layout) => {
                let x = self.features(obs)?;
                self.dense_trace(layout, &x).out
            }
        };
        if values.iter().any(|v: &f64| !v.is_finite()) {
            return Err(QFuncError::NonFiniteOutput);
        }
        Ok(HeadValues { heads: self.spec.heads, actions: self.spec.num_actions, values })
    }

    fn dense_trace(&self, layout: &DenseLayout, x: &[f64]) -> Trace {
        let act = self.spec.activation;
        let mut towers = Vec::with_capacity(layout.towers.len());
        for tower in &layout.towers {
            let mut acts = vec![x.to_vec()];
            let mut pres = Vec::with_capacity(tower.len());
            for d in tower {
                let mut z = vec![0.0; d.n_out];
                d.forward(&self.params, acts.last().expect("input"), &mut z);
                let h = z.iter().map(|&v| act.apply(v)).collect();
                pres.push(z);
                acts.push(h);
            }
            towers.push(TowerTrace { acts, pres });
        }
        let na = self.spec.num_actions;
        let mut out = vec![0.0; self.spec.heads * na];
        for (k, head) in layout.heads.iter().enumerate() {
            let h = towers[layout.head_tower[k]].acts.last().expect("tower output");
            head.forward(&self.params, h, &mut out[k * na..(k + 1) * na]);
        }
        Trace { towers, out }
    }

    /// Gradient of `Σ_i ⟨upstream_i, forward(obs_i)⟩` with respect to the
    /// parameters. `observations` holds `N` observations back to back and
    /// `upstream` holds `N` row-major `K × A` blocks.
    pub fn gradient(&self, observations: &[f32], upstream: &[f64]) -> Result<Vec<f64>, QFuncError> {
        let dim = self.spec.obs_dim();
        let block = self.spec.heads * self.spec.num_actions;
        if dim == 0 || !observations.len().is_multiple_of(dim) {
            return Err(QFuncError::ShapeMismatch(format!(
                "{} observation floats for dimension {dim}",
                observations.len()
            )));
        }
        let n = observations.len() / dim;
        if upstream.len() != n * block {
            return Err(QFuncError::ShapeMismatch(format!(
                "upstream has {} entries, expected {n} x {block}",
                upstream.len()
            )));
        }
        let mut grad = vec![0.0; self.params.len()];
        for (obs, up) in observations.chunks(dim).zip(upstream.chunks(block)) {
            if up.iter().all(|&u| u == 0.0) {
                continue;
            }
            self.accumulate_gradient(obs, up, &mut grad)?;
        }
        Ok(grad)
    }

    fn accumulate_gradient(&self, obs: &[f32], up: &[f64], grad: &mut [f64]) -> Result<(), QFuncError> {
        let na = self.spec.num_actions;
        match &self.layout {
            Layout::Tabular => {
                let s = self.state_index(obs)?;
                let ns = self.spec.num_states;
                for k in 0..self.spec.heads {
                    let start = (k * ns + s) * na;
                    for (g, &u) in grad[start..start + na].iter_mut().zip(&up[k * na..(k + 1) * na]) {
                        *g += u;
                    }
                }
            }
            Layout::Dense(layout) => {
                let x = self.features(obs)?;
                let trace = self.dense_trace(layout, &x);
                let mut d_tower_out: Vec<Vec<f64>> =
                    trace.towers.iter().map(|t| vec![0.0; t.acts.last().expect("tower output").len()]).collect();
                let mut dh = Vec::new();
                for (k, head) in layout.heads.iter().enumerate() {
                    let t = layout.head_tower[k];
                    let h = trace.towers[t].acts.last().expect("tower output");
                    dh.resize(head.n_in, 0.0);
                    let need_dx = !layout.towers[t].is_empty();
                    head.backward(
                        &self.params,
                        h,
                        &up[k * na..(k + 1) * na],
                        grad,
                        need_dx.then_some(dh.as_mut_slice()),
                    );
                    if need_dx {
                        for (a, b) in d_tower_out[t].iter_mut().zip(&dh) {
                            *a += b;
                        }
                    }
                }
                let act = self.spec.activation;
                for (t, tower) in layout.towers.iter().enumerate() {
                    let tr = &trace.towers[t];
                    let mut dh = std::mem::take(&mut d_tower_out[t]);
                    for (l, d) in tower.iter().enumerate().rev() {
                        let dz: Vec<f64> = dh
                            .iter()
                            .zip(&tr.pres[l])
                            .zip(&tr.acts[l + 1])
                            .map(|((g, &z), &h)| g * act.derivative(z, h))
                            .collect();
                        if l > 0 {
                            let mut dx = vec![0.0; d.n_in];
                            d.backward(&self.params, &tr.acts[l], &dz, grad, Some(&mut dx));
                            dh = dx;
                        } else {
                            d.backward(&self.params, &tr.acts[l], &dz, grad, None);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Single-head network computing row `k` of this ensemble.
    pub fn head(&self, k: usize) -> QEnsemble {
        assert!(k < self.spec.heads, "head {k} out of range");
        let mut spec = self.spec.clone();
        spec.heads = 1;
        let mut single = QEnsemble::zeros(spec).expect("valid spec");
        self.copy_head_into(k, &mut single, 0);
        single
    }

    /// Same ensemble with every head replaced by a copy of head `k`.
    pub fn broadcast_head(&self, k: usize) -> QEnsemble {
        let mut out = self.clone();
        for j in 0..self.spec.heads {
            self.copy_head_into(k, &mut out, j);
        }
        out
    }

    fn copy_head_into(&self, k: usize, dst: &mut QEnsemble, j: usize) {
        match (&self.layout, &dst.layout) {
            (Layout::Tabular, Layout::Tabular) => {
                let n = self.spec.num_states * self.spec.num_actions;
                dst.params[j * n..(j + 1) * n].copy_from_slice(&self.params[k * n..(k + 1) * n]);
            }
            (Layout::Dense(src), Layout::Dense(dl)) => {
                let copy = |from: &Dense, to: &Dense, dst: &mut [f64]| {
                    dst[to.range()].copy_from_slice(&self.params[from.range()]);
                };
                copy(&src.heads[k], &dl.heads[j], &mut dst.params);
                let (ts, td) = (&src.towers[src.head_tower[k]], &dl.towers[dl.head_tower[j]]);
                for (a, b) in ts.iter().zip(td) {
                    copy(a, b, &mut dst.params);
                }
            }
            _ => unreachable!("same architecture"),
        }
    }
}

#[derive(Debug)]
struct TowerTrace {
    /// Input followed by every hidden activation.
    acts: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
}

#[derive(Debug)]
struct Trace {
    towers: Vec<TowerTrace>,
    out: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    pub(crate) fn spec(arch: Architecture, topology: Topology, heads: usize) -> EnsembleSpec {
        EnsembleSpec {
            architecture: arch,
            topology,
            heads,
            num_states: 5,
            num_actions: 3,
            encoding: ObsEncoding::OneHot,
            hidden: vec![6, 4],
            activation: Activation::Relu,
            init_scale: 0.5,
        }
    }

    fn dense_obs(rng: &mut Rng) -> Vec<f32> {
        (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    const ALL: [(Architecture, Topology); 5] = [
        (Architecture::Tabular, Topology::MultiHead),
        (Architecture::Linear, Topology::MultiHead),
        (Architecture::Linear, Topology::Separate),
        (Architecture::Mlp, Topology::MultiHead),
        (Architecture::Mlp, Topology::Separate),
    ];

    #[test]
    fn zero_tabular_forward_is_zero() {
        let q = QEnsemble::zeros(spec(Architecture::Tabular, Topology::MultiHead, 4)).unwrap();
        let v = q.forward(&ObsEncoding::OneHot.encode(2, 5)).unwrap();
        assert!(v.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!((v.heads(), v.actions()), (4, 3));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = stream(1, Stream::Init);
        let q = QEnsemble::new(spec(Architecture::Mlp, Topology::MultiHead, 4), &mut rng).unwrap();
        let obs = dense_obs(&mut rng);
        assert_eq!(q.forward(&obs).unwrap(), q.forward(&obs).unwrap());
    }

    #[test]
    fn rejects_wrong_observation_length() {
        let q = QEnsemble::zeros(spec(Architecture::Linear, Topology::MultiHead, 2)).unwrap();
        assert!(matches!(q.forward(&[1.0, 0.0]), Err(QFuncError::EncodingMismatch { .. })));
        let t = QEnsemble::zeros(spec(Architecture::Tabular, Topology::MultiHead, 2)).unwrap();
        assert_eq!(t.forward(&[0.5, 0.5, 0.0, 0.0, 0.0]), Err(QFuncError::InvalidObservation));
    }

    #[test]
    fn non_finite_parameter_is_reported() {
        let mut q = QEnsemble::zeros(spec(Architecture::Linear, Topology::MultiHead, 1)).unwrap();
        let n = q.num_params();
        q.params_mut()[n - 1] = f64::NAN;
        assert_eq!(q.forward(&[0.0; 5]), Err(QFuncError::NonFiniteOutput));
    }

    #[test]
    fn q_average_examples() {
        let v = HeadValues::new(2, 2, vec![1.0, 3.0, 3.0, 1.0]).unwrap();
        assert_eq!(v.q_average(), vec![2.0, 2.0]);
        let same = HeadValues::new(3, 2, vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        assert_eq!(same.q_average(), vec![0.5, -1.0]);
        assert!(HeadValues::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn argmax_of_average_ignores_positive_rescaling() {
        let mut rng = stream(3, Stream::Init);
        for _ in 0..100 {
            let vals: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c: f64 = rng.random_range(0.01..100.0);
            let a = HeadValues::new(3, 4, vals.clone()).unwrap();
            let b = HeadValues::new(3, 4, vals.iter().map(|v| v * c).collect()).unwrap();
            assert_eq!(argmax(&a.q_average()), argmax(&b.q_average()));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = stream(2, Stream::Init);
        for (arch, topo) in ALL {
            let q = QEnsemble::new(spec(arch, topo, 3), &mut rng).unwrap();
            let obs = ObsEncoding::OneHot.encode(1, 5);
            let g = q.gradient(&obs, &[0.0; 9]).unwrap();
            assert!(g.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn gradient_rejects_bad_shapes() {
        let q = QEnsemble::zeros(spec(Architecture::Linear, Topology::MultiHead, 2)).unwrap();
        assert!(matches!(q.gradient(&[0.0; 5], &[0.0; 5]), Err(QFuncError::ShapeMismatch(_))));
        assert!(matches!(q.gradient(&[0.0; 7], &[0.0; 6]), Err(QFuncError::ShapeMismatch(_))));
    }

    #[test]
    fn linear_gradient_matches_outer_product() {
        let mut rng = stream(4, Stream::Init);
        let q = QEnsemble::new(spec(Architecture::Linear, Topology::MultiHead, 2), &mut rng).unwrap();
        let x = dense_obs(&mut rng);
        let up: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = q.gradient(&x, &up).unwrap();
        // Per head k: W_k is 5 x 3 input-major followed by a bias of 3.
        let per_head = 5 * 3 + 3;
        for k in 0..2 {
            for i in 0..5 {
                for o in 0..3 {
                    let expected = x[i] as f64 * up[k * 3 + o];
                    assert!((g[k * per_head + i * 3 + o] - expected).abs() < 1e-15);
                }
            }
            for o in 0..3 {
                assert_eq!(g[k * per_head + 15 + o], up[k * 3 + o]);
            }
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = stream(5, Stream::Init);
        for topo in [Topology::MultiHead, Topology::Separate] {
            for act in [Activation::Relu, Activation::Tanh] {
                let mut s = spec(Architecture::Mlp, topo, 3);
                s.activation = act;
                let q = QEnsemble::new(s, &mut rng).unwrap();
                let obs: Vec<f32> = (0..2 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let up: Vec<f64> = (0..2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g = q.gradient(&obs, &up).unwrap();
                let f = |q: &QEnsemble| -> f64 {
                    obs.chunks(5)
                        .zip(up.chunks(9))
                        .map(|(o, u)| {
                            let v = q.forward(o).unwrap();
                            v.as_slice().iter().zip(u).map(|(a, b)| a * b).sum::<f64>()
                        })
                        .sum()
                };
                let h = 1e-5;
                for i in 0..q.num_params() {
                    let mut plus = q.clone();
                    plus.params_mut()[i] += h;
                    let mut minus = q.clone();
                    minus.params_mut()[i] -= h;
                    let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                    let rel = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "{topo} {act} param {i}: fd {fd} analytic {}", g[i]);
                }
            }
        }
    }

    #[test]
    fn head_extraction_matches_rows() {
        let mut rng = stream(6, Stream::Init);
        for (arch, topo) in ALL {
            let q = QEnsemble::new(spec(arch, topo, 4), &mut rng).unwrap();
            let obs = ObsEncoding::OneHot.encode(3, 5);
            let full = q.forward(&obs).unwrap();
            for k in 0..4 {
                let single = q.head(k).forward(&obs).unwrap();
                assert_eq!(single.row(0), full.row(k), "{arch} {topo} head {k}");
            }
            let b = q.broadcast_head(2).forward(&obs).unwrap();
            for k in 0..4 {
                assert_eq!(b.row(k), full.row(2));
            }
        }
    }

    #[test]
    fn perturbing_a_head_changes_only_its_row() {
        let mut rng = stream(7, Stream::Init);
        for (arch, topo) in ALL {
            let q = QEnsemble::new(spec(arch, topo, 4), &mut rng).unwrap();
            let obs = dense_obs(&mut rng);
            let obs = if arch == Architecture::Tabular { ObsEncoding::OneHot.encode(4, 5) } else { obs };
            let base = q.forward(&obs).unwrap();
            for j in 0..4 {
                let mut p = q.clone();
                for r in q.head_param_ranges(j) {
                    for i in r {
                        p.params_mut()[i] += 0.3;
                    }
                }
                let out = p.forward(&obs).unwrap();
                for k in 0..4 {
                    if k == j {
                        assert_ne!(out.row(k), base.row(k), "{arch} {topo}");
                    } else {
                        assert_eq!(out.row(k), base.row(k), "{arch} {topo}");
                    }
                }
            }
        }
    }

    #[test]
    fn separate_networks_share_no_parameters() {
        let q = QEnsemble::zeros(spec(Architecture::Mlp, Topology::Separate, 3)).unwrap();
        let mut owned = vec![0usize; q.num_params()];
        for k in 0..3 {
            for r in q.head_param_ranges(k) {
                for i in r {
                    owned[i] += 1;
                }
            }
        }
        assert!(owned.iter().all(|&c| c == 1));
    }
}
