//! Rank-r trilinear dynamics model.
//!
//! For agent `n`, state `s` and action `a` the model predicts the state
//! difference coordinate-wise as
//!
//! ```text
//! Δŝ_d = Σ_ℓ u_ℓ(n) · V_{d,ℓ}(s) · w_ℓ(a)
//! ```
//!
//! where `u` is a row of the agent embedding table, `V` is the state
//! encoder's output reshaped to `D x r` and `w` is a row of the action
//! embedding table. [`Prop1Model`] is the exact rank-3 factorization of
//! MountainCar and serves as a ground truth for the trilinear machinery.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::OfflineDataset;
use crate::envs::{mc_closed_form, Action, EnvKind, State};
use crate::error::{Error, Result};
use crate::nn::{dot, DenseLayer, EmbeddingTable, Grads, Mlp, Parameterized};
use crate::rng;
use crate::training::{self, TrainConfig};

/// Hidden widths of the state encoder.
pub const DEFAULT_HIDDEN: &[usize] = &[256];

/// `out_d = Σ_ℓ u_ℓ V_{d,ℓ} w_ℓ` with `v` row-major `D x r`.
pub fn trilinear(u: &[f64], v: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let r = u.len();
    if r == 0 || w.len() != r || v.len() % r != 0 {
        return Err(Error::Shape(format!(
            "trilinear: |u| = {}, |w| = {}, |V| = {}",
            u.len(),
            w.len(),
            v.len()
        )));
    }
    Ok(v.chunks_exact(r)
        .map(|row| (0..r).map(|l| u[l] * row[l] * w[l]).sum())
        .collect())
}

/// One training example `(n, s, k, s')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub agent: usize,
    pub state: State,
    pub action: Action,
    pub next_state: State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedModel {
    pub env: EnvKind,
    pub rank: usize,
    /// `N x r` agent factors.
    pub agents: EmbeddingTable,
    /// `D -> hidden -> D·r`.
    pub state_encoder: Mlp,
    /// `|A| x r` action factors.
    pub actions: EmbeddingTable,
}

impl FactorizedModel {
    pub fn new<R: Rng + ?Sized>(
        env: EnvKind,
        n_agents: usize,
        rank: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if n_agents == 0 {
            return Err(Error::Config("model needs at least one agent".into()));
        }
        let d = env.state_dim();
        let mut sizes = vec![d];
        sizes.extend_from_slice(hidden);
        sizes.push(d * rank);
        let agents = EmbeddingTable::new(n_agents, rank, rng);
        let state_encoder = Mlp::new(&sizes, rng);
        let actions = EmbeddingTable::new(env.action_count(), rank, rng);
        Ok(FactorizedModel {
            env,
            rank,
            agents,
            state_encoder,
            actions,
        })
    }

    /// Check internal shape consistency (used after deserialization).
    pub fn validate(&self) -> Result<()> {
        let d = self.env.state_dim();
        let ok = self.rank >= 1
            && self.agents.dim == self.rank
            && self.agents.values.len() == self.agents.rows * self.rank
            && self.actions.dim == self.rank
            && self.actions.rows == self.env.action_count()
            && self.actions.values.len() == self.actions.rows * self.rank
            && self.state_encoder.input_dim() == d
            && self.state_encoder.output_dim() == d * self.rank;
        if ok {
            Mlp::from_layers(self.state_encoder.layers().to_vec()).map(|_| ())
        } else {
            Err(Error::Shape(format!(
                "model tensors inconsistent with env {} and rank {}",
                self.env, self.rank
            )))
        }
    }

    pub fn n_agents(&self) -> usize {
        self.agents.rows
    }

    pub fn agent_factor(&self, n: usize) -> Result<&[f64]> {
        self.agents.row(n)
    }

    fn check_input(&self, s: &State, k: Action) -> Result<()> {
        self.env.check_action(k)?;
        if s.dim() != self.env.state_dim() {
            return Err(Error::Shape(format!(
                "state of dimension {} for {}",
                s.dim(),
                self.env
            )));
        }
        Ok(())
    }

    /// Predicted `s' - s` for an arbitrary agent factor `u`.
    pub fn predict_delta_with_factor(&self, u: &[f64], s: &State, k: Action) -> Result<State> {
        self.check_input(s, k)?;
        if u.len() != self.rank {
            return Err(Error::Shape(format!(
                "agent factor of length {}, rank {}",
                u.len(),
                self.rank
            )));
        }
        let v = self.state_encoder.predict(s.as_slice())?;
        let w = self.actions.row(k.0)?;
        Ok(State::from_slice(&trilinear(u, &v, w)?))
    }

    pub fn predict_delta(&self, n: usize, s: &State, k: Action) -> Result<State> {
        self.predict_delta_with_factor(self.agents.row(n)?, s, k)
    }

    pub fn predict_next(&self, n: usize, s: &State, k: Action) -> Result<State> {
        let delta = self.predict_delta(n, s, k)?;
        Ok(add(s, &delta))
    }

    pub fn predict_next_with_factor(&self, u: &[f64], s: &State, k: Action) -> Result<State> {
        let delta = self.predict_delta_with_factor(u, s, k)?;
        Ok(add(s, &delta))
    }

    /// Mean over the batch of `‖Δs - Δŝ‖²`, and its gradient with respect
    /// to every parameter tensor.
    pub fn batch_loss_and_grads(&self, batch: &[Sample]) -> Result<(f64, Grads)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let r = self.rank;
        let d = self.env.state_dim();
        let scale = 1.0 / batch.len() as f64;
        let mut grads = self.zero_grads();
        let (head, mlp_grads) = grads.split_at_mut(2);
        let (agent_grads, action_grads) = head.split_at_mut(1);
        let mut total = 0.0;
        let mut dv = vec![0.0; d * r];
        for sample in batch {
            self.check_input(&sample.state, sample.action)?;
            let u = self.agents.row(sample.agent)?;
            let w = self.actions.row(sample.action.0)?;
            let (v, tape) = self.state_encoder.forward(sample.state.as_slice())?;
            let gu = &mut agent_grads[0][sample.agent * r..(sample.agent + 1) * r];
            for di in 0..d {
                let vrow = &v[di * r..(di + 1) * r];
                let pred: f64 = (0..r).map(|l| u[l] * vrow[l] * w[l]).sum();
                let target = sample.next_state[di] - sample.state[di];
                let err = pred - target;
                total += err * err;
                let g = 2.0 * err * scale;
                for l in 0..r {
                    dv[di * r + l] = g * u[l] * w[l];
                    gu[l] += g * vrow[l] * w[l];
                    action_grads[0][sample.action.0 * r + l] += g * u[l] * vrow[l];
                }
            }
            self.state_encoder.backward_into(&tape, &dv, mlp_grads)?;
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss is {loss}")));
        }
        Ok((loss, grads))
    }

    /// Mean per-sample squared error without gradients.
    pub fn mse(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Config("empty sample set".into()));
        }
        let mut total = 0.0;
        for s in samples {
            let delta = self.predict_delta(s.agent, &s.state, s.action)?;
            for di in 0..s.state.dim() {
                let err = delta[di] - (s.next_state[di] - s.state[di]);
                total += err * err;
            }
        }
        Ok(total / samples.len() as f64)
    }

    /// Precompute a fast stepper for one agent factor `u`: for each action
    /// the output layer is contracted with `u ⊙ w(a)`, leaving one `D x H`
    /// head per action.
    pub fn agent_dynamics(&self, u: &[f64]) -> Result<AgentDynamics<'_>> {
        if u.len() != self.rank {
            return Err(Error::Shape(format!(
                "agent factor of length {}, rank {}",
                u.len(),
                self.rank
            )));
        }
        let r = self.rank;
        let d = self.env.state_dim();
        let out = self.state_encoder.layers().last().unwrap();
        let hidden = out.inputs;
        let mut heads = Vec::with_capacity(self.env.action_count());
        for k in 0..self.env.action_count() {
            let w = self.actions.row(k)?;
            let mut weights = vec![0.0; d * hidden];
            let mut bias = vec![0.0; d];
            for di in 0..d {
                for l in 0..r {
                    let c = u[l] * w[l];
                    let o = di * r + l;
                    bias[di] += c * out.bias[o];
                    for (acc, wt) in weights[di * hidden..(di + 1) * hidden].iter_mut().zip(out.row(o)) {
                        *acc += c * wt;
                    }
                }
            }
            heads.push(DenseLayer::from_parts(hidden, d, weights, bias)?);
        }
        Ok(AgentDynamics { model: self, heads })
    }
}

impl Parameterized for FactorizedModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.agents.values.as_slice(), self.actions.values.as_slice()];
        out.extend(self.state_encoder.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.agents.values.as_mut_slice(), self.actions.values.as_mut_slice()];
        out.extend(self.state_encoder.tensors_mut());
        out
    }
}

fn add(s: &State, delta: &State) -> State {
    let mut next = *s;
    for (x, dx) in next.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *x += dx;
    }
    next
}

/// Reusable buffers for [`AgentDynamics::next_state`].
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// A model specialised to one agent factor; used by the planner's imagined
/// rollouts. Agrees with [`FactorizedModel::predict_next_with_factor`] up
/// to floating-point reassociation.
#[derive(Debug, Clone)]
pub struct AgentDynamics<'a> {
    model: &'a FactorizedModel,
    heads: Vec<DenseLayer>,
}

impl AgentDynamics<'_> {
    /// `k` must be a valid action index for the model's environment.
    pub fn next_state(&self, s: &State, k: Action, scratch: &mut Scratch) -> State {
        self.model
            .state_encoder
            .hidden_into(s.as_slice(), &mut scratch.b, &mut scratch.a);
        let head = &self.heads[k.0];
        let mut next = *s;
        for (di, x) in next.as_mut_slice().iter_mut().enumerate() {
            *x += dot(head.row(di), &scratch.a) + head.bias[di];
        }
        next
    }
}

/// Exact rank-3 MountainCar model: `u = (1, g, 1)`, `w = (1, 1, a)`,
/// `v(s, 1) = (s₁+s₂, -cos(3s₁)/2, 1/2)`, `v(s, 2) = (s₂, -cos(3s₁), 1)`.
/// Predicts the next state itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prop1Model {
    pub gravity: f64,
}

impl Prop1Model {
    pub const RANK: usize = 3;

    pub fn agent_factor(&self) -> [f64; 3] {
        [1.0, self.gravity, 1.0]
    }

    pub fn action_factor(a: f64) -> [f64; 3] {
        [1.0, 1.0, a]
    }

    /// Row-major `2 x 3`.
    pub fn state_factors(s: &State) -> [f64; 6] {
        let c = (3.0 * s[0]).cos();
        [s[0] + s[1], -c / 2.0, 0.5, s[1], -c, 1.0]
    }

    pub fn predict(&self, s: &State, a: f64) -> State {
        let out = trilinear(&self.agent_factor(), &Self::state_factors(s), &Self::action_factor(a))
            .expect("fixed rank-3 shapes");
        State::from_slice(&out)
    }

    /// The closed-form transition this model factorizes.
    pub fn reference(&self, s: &State, a: f64) -> State {
        mc_closed_form(*s, a, self.gravity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankSelection {
    pub rank: usize,
    /// `(rank, validation MSE)` for every candidate, in ascending rank order.
    pub scores: Vec<(usize, f64)>,
}

/// Hold out 20% of transitions (seeded, pooled across trajectories), train
/// one model per candidate rank on the rest and keep the rank with the
/// lowest validation MSE; ties go to the smaller rank.
pub fn rank_select(ds: &OfflineDataset, candidates: &[usize], cfg: &TrainConfig) -> Result<RankSelection> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate ranks".into()));
    }
    let mut samples = ds.samples();
    if samples.len() < 2 {
        return Err(Error::Config("rank selection needs at least two transitions".into()));
    }
    samples.shuffle(&mut rng::stream(cfg.seed, "rank-select-split", 0));
    let n_val = ((samples.len() as f64) * 0.2).round().max(1.0) as usize;
    let (val, train) = samples.split_at(n_val);

    let mut ranks = candidates.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    let mut scores = Vec::with_capacity(ranks.len());
    for &rank in &ranks {
        let cfg = TrainConfig { rank, ..cfg.clone() };
        let (model, _) = training::train_on_samples(ds.env, ds.n_agents(), train, &cfg)?;
        scores.push((rank, model.mse(val)?));
    }
    let mut best = scores[0];
    for &(rank, mse) in &scores[1..] {
        if mse < best.1 {
            best = (rank, mse);
        }
    }
    Ok(RankSelection { rank: best.0, scores })
}
