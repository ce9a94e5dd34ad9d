//! Random-shooting ensemble MPC.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{self, Action, AgentParams, EnvKind, State};
use crate::error::{Error, Result};
use crate::factor_model::{AgentDynamics, Scratch};
use crate::training::Ensemble;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    pub candidates: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 50,
            candidates: 1000,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.candidates == 0 {
            return Err(Error::Config(format!(
                "horizon ({}) and candidate count ({}) must be at least 1",
                self.horizon, self.candidates
            )));
        }
        Ok(())
    }
}

/// Dynamics used to imagine candidate rollouts for one fixed agent.
#[derive(Debug, Clone)]
pub enum DynamicsOracle<'a> {
    /// The real simulator; imagined reward stops at termination.
    TrueEnv(AgentParams),
    /// One collapsed stepper per ensemble member.
    Learned { env: EnvKind, members: Vec<AgentDynamics<'a>> },
}

impl<'a> DynamicsOracle<'a> {
    pub fn true_env(params: AgentParams) -> Self {
        DynamicsOracle::TrueEnv(params)
    }

    /// Agent `n` of the ensemble's agent table.
    pub fn learned(ens: &'a Ensemble, n: usize) -> Result<Self> {
        let members = ens
            .members
            .iter()
            .map(|m| m.agent_dynamics(m.agent_factor(n)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(DynamicsOracle::Learned { env: ens.env(), members })
    }

    /// A virtual agent given one latent factor per ensemble member.
    pub fn virtual_agent(ens: &'a Ensemble, factors: &[Vec<f64>]) -> Result<Self> {
        if factors.len() != ens.len() {
            return Err(Error::Shape(format!(
                "{} factors for {} ensemble members",
                factors.len(),
                ens.len()
            )));
        }
        let members = ens
            .members
            .iter()
            .zip(factors)
            .map(|(m, u)| m.agent_dynamics(u))
            .collect::<Result<Vec<_>>>()?;
        Ok(DynamicsOracle::Learned { env: ens.env(), members })
    }

    pub fn env(&self) -> EnvKind {
        match self {
            DynamicsOracle::TrueEnv(p) => p.env(),
            DynamicsOracle::Learned { env, .. } => *env,
        }
    }

    pub fn ensemble_size(&self) -> usize {
        match self {
            DynamicsOracle::TrueEnv(_) => 1,
            DynamicsOracle::Learned { members, .. } => members.len(),
        }
    }

    /// One step of the ensemble-mean prediction (the true transition for
    /// [`DynamicsOracle::TrueEnv`]).
    pub fn mean_next(&self, s: &State, k: Action, scratch: &mut Scratch) -> Result<State> {
        self.env().check_action(k)?;
        match self {
            DynamicsOracle::TrueEnv(p) => envs::dynamics(p, *s, k),
            DynamicsOracle::Learned { members, .. } => {
                let mut mean = State::zeros(s.dim());
                for m in members {
                    let next = m.next_state(s, k, scratch);
                    for d in 0..s.dim() {
                        mean[d] += next[d];
                    }
                }
                for d in 0..s.dim() {
                    mean[d] /= members.len() as f64;
                }
                Ok(mean)
            }
        }
    }
}

/// `C` i.i.d. uniform action sequences of length `h`, flattened
/// candidate-major: candidate `i` is `out[i*h..(i+1)*h]`.
pub fn sample_candidates<R: Rng + ?Sized>(env: EnvKind, cfg: &MpcConfig, rng: &mut R) -> Vec<Action> {
    let a = env.action_count();
    (0..cfg.candidates * cfg.horizon)
        .map(|_| Action(rng.gen_range(0..a)))
        .collect()
}

/// Undiscounted imagined reward of `seq` from `s0`, averaged over members.
/// Returns `-inf` when any imagined state is non-finite.
pub fn score_sequence(oracle: &DynamicsOracle<'_>, s0: &State, seq: &[Action], scratch: &mut Scratch) -> f64 {
    match oracle {
        DynamicsOracle::TrueEnv(p) => {
            let env = p.env();
            let mut s = *s0;
            let mut total = 0.0;
            for &k in seq {
                let Ok(next) = envs::dynamics(p, s, k) else {
                    return f64::NEG_INFINITY;
                };
                total += envs::reward_fn(env, &s, k, &next);
                if envs::is_terminal(env, &next) {
                    break;
                }
                s = next;
            }
            total
        }
        DynamicsOracle::Learned { env, members } => {
            let mut sum = 0.0;
            for m in members {
                let mut s = *s0;
                for &k in seq {
                    let next = m.next_state(&s, k, scratch);
                    if !next.is_finite() {
                        return f64::NEG_INFINITY;
                    }
                    sum += envs::reward_fn(*env, &s, k, &next);
                    s = next;
                }
            }
            sum / members.len() as f64
        }
    }
}

/// Index of the largest finite score; ties go to the lowest index.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in scores.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v > scores[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn score_candidates(oracle: &DynamicsOracle<'_>, s: &State, candidates: &[Action], horizon: usize) -> Vec<f64> {
    candidates
        .par_chunks(horizon)
        .map_init(Scratch::default, |scratch, seq| score_sequence(oracle, s, seq, scratch))
        .collect()
}

/// First action of the best-scoring random candidate.
pub fn mpc_select_action<R: Rng + ?Sized>(
    oracle: &DynamicsOracle<'_>,
    cfg: &MpcConfig,
    s: &State,
    rng: &mut R,
) -> Result<Action> {
    cfg.validate()?;
    if s.dim() != oracle.env().state_dim() || !s.is_finite() {
        return Err(Error::Shape(format!("invalid planning state {s:?}")));
    }
    let candidates = sample_candidates(oracle.env(), cfg, rng);
    let scores = score_candidates(oracle, s, &candidates, cfg.horizon);
    let best = select_best(&scores).ok_or(Error::NoValidCandidate(cfg.candidates))?;
    Ok(candidates[best * cfg.horizon])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub total_reward: f64,
    /// `T + 1` states including the reset state.
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Reset, then replan every step against `oracle` and act in the real
/// environment of `params` until the episode ends.
pub fn run_episode<R: Rng + ?Sized>(
    params: &AgentParams,
    oracle: &DynamicsOracle<'_>,
    cfg: &MpcConfig,
    rng: &mut R,
) -> Result<Episode> {
    if oracle.env() != params.env() {
        return Err(Error::EnvMismatch {
            expected: params.env().to_string(),
            found: oracle.env().to_string(),
        });
    }
    let mut s = envs::reset(params.env(), rng);
    let mut ep = Episode {
        total_reward: 0.0,
        states: vec![s],
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    for t in 0.. {
        let k = mpc_select_action(oracle, cfg, &s, rng)?;
        let res = envs::step(params, s, k, t)?;
        ep.actions.push(k);
        ep.rewards.push(res.reward);
        ep.states.push(res.next_state);
        s = res.next_state;
        if res.done {
            break;
        }
    }
    ep.total_reward = ep.rewards.iter().sum();
    Ok(ep)
}
