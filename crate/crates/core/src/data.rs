//! Offline datasets: one trajectory per agent under a behavior regime.
//!
//! The behavior policies are scripted controllers, not trained agents; the
//! dataset header records this as `"behavior_policy": "scripted"`.
//!
//! On disk a dataset is JSON Lines: a header object, then one record per
//! transition grouped by agent in ascending order.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{self, Action, AgentParams, EnvKind, State};
use crate::error::{Error, Result};
use crate::factor_model::{Prop1Model, Sample};
use crate::rng;

pub const DATASET_FORMAT_VERSION: u32 = 1;

pub const BEHAVIOR_SCRIPTED: &str = "scripted";
pub const BEHAVIOR_PROP1: &str = "prop1-synthetic";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    #[serde(rename = "n")]
    pub agent: usize,
    #[serde(rename = "t")]
    pub step: usize,
    #[serde(rename = "s")]
    pub state: State,
    #[serde(rename = "k")]
    pub action: Action,
    #[serde(rename = "r")]
    pub reward: f64,
    #[serde(rename = "sp")]
    pub next_state: State,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyRegime {
    Pure,
    Random,
    /// Uniform action with probability ε, scripted otherwise.
    PureEps(f64),
}

impl PolicyRegime {
    pub fn tag(&self) -> &'static str {
        match self {
            PolicyRegime::Pure => "pure",
            PolicyRegime::Random => "random",
            PolicyRegime::PureEps(_) => "pure-eps",
        }
    }

    pub fn eps(&self) -> Option<f64> {
        match *self {
            PolicyRegime::PureEps(e) => Some(e),
            _ => None,
        }
    }

    pub fn from_parts(tag: &str, eps: Option<f64>) -> Result<Self> {
        let regime = match tag {
            "pure" => PolicyRegime::Pure,
            "random" => PolicyRegime::Random,
            "pure-eps" | "pure_eps" => PolicyRegime::PureEps(
                eps.ok_or_else(|| Error::Config("pure-eps regime needs --eps".into()))?,
            ),
            other => return Err(Error::Config(format!("unknown regime `{other}`"))),
        };
        regime.validate()?;
        Ok(regime)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PolicyRegime::PureEps(e) if !(0.0..1.0).contains(&e) => {
                Err(Error::Config(format!("ε = {e} outside [0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PolicyRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyRegime::PureEps(e) => write!(f, "pure-eps-{e}"),
            other => f.write_str(other.tag()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub env: EnvKind,
    pub agents: Vec<AgentParams>,
    /// `trajectories[n]` is agent `n`'s single episode.
    pub trajectories: Vec<Vec<Transition>>,
    pub regime: PolicyRegime,
    pub seed: u64,
    pub behavior_policy: String,
    pub generator_version: String,
}

impl OfflineDataset {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn len(&self) -> usize {
        self.trajectories.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flatten()
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.transitions()
            .map(|tr| Sample {
                agent: tr.agent,
                state: tr.state,
                action: tr.action,
                next_state: tr.next_state,
            })
            .collect()
    }

    /// Index of the agent whose covariates equal `params`.
    pub fn agent_index(&self, params: &AgentParams) -> Option<usize> {
        self.agents.iter().position(|a| a.same_as(params))
    }

    /// Structural invariants: one non-empty, well-ordered trajectory per
    /// agent, within the episode cap.
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::Config("dataset has no agents".into()));
        }
        if self.trajectories.len() != self.agents.len() {
            return Err(Error::Config(format!(
                "{} trajectories for {} agents",
                self.trajectories.len(),
                self.agents.len()
            )));
        }
        self.regime.validate()?;
        let d = self.env.state_dim();
        for (n, (params, traj)) in self.agents.iter().zip(&self.trajectories).enumerate() {
            if params.env() != self.env {
                return Err(Error::EnvMismatch {
                    expected: self.env.to_string(),
                    found: params.env().to_string(),
                });
            }
            if traj.is_empty() || traj.len() > self.env.max_steps() {
                return Err(Error::Config(format!(
                    "agent {n} has a trajectory of length {}",
                    traj.len()
                )));
            }
            for (t, tr) in traj.iter().enumerate() {
                if tr.agent != n || tr.step != t {
                    return Err(Error::Config(format!(
                        "agent {n}: transition (n={}, t={}) out of order",
                        tr.agent, tr.step
                    )));
                }
                if tr.state.dim() != d || tr.next_state.dim() != d {
                    return Err(Error::Shape(format!("agent {n}, t={t}: state dimension")));
                }
                self.env.check_action(tr.action)?;
            }
        }
        Ok(())
    }
}

/// Draw `n` agents: `injected` first (verbatim), the rest uniform over the
/// environment's covariate ranges.
pub fn sample_agents<R: Rng + ?Sized>(
    env: EnvKind,
    n: usize,
    injected: &[AgentParams],
    rng: &mut R,
) -> Result<Vec<AgentParams>> {
    if n == 0 {
        return Err(Error::Config("need at least one agent".into()));
    }
    if injected.len() > n {
        return Err(Error::Config(format!(
            "{} injected agents exceed the table size {n}",
            injected.len()
        )));
    }
    if let Some(bad) = injected.iter().find(|p| p.env() != env) {
        return Err(Error::EnvMismatch {
            expected: env.to_string(),
            found: bad.env().to_string(),
        });
    }
    let mut table = injected.to_vec();
    while table.len() < n {
        table.push(match env {
            EnvKind::MountainCar => AgentParams::MountainCar {
                gravity: rng.gen_range(envs::MC_GRAVITY_RANGE.0..=envs::MC_GRAVITY_RANGE.1),
            },
            EnvKind::CartPole => AgentParams::CartPole {
                force: rng.gen_range(envs::CP_FORCE_RANGE.0..=envs::CP_FORCE_RANGE.1),
                length: rng.gen_range(envs::CP_LENGTH_RANGE.0..=envs::CP_LENGTH_RANGE.1),
            },
        });
    }
    Ok(table)
}

/// Behavior controller standing in for a trained logging policy.
///
/// MountainCar pumps energy (accelerate along the velocity); CartPole pushes
/// toward the side the pole is falling to.
pub fn scripted_policy(env: EnvKind, s: &State) -> Action {
    match env {
        EnvKind::MountainCar => {
            if s[1] >= 0.0 {
                Action(2)
            } else {
                Action(0)
            }
        }
        EnvKind::CartPole => {
            if s[2] + 0.5 * s[3] > 0.0 {
                Action(0)
            } else {
                Action(1)
            }
        }
    }
}

fn behavior_action<R: Rng + ?Sized>(env: EnvKind, regime: PolicyRegime, s: &State, rng: &mut R) -> Action {
    let uniform = |rng: &mut R| Action(rng.gen_range(0..env.action_count()));
    match regime {
        PolicyRegime::Pure => scripted_policy(env, s),
        PolicyRegime::Random => uniform(rng),
        PolicyRegime::PureEps(eps) => {
            if rng.gen::<f64>() < eps {
                uniform(rng)
            } else {
                scripted_policy(env, s)
            }
        }
    }
}

/// Roll one episode for agent `n` with its own derived random stream.
pub fn rollout_agent(n: usize, params: &AgentParams, regime: PolicyRegime, seed: u64) -> Result<Vec<Transition>> {
    let env = params.env();
    let mut rng = rng::stream(seed, "episode", n as u64);
    let mut s = envs::reset(env, &mut rng);
    let mut traj = Vec::new();
    for t in 0..env.max_steps() {
        let k = behavior_action(env, regime, &s, &mut rng);
        let res = envs::step(params, s, k, t)?;
        traj.push(Transition {
            agent: n,
            step: t,
            state: s,
            action: k,
            reward: res.reward,
            next_state: res.next_state,
            done: res.done,
        });
        if res.done {
            break;
        }
        s = res.next_state;
    }
    Ok(traj)
}

/// One episode per agent under `regime`. Agents are simulated in parallel
/// from independent derived streams; the result does not depend on thread
/// count.
pub fn generate_dataset(agents: &[AgentParams], regime: PolicyRegime, seed: u64) -> Result<OfflineDataset> {
    let env = agents
        .first()
        .ok_or_else(|| Error::Config("need at least one agent".into()))?
        .env();
    regime.validate()?;
    let trajectories = agents
        .par_iter()
        .enumerate()
        .map(|(n, p)| {
            if p.env() != env {
                return Err(Error::EnvMismatch {
                    expected: env.to_string(),
                    found: p.env().to_string(),
                });
            }
            rollout_agent(n, p, regime, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OfflineDataset {
        env,
        agents: agents.to_vec(),
        trajectories,
        regime,
        seed,
        behavior_policy: BEHAVIOR_SCRIPTED.to_string(),
        generator_version: crate::VERSION.to_string(),
    })
}

/// Sample `n` agents (`injected` first) from the stream `agents` of `seed`
/// and record one trajectory for each.
pub fn generate_population(
    env: EnvKind,
    n: usize,
    injected: &[AgentParams],
    regime: PolicyRegime,
    seed: u64,
) -> Result<OfflineDataset> {
    let agents = sample_agents(env, n, injected, &mut rng::stream(seed, "agents", 0))?;
    generate_dataset(&agents, regime, seed)
}

/// MountainCar data generated by the exact rank-3 model (no clamping) under
/// uniform random actions, `steps` transitions per agent.
pub fn generate_prop1_dataset(gravities: &[f64], steps: usize, seed: u64) -> Result<OfflineDataset> {
    if gravities.is_empty() || steps == 0 || steps > EnvKind::MountainCar.max_steps() {
        return Err(Error::Config("need agents and 1..=500 steps".into()));
    }
    let env = EnvKind::MountainCar;
    let trajectories = gravities
        .iter()
        .enumerate()
        .map(|(n, &gravity)| {
            let model = Prop1Model { gravity };
            let mut rng = rng::stream(seed, "prop1-episode", n as u64);
            let mut s = envs::reset(env, &mut rng);
            let mut traj = Vec::with_capacity(steps);
            for t in 0..steps {
                let k = Action(rng.gen_range(0..3));
                let next = model.predict(&s, (k.0 as f64 - 1.0) * envs::MC_FORCE);
                traj.push(Transition {
                    agent: n,
                    step: t,
                    state: s,
                    action: k,
                    reward: envs::reward_fn(env, &s, k, &next),
                    next_state: next,
                    done: t + 1 == steps,
                });
                s = next;
            }
            traj
        })
        .collect();
    Ok(OfflineDataset {
        env,
        agents: gravities
            .iter()
            .map(|&gravity| AgentParams::MountainCar { gravity })
            .collect(),
        trajectories,
        regime: PolicyRegime::Random,
        seed,
        behavior_policy: BEHAVIOR_PROP1.to_string(),
        generator_version: crate::VERSION.to_string(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    env: EnvKind,
    n_agents: usize,
    regime: String,
    eps: Option<f64>,
    seed: u64,
    agents: Vec<AgentParams>,
    n_records: usize,
    behavior_policy: String,
    generator_version: String,
}

pub fn save_dataset(ds: &OfflineDataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let header = Header {
        format_version: DATASET_FORMAT_VERSION,
        env: ds.env,
        n_agents: ds.n_agents(),
        regime: ds.regime.tag().to_string(),
        eps: ds.regime.eps(),
        seed: ds.seed,
        agents: ds.agents.clone(),
        n_records: ds.len(),
        behavior_policy: ds.behavior_policy.clone(),
        generator_version: ds.generator_version.clone(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(io)?;
    for tr in ds.transitions() {
        serde_json::to_writer(&mut out, tr)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: header.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    if header.n_agents != header.agents.len() {
        return Err(parse_err(1, "n_agents disagrees with the agent table".into()));
    }
    let regime = PolicyRegime::from_parts(&header.regime, header.eps).map_err(|e| parse_err(1, e.to_string()))?;

    let mut trajectories: Vec<Vec<Transition>> = vec![Vec::new(); header.n_agents];
    let mut count = 0;
    let mut last_agent = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let tr: Transition = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if tr.agent >= header.n_agents || tr.agent < last_agent {
            return Err(parse_err(lineno, format!("unexpected agent index {}", tr.agent)));
        }
        last_agent = tr.agent;
        trajectories[tr.agent].push(tr);
        count += 1;
    }
    if count != header.n_records {
        return Err(parse_err(
            count + 2,
            format!("expected {} records, found {count} (truncated?)", header.n_records),
        ));
    }
    let ds = OfflineDataset {
        env: header.env,
        agents: header.agents,
        trajectories,
        regime,
        seed: header.seed,
        behavior_policy: header.behavior_policy,
        generator_version: header.generator_version,
    };
    ds.validate()?;
    Ok(ds)
}
