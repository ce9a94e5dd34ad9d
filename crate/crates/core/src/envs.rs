//! Parameterized MountainCar and CartPole.
//!
//! Each agent carries its own physical covariates ([`AgentParams`]); all
//! other constants are the classic-control defaults. Every function here is
//! pure, so agents can be simulated from any number of threads.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest state dimension across supported environments.
pub const MAX_STATE_DIM: usize = 4;

pub const MC_FORCE: f64 = 0.001;
pub const MC_MIN_POSITION: f64 = -1.2;
pub const MC_MAX_POSITION: f64 = 0.6;
pub const MC_MAX_SPEED: f64 = 0.07;
pub const MC_GOAL_POSITION: f64 = 0.5;
pub const MC_GRAVITY_RANGE: (f64, f64) = (0.0001, 0.0035);

pub const CP_CART_MASS: f64 = 1.0;
pub const CP_POLE_MASS: f64 = 0.1;
pub const CP_GRAVITY: f64 = 9.8;
pub const CP_TAU: f64 = 0.02;
pub const CP_THETA_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
pub const CP_X_LIMIT: f64 = 2.4;
pub const CP_FORCE_RANGE: (f64, f64) = (2.0, 18.0);
pub const CP_LENGTH_RANGE: (f64, f64) = (0.15, 0.85);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    MountainCar,
    CartPole,
}

impl EnvKind {
    pub fn state_dim(self) -> usize {
        match self {
            EnvKind::MountainCar => 2,
            EnvKind::CartPole => 4,
        }
    }

    pub fn action_count(self) -> usize {
        match self {
            EnvKind::MountainCar => 3,
            EnvKind::CartPole => 2,
        }
    }

    /// Episode step cap.
    pub fn max_steps(self) -> usize {
        match self {
            EnvKind::MountainCar => 500,
            EnvKind::CartPole => 200,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::MountainCar => "mountaincar",
            EnvKind::CartPole => "cartpole",
        }
    }

    /// Number of physical covariates per agent.
    pub fn covariate_dim(self) -> usize {
        match self {
            EnvKind::MountainCar => 1,
            EnvKind::CartPole => 2,
        }
    }

    pub fn covariate_names(self) -> &'static [&'static str] {
        match self {
            EnvKind::MountainCar => &["gravity"],
            EnvKind::CartPole => &["force", "length"],
        }
    }

    pub fn default_params(self) -> AgentParams {
        match self {
            EnvKind::MountainCar => AgentParams::MountainCar { gravity: 0.0025 },
            EnvKind::CartPole => AgentParams::CartPole {
                force: 10.0,
                length: 0.5,
            },
        }
    }

    /// The designated test agents of each environment.
    pub fn test_agents(self) -> Vec<AgentParams> {
        match self {
            EnvKind::MountainCar => [0.0001, 0.0005, 0.001, 0.0025, 0.0035]
                .into_iter()
                .map(|gravity| AgentParams::MountainCar { gravity })
                .collect(),
            EnvKind::CartPole => [(2.0, 0.5), (10.0, 0.5), (18.0, 0.5), (10.0, 0.85), (10.0, 0.15)]
                .into_iter()
                .map(|(force, length)| AgentParams::CartPole { force, length })
                .collect(),
        }
    }

    /// Validate a discrete action index for this environment.
    pub fn check_action(self, k: Action) -> Result<()> {
        if k.0 < self.action_count() {
            Ok(())
        } else {
            Err(Error::InvalidAction {
                env: self.name(),
                index: k.0,
                count: self.action_count(),
            })
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "mountaincar" | "mc" => Ok(EnvKind::MountainCar),
            "cartpole" | "cp" => Ok(EnvKind::CartPole),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }
}

/// Per-agent physical covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AgentParams {
    /// Per-step gravity coefficient.
    MountainCar { gravity: f64 },
    /// Push force (N) and pole half-length (m).
    CartPole { force: f64, length: f64 },
}

impl AgentParams {
    pub fn env(&self) -> EnvKind {
        match self {
            AgentParams::MountainCar { .. } => EnvKind::MountainCar,
            AgentParams::CartPole { .. } => EnvKind::CartPole,
        }
    }

    pub fn covariates(&self) -> Vec<f64> {
        match *self {
            AgentParams::MountainCar { gravity } => vec![gravity],
            AgentParams::CartPole { force, length } => vec![force, length],
        }
    }

    pub fn from_covariates(env: EnvKind, cov: &[f64]) -> Result<Self> {
        if cov.len() != env.covariate_dim() {
            return Err(Error::Shape(format!(
                "{env} agents take {} covariates, got {}",
                env.covariate_dim(),
                cov.len()
            )));
        }
        Ok(match env {
            EnvKind::MountainCar => AgentParams::MountainCar { gravity: cov[0] },
            EnvKind::CartPole => AgentParams::CartPole {
                force: cov[0],
                length: cov[1],
            },
        })
    }

    /// Parse `0.0025` (MountainCar) or `10:0.5` (CartPole force:length).
    pub fn parse(env: EnvKind, text: &str) -> Result<Self> {
        let cov = text
            .split(':')
            .map(|part| {
                part.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad agent covariate `{part}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_covariates(env, &cov)
    }

    /// True if every covariate lies in the environment's declared range.
    pub fn in_range(&self) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| v.is_finite() && v >= lo && v <= hi;
        match *self {
            AgentParams::MountainCar { gravity } => within(gravity, MC_GRAVITY_RANGE),
            AgentParams::CartPole { force, length } => {
                within(force, CP_FORCE_RANGE) && within(length, CP_LENGTH_RANGE)
            }
        }
    }

    pub fn same_as(&self, other: &AgentParams) -> bool {
        let (a, b) = (self.covariates(), other.covariates());
        self.env() == other.env() && a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12)
    }
}

impl fmt::Display for AgentParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentParams::MountainCar { gravity } => write!(f, "{gravity}"),
            AgentParams::CartPole { force, length } => write!(f, "{force}/{length}"),
        }
    }
}

/// Discrete action index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub usize);

/// Fixed-capacity state vector; `dim` is 2 for MountainCar, 4 for CartPole.
#[derive(Clone, Copy, PartialEq)]
pub struct State {
    vals: [f64; MAX_STATE_DIM],
    dim: usize,
}

impl State {
    pub fn from_slice(vals: &[f64]) -> Self {
        assert!(
            !vals.is_empty() && vals.len() <= MAX_STATE_DIM,
            "state dimension {} not supported",
            vals.len()
        );
        let mut out = [0.0; MAX_STATE_DIM];
        out[..vals.len()].copy_from_slice(vals);
        State {
            vals: out,
            dim: vals.len(),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::from_slice(&[0.0; MAX_STATE_DIM][..dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vals[..self.dim]
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.vals[..self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.as_slice()).finish()
    }
}

impl Index<usize> for State {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.as_slice()[i]
    }
}

impl IndexMut<usize> for State {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.as_mut_slice()[i]
    }
}

impl Serialize for State {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.as_slice().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for State {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let vals = Vec::<f64>::deserialize(deserializer)?;
        if vals.is_empty() || vals.len() > MAX_STATE_DIM {
            return Err(serde::de::Error::custom(format!(
                "state of dimension {} not supported",
                vals.len()
            )));
        }
        Ok(State::from_slice(&vals))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next_state: State,
    pub reward: f64,
    pub done: bool,
}

/// Unclamped MountainCar transition for gravity `g` and continuous
/// acceleration `a`.
pub fn mc_closed_form(s: State, a: f64, g: f64) -> State {
    let (x, v) = (s[0], s[1]);
    let pull = g * (3.0 * x).cos();
    State::from_slice(&[x + v - pull / 2.0 + a / 2.0, v - pull + a])
}

/// Continuous force applied by discrete action `k`.
pub fn action_to_force(params: &AgentParams, k: Action) -> Result<f64> {
    params.env().check_action(k)?;
    Ok(match *params {
        AgentParams::MountainCar { .. } => (k.0 as f64 - 1.0) * MC_FORCE,
        AgentParams::CartPole { force, .. } => {
            if k.0 == 0 {
                force
            } else {
                -force
            }
        }
    })
}

fn cartpole_euler(s: State, force: f64, length: f64) -> State {
    let (x, x_dot, theta, theta_dot) = (s[0], s[1], s[2], s[3]);
    let total_mass = CP_CART_MASS + CP_POLE_MASS;
    let pole_mass_length = CP_POLE_MASS * length;
    let (sin, cos) = theta.sin_cos();
    let temp = (force + pole_mass_length * theta_dot * theta_dot * sin) / total_mass;
    let theta_acc = (CP_GRAVITY * sin - cos * temp)
        / (length * (4.0 / 3.0 - CP_POLE_MASS * cos * cos / total_mass));
    let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;
    State::from_slice(&[
        x + CP_TAU * x_dot,
        x_dot + CP_TAU * x_acc,
        theta + CP_TAU * theta_dot,
        theta_dot + CP_TAU * theta_acc,
    ])
}

/// One step of the physical dynamics, with MountainCar clamping but without
/// reward or termination bookkeeping.
pub fn dynamics(params: &AgentParams, s: State, k: Action) -> Result<State> {
    let force = action_to_force(params, k)?;
    Ok(match *params {
        AgentParams::MountainCar { gravity } => {
            let mut next = mc_closed_form(s, force, gravity);
            next[0] = next[0].clamp(MC_MIN_POSITION, MC_MAX_POSITION);
            next[1] = next[1].clamp(-MC_MAX_SPEED, MC_MAX_SPEED);
            if next[0] == MC_MIN_POSITION && next[1] < 0.0 {
                next[1] = 0.0;
            }
            next
        }
        AgentParams::CartPole { length, .. } => cartpole_euler(s, force, length),
    })
}

/// True when the state lies outside the CartPole survival region, or at the
/// MountainCar goal.
pub fn is_terminal(env: EnvKind, s: &State) -> bool {
    match env {
        EnvKind::MountainCar => s[0] >= MC_GOAL_POSITION,
        EnvKind::CartPole => s[2].abs() > CP_THETA_LIMIT || s[0].abs() > CP_X_LIMIT,
    }
}

/// Reward for the transition `(s, k, s')`.
pub fn reward_fn(env: EnvKind, _s: &State, _k: Action, next: &State) -> f64 {
    match env {
        EnvKind::MountainCar => {
            if next[0] >= MC_GOAL_POSITION {
                1.0
            } else {
                -1.0
            }
        }
        EnvKind::CartPole => {
            if is_terminal(env, next) {
                0.0
            } else {
                1.0
            }
        }
    }
}

/// Advance a live episode by one step. `t` is the number of steps already
/// taken in the episode.
pub fn step(params: &AgentParams, s: State, k: Action, t: usize) -> Result<StepResult> {
    let env = params.env();
    if s.dim() != env.state_dim() {
        return Err(Error::Shape(format!(
            "{env} state has dimension {}, got {}",
            env.state_dim(),
            s.dim()
        )));
    }
    // A MountainCar start past the goal is legal; it simply ends on the next step.
    if t >= env.max_steps() || (env == EnvKind::CartPole && is_terminal(env, &s)) {
        return Err(Error::TerminalState { t });
    }
    let next_state = dynamics(params, s, k)?;
    let reward = reward_fn(env, &s, k, &next_state);
    let done = is_terminal(env, &next_state) || t + 1 >= env.max_steps();
    Ok(StepResult {
        next_state,
        reward,
        done,
    })
}

/// Sample an initial state.
pub fn reset<R: Rng + ?Sized>(env: EnvKind, rng: &mut R) -> State {
    match env {
        EnvKind::MountainCar => State::from_slice(&[rng.gen_range(-0.6..=-0.4), 0.0]),
        EnvKind::CartPole => {
            let mut s = State::zeros(4);
            for v in s.as_mut_slice() {
                *v = rng.gen_range(-0.05..=0.05);
            }
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;

    const MC: AgentParams = AgentParams::MountainCar { gravity: 0.0025 };
    const CP: AgentParams = AgentParams::CartPole {
        force: 10.0,
        length: 0.5,
    };

    #[test]
    fn closed_form_at_origin() {
        let s = State::from_slice(&[0.0, 0.0]);
        let next = mc_closed_form(s, 0.0, 0.0025);
        assert_abs_diff_eq!(next[0], -0.00125, epsilon = 1e-18);
        assert_abs_diff_eq!(next[1], -0.0025, epsilon = 1e-18);
        let next = mc_closed_form(s, 0.001, 0.0025);
        assert_abs_diff_eq!(next[0], -0.00075, epsilon = 1e-18);
        assert_abs_diff_eq!(next[1], -0.0015, epsilon = 1e-18);
    }

    #[test]
    fn closed_form_off_origin() {
        // cos(-1.5) = 0.0707372016677029...
        let next = mc_closed_form(State::from_slice(&[-0.5, 0.01]), 0.001, 0.001);
        let pull = 0.001 * 0.070_737_201_667_702_9;
        assert_abs_diff_eq!(next[0], -0.5 + 0.01 - pull / 2.0 + 0.0005, epsilon = 1e-15);
        assert_abs_diff_eq!(next[1], 0.01 - pull + 0.001, epsilon = 1e-15);
        assert_abs_diff_eq!(next[0], -0.489_535_4, epsilon = 1e-7);
        assert_abs_diff_eq!(next[1], 0.010_929_3, epsilon = 1e-7);
    }

    #[test]
    fn force_mapping() {
        assert_eq!(action_to_force(&MC, Action(1)).unwrap(), 0.0);
        assert_eq!(action_to_force(&MC, Action(2)).unwrap(), 0.001);
        assert_eq!(action_to_force(&MC, Action(0)).unwrap(), -0.001);
        assert_eq!(action_to_force(&CP, Action(0)).unwrap(), 10.0);
        assert_eq!(action_to_force(&CP, Action(1)).unwrap(), -10.0);
        assert!(matches!(
            action_to_force(&CP, Action(2)),
            Err(Error::InvalidAction { .. })
        ));
        assert!(action_to_force(&MC, Action(3)).is_err());
    }

    #[test]
    fn mountaincar_goal_step() {
        let res = step(&MC, State::from_slice(&[0.55, 0.0]), Action(1), 0).unwrap();
        assert!(res.done);
        assert_eq!(res.reward, 1.0);
    }

    #[test]
    fn cartpole_first_push() {
        let res = step(&CP, State::zeros(4), Action(0), 0).unwrap();
        let s = res.next_state;
        assert_abs_diff_eq!(s[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], 0.195_122, epsilon = 1e-6);
        assert_abs_diff_eq!(s[2], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[3], -0.292_683, epsilon = 1e-6);
        assert_eq!(res.reward, 1.0);
        assert!(!res.done);
    }

    #[test]
    fn cartpole_rejects_fallen_pole() {
        let s = State::from_slice(&[0.0, 0.0, 0.25, 0.0]);
        assert!(matches!(step(&CP, s, Action(0), 0), Err(Error::TerminalState { .. })));
        assert!(matches!(
            step(&CP, State::zeros(4), Action(0), 200),
            Err(Error::TerminalState { .. })
        ));
    }

    #[test]
    fn step_cap_ends_episode() {
        let res = step(&MC, State::from_slice(&[-0.5, 0.0]), Action(1), 499).unwrap();
        assert!(res.done);
        assert_eq!(res.reward, -1.0);
    }

    #[test]
    fn left_wall_zeroes_velocity() {
        let res = step(&MC, State::from_slice(&[-1.19, -0.05]), Action(0), 0).unwrap();
        assert_eq!(res.next_state[0], MC_MIN_POSITION);
        assert_eq!(res.next_state[1], 0.0);
    }

    #[test]
    fn unclamped_step_matches_closed_form_bitwise() {
        let mut r = rng::from_seed(11);
        for _ in 0..1000 {
            let s = State::from_slice(&[r.gen_range(-0.9..0.4), r.gen_range(-0.05..0.05)]);
            let g = r.gen_range(MC_GRAVITY_RANGE.0..MC_GRAVITY_RANGE.1);
            let k = Action(r.gen_range(0..3));
            let p = AgentParams::MountainCar { gravity: g };
            let next = step(&p, s, k, 0).unwrap().next_state;
            let closed = mc_closed_form(s, (k.0 as f64 - 1.0) * MC_FORCE, g);
            assert_eq!(next.as_slice(), closed.as_slice());
        }
    }

    #[test]
    fn reward_values() {
        let s = State::from_slice(&[0.0, 0.0]);
        let at = |x: f64| State::from_slice(&[x, 0.0]);
        assert_eq!(reward_fn(EnvKind::MountainCar, &s, Action(1), &at(0.5)), 1.0);
        assert_eq!(reward_fn(EnvKind::MountainCar, &s, Action(1), &at(0.49)), -1.0);
        let near = State::from_slice(&[0.0, 0.0, 0.20, 0.0]);
        assert_eq!(reward_fn(EnvKind::CartPole, &near, Action(0), &near), 1.0);
        let fallen = State::from_slice(&[0.0, 0.0, 0.21, 0.0]);
        assert_eq!(reward_fn(EnvKind::CartPole, &near, Action(0), &fallen), 0.0);
    }

    #[test]
    fn reset_ranges_and_determinism() {
        let a = reset(EnvKind::CartPole, &mut rng::from_seed(3));
        let b = reset(EnvKind::CartPole, &mut rng::from_seed(3));
        assert_eq!(a, b);
        let mut r = rng::from_seed(4);
        for _ in 0..10_000 {
            let s = reset(EnvKind::MountainCar, &mut r);
            assert!((-0.6..=-0.4).contains(&s[0]));
            assert_eq!(s[1], 0.0);
            let s = reset(EnvKind::CartPole, &mut r);
            assert!(s.as_slice().iter().all(|v| v.abs() <= 0.05));
        }
    }

    #[test]
    fn params_parse_and_range() {
        let p = AgentParams::parse(EnvKind::CartPole, "10:0.5").unwrap();
        assert_eq!(p, CP);
        assert!(p.in_range());
        assert!(AgentParams::parse(EnvKind::MountainCar, "1:2").is_err());
        assert!(!AgentParams::MountainCar { gravity: 0.01 }.in_range());
        let json = serde_json::to_string(&CP).unwrap();
        assert_eq!(serde_json::from_str::<AgentParams>(&json).unwrap(), CP);
    }
}
