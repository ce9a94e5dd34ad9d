//! Long-horizon prediction error, episodic reward, latent-factor export and
//! the covariate-to-factor map used for unseen agents.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{self, Action, AgentParams, EnvKind, State};
use crate::error::{Error, Result};
use crate::factor_model::{FactorizedModel, Scratch};
use crate::nn::{Adam, AdamConfig, Grads, Mlp, Parameterized};
use crate::planner::{run_episode, DynamicsOracle, MpcConfig};
use crate::rng;
use crate::training::Ensemble;

pub const DEFAULT_HORIZON: usize = 50;
pub const DEFAULT_TRIALS: usize = 200;

/// Policy generating the action sequences of prediction trials. The
/// scripted controllers use different gains from the data-generation
/// controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestPolicy {
    Scripted,
    Random,
}

impl fmt::Display for TestPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestPolicy::Scripted => "scripted",
            TestPolicy::Random => "random",
        })
    }
}

impl FromStr for TestPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scripted" => Ok(TestPolicy::Scripted),
            "random" => Ok(TestPolicy::Random),
            _ => Err(Error::Config(format!("unknown test policy {s:?} (scripted|random)"))),
        }
    }
}

/// MountainCar: push with the velocity outside a 0.005 deadband, otherwise
/// push away from the valley floor. CartPole: push toward θ + 0.25·θ̇.
pub fn test_policy_action<R: Rng + ?Sized>(policy: TestPolicy, env: EnvKind, s: &State, rng: &mut R) -> Action {
    match (policy, env) {
        (TestPolicy::Random, _) => Action(rng.gen_range(0..env.action_count())),
        (TestPolicy::Scripted, EnvKind::MountainCar) => {
            let (x, v) = (s[0], s[1]);
            if v > 0.005 {
                Action(2)
            } else if v < -0.005 {
                Action(0)
            } else if x > -0.5 {
                Action(0)
            } else {
                Action(2)
            }
        }
        (TestPolicy::Scripted, EnvKind::CartPole) => {
            if s[2] + 0.25 * s[3] > 0.0 {
                Action(0)
            } else {
                Action(1)
            }
        }
    }
}

/// A reset state and the actions the test policy takes from it in the real
/// environment, truncated at termination.
pub fn test_trial<R: Rng + ?Sized>(
    policy: TestPolicy,
    params: &AgentParams,
    horizon: usize,
    rng: &mut R,
) -> Result<(State, Vec<Action>)> {
    let env = params.env();
    let s0 = envs::reset(env, rng);
    let mut s = s0;
    let mut actions = Vec::with_capacity(horizon);
    for t in 0..horizon.min(env.max_steps()) {
        let k = test_policy_action(policy, env, &s, rng);
        actions.push(k);
        let res = envs::step(params, s, k, t)?;
        if res.done {
            break;
        }
        s = res.next_state;
    }
    Ok((s0, actions))
}

/// Pooled RMSE and R² of `pred` against `truth`. The R² baseline is the
/// per-dimension mean of `truth`; a constant true trajectory gives R² = 1
/// for an exact prediction and `-inf` otherwise.
pub fn rmse_r2(truth: &[State], pred: &[State]) -> Result<(f64, f64)> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Shape(format!(
            "{} true states vs {} predicted",
            truth.len(),
            pred.len()
        )));
    }
    let dim = truth[0].dim();
    if truth.iter().chain(pred).any(|s| s.dim() != dim) {
        return Err(Error::Shape("state dimensions differ".into()));
    }
    let n = truth.len() as f64;
    let mut sse = 0.0;
    let mut sst = 0.0;
    for d in 0..dim {
        let mean = truth.iter().map(|s| s[d]).sum::<f64>() / n;
        for (y, p) in truth.iter().zip(pred) {
            sse += (y[d] - p[d]).powi(2);
            sst += (y[d] - mean).powi(2);
        }
    }
    let rmse = (sse / (n * dim as f64)).sqrt();
    let r2 = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    let r2 = if r2.is_nan() { f64::NEG_INFINITY } else { r2 };
    Ok((rmse, r2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutScore {
    pub rmse: f64,
    pub r2: f64,
    /// Compared steps; fewer than requested when the real episode ends early.
    pub steps: usize,
}

/// Roll the real environment and the oracle forward from `s0` under the
/// same actions and compare the visited states `s_1..s_T`.
pub fn rollout_rmse_r2(
    oracle: &DynamicsOracle<'_>,
    params: &AgentParams,
    s0: &State,
    actions: &[Action],
) -> Result<RolloutScore> {
    if s0.dim() != params.env().state_dim() || oracle.env() != params.env() {
        return Err(Error::Shape("oracle, agent and state disagree on the environment".into()));
    }
    let mut scratch = Scratch::default();
    let (mut s, mut s_hat) = (*s0, *s0);
    let mut truth = Vec::with_capacity(actions.len());
    let mut pred = Vec::with_capacity(actions.len());
    for (t, &k) in actions.iter().enumerate() {
        let res = envs::step(params, s, k, t)?;
        s_hat = oracle.mean_next(&s_hat, k, &mut scratch)?;
        truth.push(res.next_state);
        pred.push(s_hat);
        s = res.next_state;
        if res.done {
            break;
        }
    }
    let (rmse, r2) = rmse_r2(&truth, &pred)?;
    let rmse = if rmse.is_nan() { f64::INFINITY } else { rmse };
    Ok(RolloutScore {
        rmse,
        r2,
        steps: truth.len(),
    })
}

/// Median with the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionConfig {
    pub trials: usize,
    pub horizon: usize,
    pub policy: TestPolicy,
    pub seed: u64,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            trials: DEFAULT_TRIALS,
            horizon: DEFAULT_HORIZON,
            policy: TestPolicy::Scripted,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub agent: AgentParams,
    pub trials: usize,
    pub mean_rmse: f64,
    pub median_rmse: f64,
    pub median_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub env: EnvKind,
    pub policy: TestPolicy,
    pub horizon: usize,
    pub rows: Vec<PredictionRow>,
}

/// Trial `i` uses the same reset state and test-policy randomness for every
/// agent.
pub fn eval_prediction(targets: &[(AgentParams, DynamicsOracle<'_>)], cfg: &PredictionConfig) -> Result<PredictionReport> {
    if cfg.trials == 0 || cfg.horizon == 0 {
        return Err(Error::Config("trials and horizon must be at least 1".into()));
    }
    let env = targets
        .first()
        .map(|(p, _)| p.env())
        .ok_or_else(|| Error::Config("no test agents".into()))?;
    let mut rows = Vec::with_capacity(targets.len());
    for (params, oracle) in targets {
        if params.env() != env {
            return Err(Error::Config("test agents from different environments".into()));
        }
        let scores = (0..cfg.trials)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(cfg.seed, "prediction-trial", i as u64);
                let (s0, actions) = test_trial(cfg.policy, params, cfg.horizon, &mut r)?;
                rollout_rmse_r2(oracle, params, &s0, &actions)
            })
            .collect::<Result<Vec<_>>>()?;
        let rmse: Vec<f64> = scores.iter().map(|s| s.rmse).collect();
        let r2: Vec<f64> = scores.iter().map(|s| s.r2).collect();
        rows.push(PredictionRow {
            agent: *params,
            trials: cfg.trials,
            mean_rmse: rmse.iter().sum::<f64>() / rmse.len() as f64,
            median_rmse: median(&rmse),
            median_r2: median(&r2),
        });
    }
    Ok(PredictionReport {
        env,
        policy: cfg.policy,
        horizon: cfg.horizon,
        rows,
    })
}

/// Look up each agent in the ensemble's agent table.
pub fn ensemble_oracles<'a>(ens: &'a Ensemble, agents: &[AgentParams]) -> Result<Vec<(AgentParams, DynamicsOracle<'a>)>> {
    agents
        .iter()
        .map(|p| {
            let n = ens
                .agent_index(p)
                .ok_or_else(|| Error::Config(format!("agent {p} is not in the model's agent table")))?;
            Ok((*p, DynamicsOracle::learned(ens, n)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub mpc: MpcConfig,
    pub episodes: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            mpc: MpcConfig::default(),
            episodes: 20,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub agent: AgentParams,
    /// Mean over repetitions of the per-repetition average reward.
    pub mean: f64,
    /// Population standard deviation of the per-repetition averages.
    pub std: f64,
    /// Repetition-major.
    pub episode_rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub env: EnvKind,
    pub episodes: usize,
    pub repeats: usize,
    pub mpc: MpcConfig,
    pub rows: Vec<RewardRow>,
}

pub fn eval_reward(targets: &[(AgentParams, DynamicsOracle<'_>)], cfg: &RewardConfig) -> Result<RewardReport> {
    if cfg.episodes == 0 || cfg.repeats == 0 {
        return Err(Error::Config("episodes and repeats must be at least 1".into()));
    }
    cfg.mpc.validate()?;
    let env = targets
        .first()
        .map(|(p, _)| p.env())
        .ok_or_else(|| Error::Config("no agents".into()))?;
    let mut rows = Vec::with_capacity(targets.len());
    for (params, oracle) in targets {
        let mut rewards = Vec::with_capacity(cfg.episodes * cfg.repeats);
        for i in 0..cfg.episodes * cfg.repeats {
            let mut r = rng::stream(cfg.seed, "reward-episode", i as u64);
            rewards.push(run_episode(params, oracle, &cfg.mpc, &mut r)?.total_reward);
        }
        let means: Vec<f64> = rewards
            .chunks(cfg.episodes)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / means.len() as f64;
        rows.push(RewardRow {
            agent: *params,
            mean,
            std: var.sqrt(),
            episode_rewards: rewards,
        });
    }
    Ok(RewardReport {
        env,
        episodes: cfg.episodes,
        repeats: cfg.repeats,
        mpc: cfg.mpc,
        rows,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let msg = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        _ => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg,
        },
    }
}

/// Several prediction reports (for example one per test policy) in one CSV.
pub fn write_prediction_csv(reports: &[&PredictionReport], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "env",
        "agent",
        "test_policy",
        "horizon",
        "trials",
        "mean_rmse",
        "median_rmse",
        "median_r2",
    ])
    .map_err(|e| csv_err(path, e))?;
    for report in reports {
        for r in &report.rows {
            w.write_record([
                report.env.to_string(),
                r.agent.to_string(),
                report.policy.to_string(),
                report.horizon.to_string(),
                r.trials.to_string(),
                r.mean_rmse.to_string(),
                r.median_rmse.to_string(),
                r.median_r2.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl PredictionReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_prediction_csv(&[self], path)
    }
}

impl fmt::Display for PredictionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} prediction, {}-step rollouts, test policy {}",
            self.env, self.horizon, self.policy
        )?;
        writeln!(f, "{:<12} {:>7} {:>10} {:>10}", "agent", "trials", "RMSE", "(R2)")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<12} {:>7} {:>10.4} {:>10}",
                r.agent.to_string(),
                r.trials,
                r.mean_rmse,
                format!("({:.2})", r.median_r2)
            )?;
        }
        Ok(())
    }
}

impl RewardReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["env", "agent", "episodes", "repeats", "horizon", "candidates", "mean", "std"])
            .map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.write_record([
                self.env.to_string(),
                r.agent.to_string(),
                self.episodes.to_string(),
                self.repeats.to_string(),
                self.mpc.horizon.to_string(),
                self.mpc.candidates.to_string(),
                r.mean.to_string(),
                r.std.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for RewardReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} reward, {} episodes x {} repeats, h={} C={}",
            self.env, self.episodes, self.repeats, self.mpc.horizon, self.mpc.candidates
        )?;
        writeln!(f, "{:<12} {:>18}", "agent", "reward")?;
        for r in &self.rows {
            writeln!(f, "{:<12} {:>18}", r.agent.to_string(), format!("{:.1} ± {:.1}", r.mean, r.std))?;
        }
        Ok(())
    }
}

/// One row per agent: `agent, <covariates>, u0..u{r-1}`.
pub fn export_factors(model: &FactorizedModel, agents: &[AgentParams], path: &Path) -> Result<()> {
    if agents.len() != model.n_agents() {
        return Err(Error::Shape(format!(
            "{} covariate rows for {} agents",
            agents.len(),
            model.n_agents()
        )));
    }
    let mut w = csv_writer(path)?;
    let mut header = vec!["agent".to_string()];
    header.extend(model.env.covariate_names().iter().map(|s| s.to_string()));
    header.extend((0..model.rank).map(|l| format!("u{l}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (n, p) in agents.iter().enumerate() {
        let mut row = vec![n.to_string()];
        row.extend(p.covariates().iter().map(f64::to_string));
        row.extend(model.agent_factor(n)?.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorTable {
    pub header: Vec<String>,
    pub covariates: Vec<Vec<f64>>,
    pub factors: Vec<Vec<f64>>,
}

pub fn read_factors(path: &Path, env: EnvKind) -> Result<FactorTable> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let c = env.covariate_dim();
    let mut table = FactorTable {
        header,
        covariates: Vec::new(),
        factors: Vec::new(),
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let vals = rec
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: e.to_string(),
            })?;
        if vals.len() <= 1 + c {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: "too few columns".into(),
            });
        }
        table.covariates.push(vals[1..1 + c].to_vec());
        table.factors.push(vals[1 + c..].to_vec());
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// `N x dims` projections.
    pub coords: Vec<Vec<f64>>,
    /// `dims` unit loading vectors.
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
}

/// Project centred rows onto the top `dims` eigenvectors of their
/// covariance. Each component's first non-negligible loading is positive.
pub fn pca_project(rows: &[Vec<f64>], dims: usize) -> Result<Pca> {
    let n = rows.len();
    let r = rows.first().map_or(0, Vec::len);
    if dims == 0 || n < dims || r < dims || rows.iter().any(|x| x.len() != r) {
        return Err(Error::Shape(format!("cannot take {dims} components of {n} rows of width {r}")));
    }
    let mean: Vec<f64> = (0..r).map(|j| rows.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
    let centred = DMatrix::from_fn(n, r, |i, j| rows[i][j] - mean[j]);
    let cov = centred.transpose() * &centred / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(dims);
    let mut ratios = Vec::with_capacity(dims);
    for &k in order.iter().take(dims) {
        let mut c: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        if let Some(first) = c.iter().copied().find(|v| v.abs() > 1e-12) {
            if first < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
        }
        components.push(c);
        ratios.push(if total > 0.0 { eig.eigenvalues[k].max(0.0) / total } else { 0.0 });
    }
    let coords = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| (0..r).map(|j| centred[(i, j)] * c[j]).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        coords,
        components,
        explained_variance_ratio: ratios,
    })
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

pub const COVARIATE_HIDDEN: [usize; 2] = [64, 64];
pub const COVARIATE_EPOCHS: usize = 500;
pub const COVARIATE_BATCH: usize = 8;

/// Maps standardized agent covariates to a latent agent factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMap {
    pub env: EnvKind,
    pub net: Mlp,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Fraction of training agents whose covariates were used.
    pub p: f64,
    pub fitted_agents: Vec<usize>,
    pub final_loss: f64,
}

impl CovariateMap {
    fn standardize(&self, cov: &[f64]) -> Vec<f64> {
        cov.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(c, (m, s))| (c - m) / s)
            .collect()
    }

    pub fn predict(&self, params: &AgentParams) -> Result<Vec<f64>> {
        if params.env() != self.env {
            return Err(Error::EnvMismatch {
                expected: self.env.to_string(),
                found: params.env().to_string(),
            });
        }
        self.net.predict(&self.standardize(&params.covariates()))
    }
}

/// Mean over samples of the summed squared output error, with gradients
/// in [`Parameterized`] order.
pub fn covariate_loss_and_grads(net: &Mlp, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<(f64, Grads)> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::Shape("inputs and targets must be non-empty and of equal length".into()));
    }
    let scale = 1.0 / xs.len() as f64;
    let mut grads = net.zero_grads();
    let mut loss = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let (out, tape) = net.forward(x)?;
        if out.len() != y.len() {
            return Err(Error::Shape("target width differs from network output".into()));
        }
        let dy: Vec<f64> = out.iter().zip(y).map(|(o, t)| 2.0 * scale * (o - t)).collect();
        loss += out.iter().zip(y).map(|(o, t)| (o - t).powi(2)).sum::<f64>() * scale;
        net.backward_into(&tape, &dy, &mut grads)?;
    }
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("covariate map loss {loss}")));
    }
    Ok((loss, grads))
}

/// `ceil(p * N)` agents (at least two), chosen by a seeded shuffle.
pub fn covariate_subset(n_agents: usize, p: f64, seed: u64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("covariate fraction p = {p} must lie in (0, 1]")));
    }
    if n_agents < 2 {
        return Err(Error::Config("at least two agents are needed to fit a covariate map".into()));
    }
    let count = ((p * n_agents as f64).ceil() as usize).clamp(2, n_agents);
    let mut idx: Vec<usize> = (0..n_agents).collect();
    idx.shuffle(&mut rng::stream(seed, "covariate-subset", 0));
    idx.truncate(count);
    idx.sort_unstable();
    Ok(idx)
}

fn fit_on_subset(
    model: &FactorizedModel,
    agents: &[AgentParams],
    subset: &[usize],
    p: f64,
    seed: u64,
) -> Result<CovariateMap> {
    if agents.len() != model.n_agents() {
        return Err(Error::Shape("covariates must cover every agent of the model".into()));
    }
    let env = model.env;
    let raw: Vec<Vec<f64>> = subset.iter().map(|&n| agents[n].covariates()).collect();
    let c = env.covariate_dim();
    let k = raw.len() as f64;
    let mean: Vec<f64> = (0..c).map(|j| raw.iter().map(|x| x[j]).sum::<f64>() / k).collect();
    let scale: Vec<f64> = (0..c)
        .map(|j| {
            let sd = (raw.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / k).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let mut sizes = vec![c];
    sizes.extend(COVARIATE_HIDDEN);
    sizes.push(model.rank);
    let mut map = CovariateMap {
        env,
        net: Mlp::new(&sizes, &mut rng::stream(seed, "covariate-init", 0)),
        mean,
        scale,
        p,
        fitted_agents: subset.to_vec(),
        final_loss: f64::NAN,
    };
    let xs: Vec<Vec<f64>> = raw.iter().map(|x| map.standardize(x)).collect();
    let ys: Vec<Vec<f64>> = subset
        .iter()
        .map(|&n| model.agent_factor(n).map(<[f64]>::to_vec))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(AdamConfig::default(), &map.net);
    let mut shuffle = rng::stream(seed, "covariate-shuffle", 0);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for _ in 0..COVARIATE_EPOCHS {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(COVARIATE_BATCH) {
            let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<Vec<f64>> = chunk.iter().map(|&i| ys[i].clone()).collect();
            let (_, grads) = covariate_loss_and_grads(&map.net, &bx, &by)?;
            adam.step(map.net.tensors_mut(), &grads)?;
        }
    }
    map.final_loss = covariate_loss_and_grads(&map.net, &xs, &ys)?.0;
    Ok(map)
}

/// Fit the covariate map of one model from the covariates of a fraction
/// `p` of its agents.
pub fn fit_covariate_map(model: &FactorizedModel, agents: &[AgentParams], p: f64, seed: u64) -> Result<CovariateMap> {
    let subset = covariate_subset(model.n_agents(), p, seed)?;
    fit_on_subset(model, agents, &subset, p, seed)
}

/// Latent factor of an agent absent from training.
pub fn infer_unseen(map: &CovariateMap, params: &AgentParams) -> Result<Vec<f64>> {
    map.predict(params)
}

/// One covariate map per ensemble member, all fitted on the same agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCovariateMap {
    pub maps: Vec<CovariateMap>,
}

impl EnsembleCovariateMap {
    pub fn fit(ens: &Ensemble, p: f64, seed: u64) -> Result<Self> {
        let subset = covariate_subset(ens.n_agents(), p, seed)?;
        let maps = ens
            .members
            .par_iter()
            .enumerate()
            .map(|(m, model)| fit_on_subset(model, &ens.meta.agents, &subset, p, seed.wrapping_add(m as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleCovariateMap { maps })
    }

    /// A virtual agent for `params` usable anywhere a table agent is.
    pub fn oracle<'a>(&self, ens: &'a Ensemble, params: &AgentParams) -> Result<DynamicsOracle<'a>> {
        let factors = self
            .maps
            .iter()
            .map(|m| infer_unseen(m, params))
            .collect::<Result<Vec<_>>>()?;
        DynamicsOracle::virtual_agent(ens, &factors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use approx::assert_abs_diff_eq;

    fn scalar(v: &[f64]) -> Vec<State> {
        v.iter().map(|&x| State::from_slice(&[x])).collect()
    }

    #[test]
    fn hand_computed_toy() {
        let (rmse, r2) = rmse_r2(&scalar(&[0.0, 1.0, 2.0]), &scalar(&[0.0, 1.0, 1.0])).unwrap();
        assert_abs_diff_eq!(r2, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rmse, (1.0f64 / 3.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn perfect_and_mean_predictors() {
        let truth = scalar(&[0.3, -1.0, 2.5, 4.0]);
        assert_eq!(rmse_r2(&truth, &truth).unwrap(), (0.0, 1.0));
        let mean = scalar(&[1.45; 4]);
        assert_eq!(rmse_r2(&truth, &mean).unwrap().1, 0.0);
        let flat = scalar(&[1.0; 3]);
        assert_eq!(rmse_r2(&flat, &flat).unwrap().1, 1.0);
        assert_eq!(rmse_r2(&flat, &scalar(&[1.0, 1.0, 2.0])).unwrap().1, f64::NEG_INFINITY);
        assert!(rmse_r2(&flat, &scalar(&[1.0])).is_err());
    }

    #[test]
    fn rmse_scales_linearly_and_ignores_order() {
        let truth = scalar(&[0.0, 1.0, 2.0, 3.0]);
        let pred = scalar(&[0.5, 0.5, 2.5, 2.0]);
        let (base, _) = rmse_r2(&truth, &pred).unwrap();
        let doubled: Vec<State> = truth.iter().zip(&pred).map(|(t, p)| State::from_slice(&[t[0] + 2.0 * (p[0] - t[0])])).collect();
        assert_abs_diff_eq!(rmse_r2(&truth, &doubled).unwrap().0, 2.0 * base, epsilon = 1e-15);
        let (mut t2, mut p2) = (truth.clone(), pred.clone());
        t2.reverse();
        p2.reverse();
        assert_abs_diff_eq!(rmse_r2(&t2, &p2).unwrap().0, base, epsilon = 1e-15);
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0]), 3.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn true_env_oracle_is_exact() {
        for env in [EnvKind::MountainCar, EnvKind::CartPole] {
            let targets: Vec<_> = env
                .test_agents()
                .into_iter()
                .map(|p| (p, DynamicsOracle::true_env(p)))
                .collect();
            for policy in [TestPolicy::Scripted, TestPolicy::Random] {
                let cfg = PredictionConfig {
                    trials: 10,
                    policy,
                    ..PredictionConfig::default()
                };
                let report = eval_prediction(&targets, &cfg).unwrap();
                for row in &report.rows {
                    assert_eq!((row.mean_rmse, row.median_r2), (0.0, 1.0));
                }
            }
        }
    }

    #[test]
    fn scripted_test_policies() {
        let mut r = rng::from_seed(0);
        let mc = |x: f64, v: f64| State::from_slice(&[x, v]);
        let p = TestPolicy::Scripted;
        assert_eq!(test_policy_action(p, EnvKind::MountainCar, &mc(-0.5, 0.01), &mut r), Action(2));
        assert_eq!(test_policy_action(p, EnvKind::MountainCar, &mc(-0.5, -0.01), &mut r), Action(0));
        assert_eq!(test_policy_action(p, EnvKind::MountainCar, &mc(-0.4, 0.001), &mut r), Action(0));
        assert_eq!(test_policy_action(p, EnvKind::MountainCar, &mc(-0.6, 0.001), &mut r), Action(2));
        let cp = State::from_slice(&[0.0, 0.0, 0.01, -0.05]);
        assert_eq!(test_policy_action(p, EnvKind::CartPole, &cp, &mut r), Action(1));
        assert_eq!("random".parse::<TestPolicy>().unwrap(), TestPolicy::Random);
        assert!("dqn".parse::<TestPolicy>().is_err());
    }

    #[test]
    fn early_termination_truncates_comparison() {
        let p = AgentParams::CartPole { force: 10.0, length: 0.5 };
        let s0 = State::from_slice(&[0.0, 0.0, 0.25, 0.0]);
        let actions = vec![Action(0); 50];
        let score = rollout_rmse_r2(&DynamicsOracle::true_env(p), &p, &s0, &actions);
        // Already past the angle limit: stepping is refused.
        assert!(score.is_err());
        let s0 = State::from_slice(&[0.0, 0.0, 0.15, 0.0]);
        let score = rollout_rmse_r2(&DynamicsOracle::true_env(p), &p, &s0, &actions);
        assert!(score.is_err() || score.unwrap().steps < 50);
        let s0 = State::from_slice(&[0.0, 0.0, 0.1, 0.5]);
        let score = rollout_rmse_r2(&DynamicsOracle::true_env(p), &p, &s0, &actions).unwrap();
        assert!(score.steps < 50);
        assert_eq!(score.r2, 1.0);
    }

    #[test]
    fn reward_report_shape() {
        let p = AgentParams::CartPole { force: 10.0, length: 0.5 };
        let targets = vec![(p, DynamicsOracle::true_env(p))];
        let cfg = RewardConfig {
            mpc: MpcConfig { horizon: 5, candidates: 10 },
            episodes: 2,
            repeats: 3,
            seed: 1,
        };
        let report = eval_reward(&targets, &cfg).unwrap();
        assert_eq!(report.rows[0].episode_rewards.len(), 6);
        assert!(report.rows[0].std >= 0.0);
        assert!(eval_reward(&targets, &RewardConfig { episodes: 0, ..cfg }).is_err());
    }

    #[test]
    fn pca_recovers_a_line() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| {
            let t = i as f64 * 0.1 - 1.0;
            vec![2.0 * t, -t, 0.5 * t]
        }).collect();
        let pca = pca_project(&rows, 2).unwrap();
        assert_abs_diff_eq!(pca.explained_variance_ratio[0], 1.0, epsilon = 1e-12);
        assert!(pca.components[0][0] > 0.0);
        let norm = (4.0f64 + 1.0 + 0.25).sqrt();
        // Mean of t is -0.05.
        for (i, c) in pca.coords.iter().enumerate() {
            let t = i as f64 * 0.1 - 1.0;
            assert_abs_diff_eq!(c[0], (t + 0.05) * norm, epsilon = 1e-9);
            assert_abs_diff_eq!(c[1], 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn pca_isotropic_and_orthogonal() {
        let mut r = rng::from_seed(2);
        let rows: Vec<Vec<f64>> = (0..20_000)
            .map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let pca = pca_project(&rows, 4).unwrap();
        for v in &pca.explained_variance_ratio {
            assert!((v - 0.25).abs() < 0.02, "{v}");
        }
        for w in pca.explained_variance_ratio.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..4).map(|j| pca.components[a][j] * pca.components[b][j]).sum();
                assert_abs_diff_eq!(dot, if a == b { 1.0 } else { 0.0 }, epsilon = 1e-10);
            }
        }
        assert!(pca_project(&rows[..1], 2).is_err());
    }

    #[test]
    fn pca_duplicates_and_constant_rows() {
        let rows = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![3.0, -1.0]];
        let pca = pca_project(&rows, 1).unwrap();
        assert_eq!(pca.coords[0], pca.coords[1]);
        let flat = vec![vec![1.0, 1.0]; 4];
        let pca = pca_project(&flat, 2).unwrap();
        assert_eq!(pca.explained_variance_ratio, vec![0.0, 0.0]);
    }

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_abs_diff_eq!(spearman(&x, &[1.0, 4.0, 9.0, 16.0, 25.0]), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]), -1.0, epsilon = 1e-15);
        // Tied ranks ry = (1.5, 1.5, 3, 4, 5): Sxy = 9.5, Sxx = 10, Syy = 9.5.
        assert_abs_diff_eq!(spearman(&x, &[1.0, 1.0, 2.0, 3.0, 4.0]), 0.95f64.sqrt(), epsilon = 1e-12);
        assert!(spearman(&x, &[1.0; 5]).is_nan());
    }

    /// A random covariate-map instance, or `None` when some hidden unit sits
    /// within 1e-4 of its ReLU kink, where central differences with
    /// h = 1e-5 straddle the non-differentiable point.
    pub(crate) fn covariate_instance(seed: u64) -> Option<(Mlp, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut r = rng::from_seed(seed);
        let net = Mlp::new(&[2, 64, 64, 3], &mut r);
        let xs: Vec<Vec<f64>> = (0..5).map(|_| vec![r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)]).collect();
        let ys: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| net.predict(x).unwrap().iter().map(|v| v + r.gen_range(-0.1..0.1)).collect())
            .collect();
        let margin = xs.iter().map(|x| net.relu_margin(x).unwrap()).fold(f64::INFINITY, f64::min);
        (margin >= 1e-4).then_some((net, xs, ys))
    }

    #[test]
    fn covariate_map_gradients() {
        let mut checked = 0;
        for seed in 0.. {
            let Some((mut net, xs, ys)) = covariate_instance(seed) else {
                continue;
            };
            let report = grad_check(&mut net, |n: &Mlp| covariate_loss_and_grads(n, &xs, &ys).unwrap(), 1e-4);
            assert!(report.passed, "seed {seed}: {report:?}");
            checked += 1;
            if checked == 10 {
                break;
            }
        }
    }

    #[test]
    fn subset_selection() {
        assert_eq!(covariate_subset(10, 1.0, 0).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(covariate_subset(100, 0.1, 0).unwrap().len(), 10);
        assert_eq!(covariate_subset(10, 0.01, 0).unwrap().len(), 2);
        assert!(covariate_subset(10, 0.0, 0).is_err());
        assert!(covariate_subset(1, 1.0, 0).is_err());
    }

    #[test]
    fn constant_covariates_predict_mean_factor() {
        let model = FactorizedModel::new(EnvKind::MountainCar, 6, 3, &[8], &mut rng::from_seed(0)).unwrap();
        let agents = vec![AgentParams::MountainCar { gravity: 0.002 }; 6];
        let map = fit_covariate_map(&model, &agents, 1.0, 0).unwrap();
        let pred = map.predict(&agents[0]).unwrap();
        for l in 0..3 {
            let mean = (0..6).map(|n| model.agent_factor(n).unwrap()[l]).sum::<f64>() / 6.0;
            assert_abs_diff_eq!(pred[l], mean, epsilon = 1e-3);
        }
        assert!(map.predict(&AgentParams::CartPole { force: 10.0, length: 0.5 }).is_err());
    }
}
