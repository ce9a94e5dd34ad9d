//! Command-line front end. Settings come from flags, then an optional JSON
//! config file (`--config`), then built-in defaults.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{self, PolicyRegime};
use crate::envs::{self, Action, AgentParams, EnvKind, State};
use crate::error::Error;
use crate::eval::{self, EnsembleCovariateMap, PredictionConfig, RewardConfig, TestPolicy};
use crate::factor_model::{FactorizedModel, Prop1Model, Sample};
use crate::nn::{grad_check, Mlp};
use crate::planner::{DynamicsOracle, MpcConfig};
use crate::rng;
use crate::training::{self, Ensemble, TrainConfig};
use crate::VERSION;

/// Keys accepted in a `--config` file; each mirrors the flag of the same
/// name (with `-` written as `_`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: Option<EnvKind>,
    pub n_agents: Option<usize>,
    pub regime: Option<String>,
    pub eps: Option<f64>,
    pub seed: Option<u64>,
    pub rank: Option<usize>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub hidden: Option<Vec<usize>>,
    pub ensemble: Option<usize>,
    pub trials: Option<usize>,
    pub test_policy: Option<String>,
    pub horizon: Option<usize>,
    pub candidates: Option<usize>,
    pub episodes: Option<usize>,
    pub repeats: Option<usize>,
    pub agents: Option<Vec<String>>,
    pub p: Option<f64>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(name = "persim", version = VERSION, about = "Personalized simulators and ensemble MPC for heterogeneous agents")]
pub struct Cli {
    /// JSON file with default settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record one trajectory per sampled agent.
    GenData(GenDataArgs),
    /// Train an ensemble of factorized models on a dataset.
    Train(TrainArgs),
    /// Long-horizon prediction error on test agents.
    EvalPred(EvalPredArgs),
    /// Average episodic reward of MPC with a learned or the true model.
    EvalReward(EvalRewardArgs),
    /// Write the learned agent factors (and optionally a PCA projection).
    ExportFactors(ExportArgs),
    /// Fit a covariate-to-factor map and evaluate agents absent from training.
    Unseen(UnseenArgs),
    /// Run a built-in oracle suite; exits 1 on failure.
    Check {
        #[arg(value_enum)]
        suite: CheckSuite,
    },
    /// Parameter sweeps.
    Sweep {
        #[command(subcommand)]
        sweep: SweepCommand,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CheckSuite {
    Prop1,
    Grads,
    Trilinear,
}

#[derive(Debug, Subcommand)]
pub enum SweepCommand {
    /// Retrain and evaluate with fewer training agents.
    Scarcity(ScarcityArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub env: Option<EnvKind>,
    #[arg(long)]
    pub n_agents: Option<usize>,
    /// pure | random | pure-eps
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Do not place the environment's test agents at the front of the table.
    #[arg(long)]
    pub no_test_agents: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Pick the rank from these candidates by held-out error instead.
    #[arg(long, value_delimiter = ',')]
    pub select_rank: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub ensemble: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalPredArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset the model was trained on; checked against the checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Agents to evaluate (default: the environment's test agents present in the model).
    #[arg(long, value_delimiter = ',')]
    pub agents: Option<Vec<String>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// scripted | random | both
    #[arg(long)]
    pub test_policy: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalRewardArgs {
    #[arg(long, conflicts_with = "true_env")]
    pub model: Option<PathBuf>,
    /// Plan with the real dynamics instead of a learned model.
    #[arg(long)]
    pub true_env: bool,
    #[arg(long)]
    pub env: Option<EnvKind>,
    /// Covariate map (from `unseen`) for agents absent from the model.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Agents to evaluate (default: the environment's default agent).
    #[arg(long, value_delimiter = ',')]
    pub agents: Option<Vec<String>>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Ensemble member whose factors are exported.
    #[arg(long, default_value_t = 0)]
    pub member: usize,
    /// Also write `<out>.pca.csv` with this many principal components.
    #[arg(long)]
    pub pca: Option<usize>,
    #[arg(long)]
    pub out_csv: PathBuf,
}

#[derive(Debug, Args)]
pub struct UnseenArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Covariates of the agents to simulate, e.g. `0.002` or `10:0.5`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub covariates: Vec<String>,
    /// Fraction of training agents whose covariates are used.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub test_policy: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the fitted covariate map.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScarcityArgs {
    #[arg(long)]
    pub env: Option<EnvKind>,
    #[arg(long, value_delimiter = ',', default_value = "25,50,100,250")]
    pub n_agents: Vec<usize>,
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Agent evaluated at every N (default: 0.0025 for MountainCar, the default agent for CartPole).
    #[arg(long)]
    pub agent: Option<String>,
    #[arg(long)]
    pub ensemble: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Only measure prediction error.
    #[arg(long)]
    pub skip_reward: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Invalid invocation or settings (exit 2).
    Usage(String),
    /// Runtime or oracle failure (exit 1).
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::EnvMismatch { .. } | Error::InvalidAgent { .. } => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parse `args` (including the program name) and run the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::GenData(a) => gen_data(a, &file),
        Command::Train(a) => train(a, &file),
        Command::EvalPred(a) => eval_pred(a, &file),
        Command::EvalReward(a) => eval_reward(a, &file),
        Command::ExportFactors(a) => export_factors(a),
        Command::Unseen(a) => unseen(a, &file),
        Command::Check { suite } => check(suite),
        Command::Sweep {
            sweep: SweepCommand::Scarcity(a),
        } => scarcity(a, &file),
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn parse_agents(env: EnvKind, items: &[String]) -> CliResult<Vec<AgentParams>> {
    items
        .iter()
        .map(|s| AgentParams::parse(env, s.trim()).map_err(CliError::from))
        .collect()
}

fn parse_regime(tag: &str, eps: Option<f64>) -> CliResult<PolicyRegime> {
    Ok(PolicyRegime::from_parts(tag, eps)?)
}

fn parse_policies(text: &str) -> CliResult<Vec<TestPolicy>> {
    match text {
        "both" => Ok(vec![TestPolicy::Scripted, TestPolicy::Random]),
        other => Ok(vec![other.parse::<TestPolicy>()?]),
    }
}

fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".provenance.json");
    PathBuf::from(name)
}

/// Settings, seeds and version of the run that produced `out`.
fn write_provenance(out: &Path, command: &str, settings: serde_json::Value) -> CliResult<()> {
    let block = json!({ "command": command, "version": VERSION, "settings": settings });
    let path = sidecar(out);
    let text = serde_json::to_string_pretty(&block).map_err(Error::from)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn gen_data(a: GenDataArgs, file: &RunConfig) -> CliResult<()> {
    let env = a.env.or(file.env).ok_or_else(|| usage("--env is required"))?;
    let n = pick(a.n_agents, file.n_agents, 100);
    let tag = pick(a.regime, file.regime.clone(), "random".into());
    let regime = parse_regime(&tag, a.eps.or(file.eps))?;
    let seed = pick(a.seed, file.seed, 0);
    let injected = if a.no_test_agents { vec![] } else { env.test_agents() };
    if injected.len() > n {
        return Err(usage(format!("--n-agents must be at least {} to hold the test agents", injected.len())));
    }
    let ds = data::generate_population(env, n, &injected, regime, seed)?;
    data::save_dataset(&ds, &a.out)?;
    eprintln!(
        "wrote {} transitions for {} {} agents ({regime}) to {}",
        ds.len(),
        n,
        env,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, file: &RunConfig) -> CliResult<()> {
    let ds = data::load_dataset(&a.data)?;
    let defaults = TrainConfig::defaults(ds.env);
    let mut cfg = TrainConfig {
        env: ds.env,
        rank: pick(a.rank, file.rank, defaults.rank),
        lr: pick(a.lr, file.lr, defaults.lr),
        batch_size: pick(a.batch, file.batch, defaults.batch_size),
        epochs: pick(a.epochs, file.epochs, defaults.epochs),
        seed: pick(a.seed, file.seed, 0),
        hidden: pick(a.hidden, file.hidden.clone(), defaults.hidden),
    };
    cfg.validate()?;
    let m = pick(a.ensemble, file.ensemble, 5);
    if m == 0 {
        return Err(usage("--ensemble must be at least 1"));
    }
    if let Some(candidates) = &a.select_rank {
        let sel = crate::factor_model::rank_select(&ds, candidates, &cfg)?;
        for (r, mse) in &sel.scores {
            eprintln!("rank {r}: held-out MSE {mse:.3e}");
        }
        eprintln!("selected rank {}", sel.rank);
        cfg.rank = sel.rank;
    }
    eprintln!(
        "training {m} model(s) on {} transitions: rank {}, {} epochs, batch {}",
        ds.len(),
        cfg.rank,
        cfg.epochs,
        cfg.batch_size
    );
    let ens = training::train_ensemble(&ds, &cfg, m)?;
    for (i, h) in ens.meta.loss_history.iter().enumerate() {
        eprintln!("member {i}: final epoch loss {:.3e}", h.last().copied().unwrap_or(f64::NAN));
    }
    training::save_ensemble(&ens, &a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn check_dataset_matches(ens: &Ensemble, path: &Path) -> CliResult<()> {
    let ds = data::load_dataset(path)?;
    let meta = training::DatasetMeta::of(&ds);
    if meta != ens.meta.dataset {
        return Err(usage(format!(
            "{} is not the dataset recorded in the checkpoint",
            path.display()
        )));
    }
    Ok(())
}

fn eval_pred(a: EvalPredArgs, file: &RunConfig) -> CliResult<()> {
    let ens = training::load_ensemble(&a.model, None)?;
    if let Some(d) = &a.data {
        check_dataset_matches(&ens, d)?;
    }
    let env = ens.env();
    let agents = match a.agents.or(file.agents.clone()) {
        Some(items) => parse_agents(env, &items)?,
        None => env
            .test_agents()
            .into_iter()
            .filter(|p| ens.agent_index(p).is_some())
            .collect(),
    };
    if agents.is_empty() {
        return Err(usage("no test agents in the model; name them with --agents"));
    }
    let policies = parse_policies(&pick(a.test_policy, file.test_policy.clone(), "both".into()))?;
    let targets = eval::ensemble_oracles(&ens, &agents)?;
    let mut reports = Vec::new();
    for policy in policies {
        let cfg = PredictionConfig {
            trials: pick(a.trials, file.trials, eval::DEFAULT_TRIALS),
            horizon: pick(a.horizon, file.horizon, eval::DEFAULT_HORIZON),
            policy,
            seed: pick(a.seed, file.seed, 0),
        };
        let report = eval::eval_prediction(&targets, &cfg)?;
        print!("{report}");
        reports.push((cfg, report));
    }
    if let Some(out) = &a.out_csv {
        let refs: Vec<_> = reports.iter().map(|(_, r)| r).collect();
        eval::write_prediction_csv(&refs, out)?;
        let cfgs: Vec<_> = reports.iter().map(|(c, _)| c).collect();
        write_provenance(
            out,
            "eval-pred",
            json!({ "model": a.model, "model_config_hash": ens.meta.config_hash, "prediction": cfgs }),
        )?;
    }
    Ok(())
}

fn eval_reward(a: EvalRewardArgs, file: &RunConfig) -> CliResult<()> {
    let cfg = RewardConfig {
        mpc: MpcConfig {
            horizon: pick(a.horizon, file.horizon, 50),
            candidates: pick(a.candidates, file.candidates, 1000),
        },
        episodes: pick(a.episodes, file.episodes, 20),
        repeats: pick(a.repeats, file.repeats, 5),
        seed: pick(a.seed, file.seed, 0),
    };
    let report = if a.true_env {
        let env = a.env.or(file.env).ok_or_else(|| usage("--true-env needs --env"))?;
        let agents = match a.agents.or(file.agents.clone()) {
            Some(items) => parse_agents(env, &items)?,
            None => vec![env.default_params()],
        };
        let targets: Vec<_> = agents.iter().map(|p| (*p, DynamicsOracle::true_env(*p))).collect();
        eval::eval_reward(&targets, &cfg)?
    } else {
        let path = a.model.as_ref().ok_or_else(|| usage("one of --model or --true-env is required"))?;
        let ens = training::load_ensemble(path, a.env.or(file.env))?;
        let env = ens.env();
        let agents = match a.agents.or(file.agents.clone()) {
            Some(items) => parse_agents(env, &items)?,
            None => vec![env.default_params()],
        };
        let map = match &a.map {
            Some(p) => Some(load_map(p)?),
            None => None,
        };
        let targets = agents
            .iter()
            .map(|p| match (ens.agent_index(p), &map) {
                (Some(n), _) => Ok((*p, DynamicsOracle::learned(&ens, n)?)),
                (None, Some(m)) => Ok((*p, m.oracle(&ens, p)?)),
                (None, None) => Err(usage(format!("agent {p} is not in the model; pass --map to simulate it"))),
            })
            .collect::<CliResult<Vec<_>>>()?;
        eval::eval_reward(&targets, &cfg)?
    };
    print!("{report}");
    if let Some(out) = &a.out_csv {
        report.write_csv(out)?;
        write_provenance(
            out,
            "eval-reward",
            json!({ "model": a.model, "true_env": a.true_env, "reward": cfg }),
        )?;
    }
    Ok(())
}

fn export_factors(a: ExportArgs) -> CliResult<()> {
    let ens = training::load_ensemble(&a.model, None)?;
    let model = ens
        .members
        .get(a.member)
        .ok_or_else(|| usage(format!("member {} of {}", a.member, ens.len())))?;
    eval::export_factors(model, &ens.meta.agents, &a.out_csv)?;
    let mut settings = json!({ "model": a.model, "member": a.member, "model_config_hash": ens.meta.config_hash });
    if let Some(dims) = a.pca {
        let rows: Vec<Vec<f64>> = (0..model.n_agents())
            .map(|n| model.agent_factor(n).map(<[f64]>::to_vec))
            .collect::<crate::Result<_>>()?;
        let pca = eval::pca_project(&rows, dims)?;
        let mut out = a.out_csv.as_os_str().to_owned();
        out.push(".pca.csv");
        let out = PathBuf::from(out);
        write_pca_csv(&ens, &pca, &out)?;
        for (j, name) in ens.env().covariate_names().iter().enumerate() {
            let cov: Vec<f64> = ens.meta.agents.iter().map(|p| p.covariates()[j]).collect();
            let pc1: Vec<f64> = pca.coords.iter().map(|c| c[0]).collect();
            eprintln!("spearman({name}, pc1) = {:.3}", eval::spearman(&cov, &pc1));
        }
        eprintln!("explained variance ratio: {:?}", pca.explained_variance_ratio);
        settings["pca"] = json!({ "dims": dims, "explained_variance_ratio": pca.explained_variance_ratio });
    }
    write_provenance(&a.out_csv, "export-factors", settings)?;
    eprintln!("wrote {} agent rows to {}", model.n_agents(), a.out_csv.display());
    Ok(())
}

fn write_pca_csv(ens: &Ensemble, pca: &eval::Pca, out: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(out).map_err(|e| CliError::Failed(format!("{}: {e}", out.display())))?;
    let mut header = vec!["agent".to_string()];
    header.extend(ens.env().covariate_names().iter().map(|s| s.to_string()));
    header.extend((1..=pca.components.len()).map(|i| format!("pc{i}")));
    let fail = |e: csv::Error| CliError::Failed(format!("{}: {e}", out.display()));
    w.write_record(&header).map_err(fail)?;
    for (n, (p, c)) in ens.meta.agents.iter().zip(&pca.coords).enumerate() {
        let mut row = vec![n.to_string()];
        row.extend(p.covariates().iter().map(f64::to_string));
        row.extend(c.iter().map(f64::to_string));
        w.write_record(&row).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct MapFile {
    format_version: u32,
    model_config_hash: String,
    map: EnsembleCovariateMap,
}

fn load_map(path: &Path) -> CliResult<EnsembleCovariateMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: MapFile = serde_json::from_str(&text).map_err(Error::from)?;
    if f.format_version != 1 {
        return Err(Error::FormatVersion {
            found: f.format_version,
            expected: 1,
        }
        .into());
    }
    Ok(f.map)
}

fn unseen(a: UnseenArgs, file: &RunConfig) -> CliResult<()> {
    let ens = training::load_ensemble(&a.model, None)?;
    let env = ens.env();
    let agents = parse_agents(env, &a.covariates)?;
    let p = pick(a.p, file.p, 1.0);
    let seed = pick(a.seed, file.seed, 0);
    let map = EnsembleCovariateMap::fit(&ens, p, seed)?;
    eprintln!(
        "fitted covariate map on {} of {} agents (p = {p})",
        map.maps[0].fitted_agents.len(),
        ens.n_agents()
    );
    let text = serde_json::to_string(&MapFile {
        format_version: 1,
        model_config_hash: ens.meta.config_hash.clone(),
        map: map.clone(),
    })
    .map_err(Error::from)?;
    fs::write(&a.out, text).map_err(|e| Error::io(&a.out, e))?;
    let targets = agents
        .iter()
        .map(|q| Ok((*q, map.oracle(&ens, q)?)))
        .collect::<crate::Result<Vec<_>>>()?;
    let mut reports = Vec::new();
    for policy in parse_policies(&pick(a.test_policy, file.test_policy.clone(), "scripted".into()))? {
        let cfg = PredictionConfig {
            trials: pick(a.trials, file.trials, eval::DEFAULT_TRIALS),
            horizon: pick(a.horizon, file.horizon, eval::DEFAULT_HORIZON),
            policy,
            seed,
        };
        let report = eval::eval_prediction(&targets, &cfg)?;
        print!("{report}");
        reports.push(report);
    }
    let settings = json!({ "model": a.model, "p": p, "seed": seed, "agents": agents });
    write_provenance(&a.out, "unseen", settings.clone())?;
    if let Some(out) = &a.out_csv {
        eval::write_prediction_csv(&reports.iter().collect::<Vec<_>>(), out)?;
        write_provenance(out, "unseen", settings)?;
    }
    Ok(())
}

/// Largest |Prop-1 prediction − closed-form transition| over `draws`
/// random `(s, a, g)`.
pub fn check_prop1(draws: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "check-prop1", 0);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let s = State::from_slice(&[
            r.gen_range(envs::MC_MIN_POSITION..envs::MC_MAX_POSITION),
            r.gen_range(-envs::MC_MAX_SPEED..envs::MC_MAX_SPEED),
        ]);
        let a = [-envs::MC_FORCE, 0.0, envs::MC_FORCE][r.gen_range(0..3)];
        let g = r.gen_range(envs::MC_GRAVITY_RANGE.0..=envs::MC_GRAVITY_RANGE.1);
        let m = Prop1Model { gravity: g };
        let (p, q) = (m.predict(&s, a), m.reference(&s, a));
        for d in 0..2 {
            worst = worst.max((p[d] - q[d]).abs());
        }
    }
    worst
}

/// Distance in units in the last place between two finite doubles.
pub fn ulp_distance(a: f64, b: f64) -> u64 {
    fn ordered(x: f64) -> i128 {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN as i128 - bits as i128
        } else {
            bits as i128
        }
    }
    (ordered(a) - ordered(b)).unsigned_abs() as u64
}

/// Largest ULP gap between `predict_delta` and a plain triple loop over
/// `instances` random models and inputs.
pub fn check_trilinear(instances: usize, seed: u64) -> crate::Result<u64> {
    let mut worst = 0;
    for i in 0..instances {
        let mut r = rng::stream(seed, "check-trilinear", i as u64);
        let env = if i % 2 == 0 { EnvKind::MountainCar } else { EnvKind::CartPole };
        let rank = r.gen_range(1..=6);
        let model = FactorizedModel::new(env, 4, rank, &[16], &mut r)?;
        let s: Vec<f64> = (0..env.state_dim()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let s = State::from_slice(&s);
        let (n, k) = (r.gen_range(0..4), Action(r.gen_range(0..env.action_count())));
        let got = model.predict_delta(n, &s, k)?;
        let v = model.state_encoder.predict(s.as_slice())?;
        let (u, w) = (model.agents.row(n)?, model.actions.row(k.0)?);
        for d in 0..env.state_dim() {
            let mut acc = 0.0;
            for l in 0..rank {
                acc += u[l] * v[d * rank + l] * w[l];
            }
            worst = worst.max(ulp_distance(got[d], acc));
        }
    }
    Ok(worst)
}

/// Whether every hidden unit is at least `margin` away from its ReLU kink
/// for every sample state.
fn kink_free(net: &Mlp, states: impl IntoIterator<Item = Vec<f64>>, margin: f64) -> bool {
    states
        .into_iter()
        .all(|x| net.relu_margin(&x).is_ok_and(|m| m >= margin))
}

/// Worst relative gradient error over `instances` random factorized models
/// and covariate-map networks. Instances with a hidden unit within 1e-4 of
/// its kink are skipped (finite differences are invalid there).
pub fn check_grads(instances: usize, seed: u64) -> crate::Result<(f64, f64)> {
    let mut model_worst = 0.0f64;
    let mut map_worst = 0.0f64;
    let (mut done, mut i) = (0, 0u64);
    while done < instances {
        let mut r = rng::stream(seed, "check-grads-model", i);
        i += 1;
        let env = if i % 2 == 0 { EnvKind::MountainCar } else { EnvKind::CartPole };
        let mut model = FactorizedModel::new(env, 5, 3, &[32], &mut r)?;
        let batch: Vec<Sample> = (0..6)
            .map(|_| {
                let s: Vec<f64> = (0..env.state_dim()).map(|_| r.gen_range(-1.0..1.0)).collect();
                let state = State::from_slice(&s);
                let (agent, action) = (r.gen_range(0..5), Action(r.gen_range(0..env.action_count())));
                let mut next = model.predict_next(agent, &state, action)?;
                for d in 0..env.state_dim() {
                    next[d] += r.gen_range(-0.1..0.1);
                }
                Ok(Sample {
                    agent,
                    state,
                    action,
                    next_state: next,
                })
            })
            .collect::<crate::Result<_>>()?;
        if !kink_free(&model.state_encoder, batch.iter().map(|b| b.state.as_slice().to_vec()), 1e-4) {
            continue;
        }
        let report = grad_check(&mut model, |m: &FactorizedModel| m.batch_loss_and_grads(&batch).expect("finite loss"), 1e-4);
        model_worst = model_worst.max(report.max_rel_err);
        done += 1;
    }
    let (mut done, mut i) = (0, 0u64);
    while done < instances {
        let mut r = rng::stream(seed, "check-grads-map", i);
        i += 1;
        let mut net = Mlp::new(&[2, 64, 64, 3], &mut r);
        let xs: Vec<Vec<f64>> = (0..5).map(|_| vec![r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)]).collect();
        let ys = xs
            .iter()
            .map(|x| Ok(net.predict(x)?.iter().map(|v| v + r.gen_range(-0.1..0.1)).collect()))
            .collect::<crate::Result<Vec<Vec<f64>>>>()?;
        if !kink_free(&net, xs.iter().cloned(), 1e-4) {
            continue;
        }
        let report = grad_check(&mut net, |n: &Mlp| eval::covariate_loss_and_grads(n, &xs, &ys).expect("finite loss"), 1e-4);
        map_worst = map_worst.max(report.max_rel_err);
        done += 1;
    }
    Ok((model_worst, map_worst))
}

fn check(suite: CheckSuite) -> CliResult<()> {
    let (name, ok) = match suite {
        CheckSuite::Prop1 => {
            let worst = check_prop1(100_000, 0);
            println!("prop1: max |prop1 - closed form| = {worst:.3e} over 100000 draws (limit 1e-12)");
            ("prop1", worst < 1e-12)
        }
        CheckSuite::Trilinear => {
            let worst = check_trilinear(1000, 0)?;
            println!("trilinear: max ulp distance to triple loop = {worst} over 1000 instances (limit 4)");
            ("trilinear", worst <= 4)
        }
        CheckSuite::Grads => {
            let (model, map) = check_grads(10, 0)?;
            println!("grads: factorized model max rel err = {model:.3e}, covariate map max rel err = {map:.3e} (limit 1e-4)");
            ("grads", model < 1e-4 && map < 1e-4)
        }
    };
    if ok {
        println!("{name}: PASS");
        Ok(())
    } else {
        println!("{name}: FAIL");
        Err(CliError::Failed(format!("{name} oracle check failed")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScarcityRow {
    pub n_agents: usize,
    pub agent: AgentParams,
    pub mean_rmse: f64,
    pub median_rmse: f64,
    pub median_r2: f64,
    pub reward_mean: Option<f64>,
    pub reward_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScarcitySettings {
    pub env: EnvKind,
    pub n_agents: Vec<usize>,
    pub regime: String,
    pub eps: Option<f64>,
    pub agent: AgentParams,
    pub train: TrainConfig,
    pub ensemble: usize,
    pub prediction: PredictionConfig,
    pub reward: Option<RewardConfig>,
    pub seed: u64,
}

/// For each N: sample a population containing the test agents, train an
/// ensemble, and measure prediction error and MPC reward on one agent.
pub fn run_scarcity_sweep(s: &ScarcitySettings) -> crate::Result<Vec<ScarcityRow>> {
    let regime = PolicyRegime::from_parts(&s.regime, s.eps)?;
    let injected = s.env.test_agents();
    let mut rows = Vec::new();
    for &n in &s.n_agents {
        if n < injected.len() {
            return Err(Error::Config(format!("N = {n} cannot hold the {} test agents", injected.len())));
        }
        let ds = data::generate_population(s.env, n, &injected, regime, s.seed)?;
        let ens = training::train_ensemble(&ds, &s.train, s.ensemble)?;
        let targets = eval::ensemble_oracles(&ens, &[s.agent])?;
        let pred = eval::eval_prediction(&targets, &s.prediction)?;
        let reward = match &s.reward {
            Some(cfg) => Some(eval::eval_reward(&targets, cfg)?),
            None => None,
        };
        let p = &pred.rows[0];
        let row = ScarcityRow {
            n_agents: n,
            agent: s.agent,
            mean_rmse: p.mean_rmse,
            median_rmse: p.median_rmse,
            median_r2: p.median_r2,
            reward_mean: reward.as_ref().map(|r| r.rows[0].mean),
            reward_std: reward.as_ref().map(|r| r.rows[0].std),
        };
        eprintln!(
            "N = {n}: median RMSE {:.4}, median R2 {:.3}, reward {}",
            row.median_rmse,
            row.median_r2,
            row.reward_mean.map_or("-".into(), |m| format!("{m:.1}"))
        );
        rows.push(row);
    }
    Ok(rows)
}

fn scarcity(a: ScarcityArgs, file: &RunConfig) -> CliResult<()> {
    let env = pick(a.env, file.env, EnvKind::MountainCar);
    let agent = match a.agent {
        Some(text) => AgentParams::parse(env, &text)?,
        None => match env {
            EnvKind::MountainCar => AgentParams::MountainCar { gravity: 0.0025 },
            EnvKind::CartPole => env.default_params(),
        },
    };
    let seed = pick(a.seed, file.seed, 0);
    let horizon = pick(a.horizon, file.horizon, 50);
    let settings = ScarcitySettings {
        env,
        n_agents: a.n_agents,
        regime: pick(a.regime, file.regime.clone(), "random".into()),
        eps: a.eps.or(file.eps),
        agent,
        train: TrainConfig {
            epochs: pick(a.epochs, file.epochs, 300),
            seed,
            ..TrainConfig::defaults(env)
        },
        ensemble: pick(a.ensemble, file.ensemble, 5),
        prediction: PredictionConfig {
            trials: pick(a.trials, file.trials, eval::DEFAULT_TRIALS),
            horizon: eval::DEFAULT_HORIZON,
            policy: TestPolicy::Scripted,
            seed,
        },
        reward: (!a.skip_reward).then(|| RewardConfig {
            mpc: MpcConfig {
                horizon,
                candidates: pick(a.candidates, file.candidates, 1000),
            },
            episodes: pick(a.episodes, file.episodes, 20),
            repeats: 1,
            seed,
        }),
        seed,
    };
    settings.train.validate()?;
    let rows = run_scarcity_sweep(&settings)?;
    println!("{:>8} {:>12} {:>12} {:>10} {:>16}", "N", "agent", "median RMSE", "median R2", "reward");
    for r in &rows {
        println!(
            "{:>8} {:>12} {:>12.4} {:>10.3} {:>16}",
            r.n_agents,
            r.agent.to_string(),
            r.median_rmse,
            r.median_r2,
            match (r.reward_mean, r.reward_std) {
                (Some(m), Some(s)) => format!("{m:.1} ± {s:.1}"),
                _ => "-".into(),
            }
        );
    }
    if let Some(out) = &a.out_csv {
        let fail = |e: csv::Error| CliError::Failed(format!("{}: {e}", out.display()));
        let mut w = csv::Writer::from_path(out).map_err(fail)?;
        w.write_record(["n_agents", "agent", "mean_rmse", "median_rmse", "median_r2", "reward_mean", "reward_std"])
            .map_err(fail)?;
        for r in &rows {
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            w.write_record([
                r.n_agents.to_string(),
                r.agent.to_string(),
                r.mean_rmse.to_string(),
                r.median_rmse.to_string(),
                r.median_r2.to_string(),
                opt(r.reward_mean),
                opt(r.reward_std),
            ])
            .map_err(fail)?;
        }
        w.flush().map_err(|e| Error::io(out, e))?;
        write_provenance(out, "sweep scarcity", serde_json::to_value(&settings).map_err(Error::from)?)?;
    }
    Ok(())
}
