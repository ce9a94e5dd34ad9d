//! Epoch/mini-batch training of the factorized model, ensembles, and
//! checkpoint files.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::OfflineDataset;
use crate::envs::{AgentParams, EnvKind};
use crate::error::{Error, Result};
use crate::factor_model::{FactorizedModel, Sample, DEFAULT_HIDDEN};
use crate::nn::{Adam, AdamConfig, DenseLayer, EmbeddingTable, Mlp, Parameterized};
use crate::rng;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub rank: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl TrainConfig {
    /// Rank 3 / batch 512 for MountainCar, rank 5 / batch 64 for CartPole;
    /// learning rate 0.001 and 300 epochs for both.
    pub fn defaults(env: EnvKind) -> Self {
        let (rank, batch_size) = match env {
            EnvKind::MountainCar => (3, 512),
            EnvKind::CartPole => (5, 64),
        };
        TrainConfig {
            env,
            rank,
            lr: 1e-3,
            batch_size,
            epochs: 300,
            seed: 0,
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Train one model on `ds`. Returns the model and the mean training loss of
/// every epoch.
pub fn train_model(ds: &OfflineDataset, cfg: &TrainConfig) -> Result<(FactorizedModel, Vec<f64>)> {
    if ds.env != cfg.env {
        return Err(Error::EnvMismatch {
            expected: cfg.env.to_string(),
            found: ds.env.to_string(),
        });
    }
    train_on_samples(ds.env, ds.n_agents(), &ds.samples(), cfg)
}

/// Each epoch: shuffle all samples, split into consecutive batches of
/// `batch_size` (the last one may be smaller) and take one Adam step per
/// batch on the mean squared error of the state difference.
pub fn train_on_samples(
    env: EnvKind,
    n_agents: usize,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<(FactorizedModel, Vec<f64>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    if env != cfg.env {
        return Err(Error::EnvMismatch {
            expected: cfg.env.to_string(),
            found: env.to_string(),
        });
    }
    let mut model = FactorizedModel::new(env, n_agents, cfg.rank, &cfg.hidden, &mut rng::stream(cfg.seed, "init", 0))?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model,
    );
    let mut shuffle_rng = rng::stream(cfg.seed, "shuffle", 0);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i]));
            let (loss, grads) = model
                .batch_loss_and_grads(&batch)
                .map_err(|e| Error::Divergence(format!("epoch {epoch}: {e}")))?;
            adam.step(model.tensors_mut(), &grads)?;
            epoch_loss += loss * chunk.len() as f64;
        }
        history.push(epoch_loss / samples.len() as f64);
    }
    Ok((model, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: EnvKind,
    pub n_agents: usize,
    pub n_records: usize,
    pub regime: String,
    pub eps: Option<f64>,
    pub seed: u64,
    pub behavior_policy: String,
}

impl DatasetMeta {
    pub fn of(ds: &OfflineDataset) -> Self {
        DatasetMeta {
            env: ds.env,
            n_agents: ds.n_agents(),
            n_records: ds.len(),
            regime: ds.regime.tag().to_string(),
            eps: ds.regime.eps(),
            seed: ds.seed,
            behavior_policy: ds.behavior_policy.clone(),
        }
    }
}

/// Provenance carried by every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub config: TrainConfig,
    pub config_hash: String,
    pub dataset: DatasetMeta,
    /// Covariates of every agent row, in table order.
    pub agents: Vec<AgentParams>,
    pub version: String,
    /// Per-member, per-epoch training loss.
    pub loss_history: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<FactorizedModel>,
    pub meta: TrainingMeta,
}

impl Ensemble {
    pub fn env(&self) -> EnvKind {
        self.members[0].env
    }

    pub fn rank(&self) -> usize {
        self.members[0].rank
    }

    pub fn n_agents(&self) -> usize {
        self.members[0].n_agents()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Index of the agent with these covariates.
    pub fn agent_index(&self, params: &AgentParams) -> Option<usize> {
        self.meta.agents.iter().position(|a| a.same_as(params))
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .members
            .first()
            .ok_or_else(|| Error::Config("empty ensemble".into()))?;
        for m in &self.members {
            m.validate()?;
            if m.env != first.env || m.rank != first.rank || m.n_agents() != first.n_agents() {
                return Err(Error::Shape("ensemble members disagree on (env, rank, N)".into()));
            }
        }
        if self.meta.agents.len() != first.n_agents() {
            return Err(Error::Shape(format!(
                "{} agent covariates for {} embedding rows",
                self.meta.agents.len(),
                first.n_agents()
            )));
        }
        Ok(())
    }
}

/// `m` models with seeds `seed, seed+1, …, seed+m-1`, trained in parallel.
pub fn train_ensemble(ds: &OfflineDataset, cfg: &TrainConfig, m: usize) -> Result<Ensemble> {
    if m == 0 {
        return Err(Error::Config("ensemble size must be at least 1".into()));
    }
    cfg.validate()?;
    let runs = (0..m)
        .into_par_iter()
        .map(|i| {
            let member_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            train_model(ds, &member_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let (members, loss_history) = runs.into_iter().unzip();
    Ok(Ensemble {
        members,
        meta: TrainingMeta {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            dataset: DatasetMeta::of(ds),
            agents: ds.agents.clone(),
            version: crate::VERSION.to_string(),
            loss_history,
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerParams {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelParams {
    agent_factors: Vec<Vec<f64>>,
    action_factors: Vec<Vec<f64>>,
    state_encoder: Vec<LayerParams>,
}

impl ModelParams {
    fn of(model: &FactorizedModel) -> Self {
        let rows = |t: &EmbeddingTable| t.values.chunks(t.dim).map(<[f64]>::to_vec).collect();
        ModelParams {
            agent_factors: rows(&model.agents),
            action_factors: rows(&model.actions),
            state_encoder: model
                .state_encoder
                .layers()
                .iter()
                .map(|l| LayerParams {
                    weights: l.weights.chunks(l.inputs).map(<[f64]>::to_vec).collect(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    fn into_model(self, env: EnvKind, rank: usize) -> Result<FactorizedModel> {
        let table = |rows: Vec<Vec<f64>>| {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != rank) {
                return Err(Error::Shape(format!("factor rows must have length {rank}")));
            }
            EmbeddingTable::from_values(n, rank, rows.concat())
        };
        let layers = self
            .state_encoder
            .into_iter()
            .map(|l| {
                let outputs = l.weights.len();
                let inputs = l.weights.first().map_or(0, Vec::len);
                if l.weights.iter().any(|r| r.len() != inputs) {
                    return Err(Error::Shape("ragged weight matrix".into()));
                }
                DenseLayer::from_parts(inputs, outputs, l.weights.concat(), l.bias)
            })
            .collect::<Result<Vec<_>>>()?;
        let model = FactorizedModel {
            env,
            rank,
            agents: table(self.agent_factors)?,
            state_encoder: Mlp::from_layers(layers)?,
            actions: table(self.action_factors)?,
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelEnvelope {
    format_version: u32,
    env: EnvKind,
    rank: usize,
    n_agents: usize,
    config: TrainConfig,
    params: ModelParams,
    provenance: TrainingMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleEnvelope {
    format_version: u32,
    env: EnvKind,
    rank: usize,
    n_agents: usize,
    config: TrainConfig,
    members: Vec<ModelParams>,
    provenance: TrainingMeta,
}

fn check_version(found: u32) -> Result<()> {
    if found != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    Ok(())
}

fn check_env(found: EnvKind, expected: Option<EnvKind>) -> Result<()> {
    match expected {
        Some(e) if e != found => Err(Error::EnvMismatch {
            expected: e.to_string(),
            found: found.to_string(),
        }),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_model(model: &FactorizedModel, meta: &TrainingMeta, path: &Path) -> Result<()> {
    model.validate()?;
    write_json(
        &ModelEnvelope {
            format_version: CHECKPOINT_FORMAT_VERSION,
            env: model.env,
            rank: model.rank,
            n_agents: model.n_agents(),
            config: meta.config.clone(),
            params: ModelParams::of(model),
            provenance: meta.clone(),
        },
        path,
    )
}

/// Load a single-model checkpoint; `expected_env` guards against using a
/// checkpoint with the wrong environment.
pub fn load_model(path: &Path, expected_env: Option<EnvKind>) -> Result<(FactorizedModel, TrainingMeta)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("members").is_some() {
        return Err(Error::Config(format!("{} is an ensemble checkpoint", path.display())));
    }
    let env: ModelEnvelope = serde_json::from_value(value)?;
    check_version(env.format_version)?;
    check_env(env.env, expected_env)?;
    let model = env.params.into_model(env.env, env.rank)?;
    if model.n_agents() != env.n_agents {
        return Err(Error::Shape("n_agents disagrees with the agent table".into()));
    }
    Ok((model, env.provenance))
}

pub fn save_ensemble(ens: &Ensemble, path: &Path) -> Result<()> {
    ens.validate()?;
    write_json(
        &EnsembleEnvelope {
            format_version: CHECKPOINT_FORMAT_VERSION,
            env: ens.env(),
            rank: ens.rank(),
            n_agents: ens.n_agents(),
            config: ens.meta.config.clone(),
            members: ens.members.iter().map(ModelParams::of).collect(),
            provenance: ens.meta.clone(),
        },
        path,
    )
}

/// Load an ensemble checkpoint; a single-model checkpoint loads as an
/// ensemble of one.
pub fn load_ensemble(path: &Path, expected_env: Option<EnvKind>) -> Result<Ensemble> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let ens = if value.get("members").is_some() {
        let env: EnsembleEnvelope = serde_json::from_value(value)?;
        check_version(env.format_version)?;
        check_env(env.env, expected_env)?;
        let members = env
            .members
            .into_iter()
            .map(|p| p.into_model(env.env, env.rank))
            .collect::<Result<Vec<_>>>()?;
        Ensemble {
            members,
            meta: env.provenance,
        }
    } else {
        let (model, meta) = load_model(path, expected_env)?;
        Ensemble {
            members: vec![model],
            meta,
        }
    };
    ens.validate()?;
    Ok(ens)
}
