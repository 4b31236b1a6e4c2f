//! Round-based federated training and unlearning.
//!
//! One round: every client pulls the global parameters, runs `local_steps`
//! Adam steps on its own shard, and pushes the resulting parameters back;
//! the server replaces the global model with the token-weighted mean.
//! Everything is derived from `seed`, so two runs of the same config are
//! bitwise identical, and the wire transport in `net` is required to
//! reproduce this exact computation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{minibatches, synth_shard, synth_shard_stream, Batch, DataConfig, Shard};
use crate::error::{Error, Result};
use crate::eval::{eval_nll, EvalReport};
use crate::model::{init_params, ModelConfig};
use crate::objectives::{ce_loss_and_grads, unlearn_loss_and_grads, Objective};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::rope::RopeTable;
use crate::tensor::NamedTensors;

pub const EVAL_STREAM: &str = "eval-tokens";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub n_clients: u64,
    pub rounds: usize,
    /// Optimizer steps per client per round.
    pub local_steps: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data.vocab != self.model.vocab {
            return Err(Error::Config(format!(
                "data vocab {} != model vocab {}",
                self.data.vocab, self.model.vocab
            )));
        }
        if self.data.seq_len > self.model.max_seq {
            return Err(Error::Config(format!(
                "seq_len {} exceeds model max_seq {}",
                self.data.seq_len, self.model.max_seq
            )));
        }
        if self.n_clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if self.local_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("local_steps and batch_size must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn root_rng(&self) -> Rng {
        Rng::from_seed(self.seed)
    }

    pub fn data_rng(&self) -> Rng {
        self.root_rng().derive("data", 0)
    }

    pub fn init_params(&self) -> NamedTensors {
        init_params(&self.model, &self.root_rng().derive("model", 0))
    }

    pub fn client_shard(&self, client_id: u64) -> Shard {
        synth_shard(&self.data_rng(), &self.data, client_id)
    }

    pub fn eval_shard(&self, client_id: u64) -> Shard {
        synth_shard_stream(&self.data_rng(), &self.data, client_id, EVAL_STREAM)
    }

    /// Held-out batches across all clients, for global NLL tracking.
    pub fn eval_batches(&self) -> Vec<Batch> {
        let mut out = Vec::new();
        for c in 0..self.n_clients {
            out.extend(minibatches(&self.eval_shard(c), self.batch_size));
        }
        out
    }
}

/// What a client sends back after local training.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: u64,
    pub round: u32,
    pub n_tokens: u64,
    pub mean_loss: f64,
    pub params: NamedTensors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: u32,
    /// Token-weighted mean of the clients' local training losses.
    pub mean_local_loss: f64,
    /// Held-out NLL of the aggregated model after this round.
    pub eval: EvalReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NamedTensors,
    pub history: Vec<RoundStats>,
}

/// Runs `local_steps` Adam steps from `start` on one client's shard.
/// The minibatch order is shuffled from a stream derived from
/// (seed, round, client), so any execution context reproduces it.
pub fn local_train(
    cfg: &FedConfig,
    start: &NamedTensors,
    shard: &Shard,
    round: u32,
) -> ClientUpdate {
    let rope = Arc::new(cfg.model.rope_table());
    let batches = minibatches(shard, cfg.batch_size);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    cfg.root_rng()
        .derive("order", round as u64)
        .derive("client", shard.client_id)
        .shuffle(&mut order);

    let mut params = start.clone();
    let mut opt = Adam::new(cfg.lr);
    let mut loss_total = 0.0f64;
    let mut token_total = 0u64;
    for step in 0..cfg.local_steps {
        let batch = &batches[order[step % order.len()]];
        let (loss, grads) = ce_loss_and_grads(&params, &cfg.model, &rope, batch);
        opt.step(&mut params, &grads);
        loss_total += loss * batch.n_tokens() as f64;
        token_total += batch.n_tokens() as u64;
    }
    ClientUpdate {
        client_id: shard.client_id,
        round,
        n_tokens: token_total,
        mean_loss: loss_total / token_total as f64,
        params,
    }
}

/// Token-weighted federated average. Updates are sorted by client id and
/// accumulated in f64, so the result does not depend on arrival order.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<NamedTensors> {
    if updates.is_empty() {
        return Err(Error::Protocol("fedavg over zero updates".into()));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    for w in sorted.windows(2) {
        if w[0].client_id == w[1].client_id {
            return Err(Error::Protocol(format!(
                "duplicate update from client {}",
                w[0].client_id
            )));
        }
    }
    for u in &sorted {
        sorted[0].params.check_congruent(&u.params)?;
        if u.n_tokens == 0 {
            return Err(Error::Protocol(format!(
                "client {} reports zero tokens",
                u.client_id
            )));
        }
    }

    let total: f64 = sorted.iter().map(|u| u.n_tokens as f64).sum();
    let mut out = NamedTensors::new();
    for (name, first) in sorted[0].params.iter() {
        let mut acc = vec![0.0f64; first.numel()];
        for u in &sorted {
            let w = u.n_tokens as f64 / total;
            for (a, &v) in acc.iter_mut().zip(u.params.get(name).unwrap().data().iter()) {
                *a += w * v as f64;
            }
        }
        let mut t = first.clone();
        for (o, &a) in t.data_mut().iter_mut().zip(acc.iter()) {
            *o = a as f32;
        }
        out.insert(name.clone(), t);
    }
    Ok(out)
}

/// Full in-process federated training run.
pub fn run_training(cfg: &FedConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let rope = Arc::new(cfg.model.rope_table());
    let shards: Vec<Shard> = (0..cfg.n_clients).map(|c| cfg.client_shard(c)).collect();
    let eval_batches = cfg.eval_batches();

    let mut params = cfg.init_params();
    let mut history = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds as u32 {
        let updates: Vec<ClientUpdate> = shards
            .iter()
            .map(|s| local_train(cfg, &params, s, round))
            .collect();
        params = fedavg(&updates)?;
        history.push(round_stats(cfg, round, &updates, &params, &rope, &eval_batches));
    }
    Ok(TrainOutcome { params, history })
}

pub fn round_stats(
    cfg: &FedConfig,
    round: u32,
    updates: &[ClientUpdate],
    params: &NamedTensors,
    rope: &Arc<RopeTable>,
    eval_batches: &[Batch],
) -> RoundStats {
    let total: f64 = updates.iter().map(|u| u.n_tokens as f64).sum();
    let mean_local_loss = updates
        .iter()
        .map(|u| u.mean_loss * u.n_tokens as f64)
        .sum::<f64>()
        / total;
    RoundStats {
        round,
        mean_local_loss,
        eval: eval_nll(params, &cfg.model, rope, eval_batches),
    }
}

// ---- unlearning ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub objective: Objective,
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub forget_client: u64,
}

impl UnlearnConfig {
    pub fn validate(&self, fed: &FedConfig) -> Result<()> {
        self.objective.validate()?;
        if self.forget_client >= fed.n_clients {
            return Err(Error::Config(format!(
                "forget_client {} out of range ({} clients)",
                self.forget_client, fed.n_clients
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if fed.n_clients < 2 && self.objective.needs_retain() {
            return Err(Error::Config(
                "grad_diff needs at least one retain client".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnStep {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub params: NamedTensors,
    pub history: Vec<UnlearnStep>,
}

/// Post-hoc unlearning of one client from a trained model. The starting
/// parameters double as the frozen reference for objectives that need one.
pub fn run_unlearning(
    fed: &FedConfig,
    ucfg: &UnlearnConfig,
    start: &NamedTensors,
) -> Result<UnlearnOutcome> {
    fed.validate()?;
    ucfg.validate(fed)?;
    let rope = Arc::new(fed.model.rope_table());
    let reference = start.clone();

    let forget_batches = minibatches(&fed.client_shard(ucfg.forget_client), ucfg.batch_size);
    let retain_batches: Vec<Batch> = if ucfg.objective.needs_retain() {
        let mut all = Vec::new();
        for c in (0..fed.n_clients).filter(|&c| c != ucfg.forget_client) {
            all.extend(minibatches(&fed.client_shard(c), ucfg.batch_size));
        }
        all
    } else {
        Vec::new()
    };

    let mut order: Vec<usize> = (0..forget_batches.len()).collect();
    fed.root_rng().derive("unlearn-order", 0).shuffle(&mut order);

    let mut params = start.clone();
    let mut opt = Adam::new(ucfg.lr);
    let mut history = Vec::with_capacity(ucfg.steps);
    for step in 0..ucfg.steps {
        let forget = &forget_batches[order[step % order.len()]];
        let retain = if retain_batches.is_empty() {
            None
        } else {
            Some(&retain_batches[step % retain_batches.len()])
        };
        let (loss, grads) = unlearn_loss_and_grads(
            &ucfg.objective,
            &params,
            Some(&reference),
            &fed.model,
            &rope,
            forget,
            retain,
        )?;
        opt.step(&mut params, &grads);
        history.push(UnlearnStep { step, loss });
    }
    Ok(UnlearnOutcome { params, history })
}
