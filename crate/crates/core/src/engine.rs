//! The federated training loop: client sampling, honest local SGD with
//! momentum, attack injection, aggregation and the global model step
//! `θ <- θ - Δ̄`.
//!
//! The whole trajectory is a pure function of (config, master seed). Local
//! updates of the sampled clients run in parallel on client-and-round-keyed
//! streams and are merged in client-id order, so thread scheduling never
//! changes the result.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregationOutcome, AggregatorSpec, AggregatorState};
use crate::attack::{generate_for_round, AttackContext, AttackSpec};
use crate::config::{DataSpec, ExperimentConfig, ModelKind, PartitionSpec};
use crate::data::{self, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelState};
use crate::seeds;
use crate::update::{ClientId, LayeredUpdate, UpdateBatch};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    /// Local SGD steps per round (τ).
    pub local_steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Per-round decay: the round-t learning rate is `lr * lr_decay^t`.
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Optional L2 bound on the local update.
    pub clip: Option<f64>,
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(Error::Config("local_steps must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must be in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config("clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Runs `local_steps` momentum-SGD steps from the global parameters and
/// returns `Δ = θ_start - θ_end` (η Σ g when momentum is zero). The global
/// model is not touched.
pub fn local_update(
    model: &ModelState,
    data: &Dataset,
    shard: &ClientShard,
    cfg: &LocalTrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LayeredUpdate> {
    if shard.indices.is_empty() {
        return Err(Error::invalid(format!("client {} has no data", shard.client_id)));
    }
    let mut local = model.clone();
    let mut velocity = vec![0.0; model.values().len()];
    let mut minibatch = Vec::with_capacity(cfg.batch_size);
    let mut delta = LayeredUpdate::zeros(model.layout().clone());
    let mut max_grad_norm: f64 = 0.0;
    for _ in 0..cfg.local_steps {
        minibatch.clear();
        for _ in 0..cfg.batch_size {
            minibatch.push(shard.indices[rng.random_range(0..shard.indices.len())]);
        }
        let (_, grad) = local.forward_backward(data, &minibatch)?;
        max_grad_norm = max_grad_norm.max(grad.norm());
        for (v, g) in velocity.iter_mut().zip(grad.values()) {
            *v = cfg.momentum * *v + g;
        }
        let step = LayeredUpdate::new(
            velocity.iter().map(|v| lr * v).collect(),
            model.layout().clone(),
        )?;
        local.apply_delta(&step)?;
        delta = delta.add(&step)?;
    }
    // Triangle inequality on the accumulated steps.
    debug_assert!(
        cfg.momentum != 0.0
            || delta.norm() <= lr * cfg.local_steps as f64 * max_grad_norm * (1.0 + 1e-9) + 1e-12,
        "update norm exceeds its per-step bound"
    );
    if let Some(bound) = cfg.clip {
        let norm = delta.norm();
        if norm > bound {
            delta = delta.scale(bound / norm)?;
        }
    }
    Ok(delta)
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled: Vec<ClientId>,
    pub outcome: AggregationOutcome,
    pub test_accuracy: f64,
    pub train_loss: f64,
    /// `|∇L_B(θ)|²` at the round's starting iterate, when logging is on.
    pub benign_grad_sq_norm: Option<f64>,
}

/// Immutable per-run context shared by all rounds.
pub struct FlRuntime<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub shards: &'a [ClientShard],
    pub training: &'a LocalTrainConfig,
    pub sampled_per_round: usize,
    pub aggregator: &'a AggregatorSpec,
    pub attack: Option<&'a AttackSpec>,
    pub master_seed: u64,
    pub log_benign_gradient: bool,
}

pub fn run_round(
    rt: &FlRuntime,
    model: &mut ModelState,
    agg_state: &mut AggregatorState,
    round: usize,
) -> Result<RoundRecord> {
    let n = rt.shards.len();
    let h = rt.sampled_per_round;
    let mut sample_rng = seeds::stream(rt.master_seed, seeds::DOMAIN_SAMPLE, round as u64, 0);
    let mut sampled: Vec<ClientId> =
        rand::seq::index::sample(&mut sample_rng, n, h).into_iter().collect();
    sampled.sort_unstable();

    let lr = rt.training.lr * rt.training.lr_decay.powi(round as i32);
    let benign_grad_sq_norm = if rt.log_benign_gradient {
        Some(benign_gradient_sq_norm(model, rt.train, rt.shards)?)
    } else {
        None
    };

    // Every sampled client first behaves honestly; attacks only replace
    // what the malicious ones submit.
    let honest: Vec<LayeredUpdate> = sampled
        .par_iter()
        .map(|&id| {
            let mut rng = seeds::stream(rt.master_seed, seeds::DOMAIN_LOCAL, round as u64, id as u64);
            local_update(model, rt.train, &rt.shards[id], rt.training, lr, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut submitted = honest;
    if let Some(attack) = rt.attack {
        let malicious: Vec<usize> = (0..sampled.len())
            .filter(|&i| !rt.shards[sampled[i]].honest)
            .collect();
        let benign: Vec<usize> = (0..sampled.len())
            .filter(|&i| rt.shards[sampled[i]].honest)
            .collect();
        if !malicious.is_empty() && !benign.is_empty() {
            let benign_batch = UpdateBatch::new(
                benign.iter().map(|&i| submitted[i].clone()).collect(),
                benign.iter().map(|&i| sampled[i]).collect(),
            )?;
            let malicious_ids: Vec<ClientId> = malicious.iter().map(|&i| sampled[i]).collect();
            let malicious_honest = UpdateBatch::new(
                malicious.iter().map(|&i| submitted[i].clone()).collect(),
                malicious_ids.clone(),
            )?;
            let ctx = AttackContext {
                benign: &benign_batch,
                malicious_ids: &malicious_ids,
                malicious_honest: &malicious_honest,
                stream_seed: rt.master_seed,
                stream_tag: round as u64,
            };
            let crafted = generate_for_round(attack, &ctx)?;
            for (slot, update) in malicious.iter().zip(crafted) {
                submitted[*slot] = update;
            }
        }
    }

    let batch = UpdateBatch::new(submitted, sampled.clone())?;
    let outcome = rt.aggregator.apply(&batch, agg_state)?;
    model.apply_delta(&outcome.aggregate)?;

    Ok(RoundRecord {
        round,
        sampled,
        outcome,
        test_accuracy: model.accuracy(rt.test),
        train_loss: model.mean_loss(rt.train),
        benign_grad_sq_norm,
    })
}

/// `|∇L_B(θ)|²`: squared norm of the benign clients' average full-batch
/// gradient at the current iterate.
fn benign_gradient_sq_norm(
    model: &ModelState,
    train: &Dataset,
    shards: &[ClientShard],
) -> Result<f64> {
    let benign: Vec<&ClientShard> = shards.iter().filter(|s| s.honest).collect();
    if benign.is_empty() {
        return Err(Error::invalid("no benign clients to audit"));
    }
    let mut acc = vec![0.0; model.values().len()];
    for shard in &benign {
        let (_, grad) = model.forward_backward(train, &shard.indices)?;
        for (a, g) in acc.iter_mut().zip(grad.values()) {
            *a += g;
        }
    }
    let inv = benign.len() as f64;
    Ok(acc.iter().map(|a| (a * inv.recip()) * (a * inv.recip())).sum())
}

pub struct ExperimentResult {
    pub records: Vec<RoundRecord>,
    /// Client id -> honest flag, for filter scoring.
    pub honesty: BTreeMap<ClientId, bool>,
    pub final_model: ModelState,
    pub layer_count: usize,
}

pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSpec::Synthetic {
            classes,
            dim,
            train_per_class,
            test_per_class,
            spread,
        } => {
            let train_seed = seeds::derive_seed(cfg.seed, seeds::DOMAIN_DATASET, 0);
            let test_seed = seeds::derive_seed(cfg.seed, seeds::DOMAIN_DATASET, 1);
            Ok((
                data::synth_gaussian_mixture(*classes, *dim, *train_per_class, *spread, train_seed)?,
                data::synth_gaussian_mixture(*classes, *dim, *test_per_class, *spread, test_seed)?,
            ))
        }
        DataSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            data::load_idx(train_images, train_labels)?,
            data::load_idx(test_images, test_labels)?,
        )),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (train, test) = build_datasets(cfg)?;

    let shards = match cfg.partition {
        PartitionSpec::Iid => {
            data::partition_iid(&train, cfg.clients, seeds::derive_seed(cfg.seed, seeds::DOMAIN_PARTITION, 0))?
        }
        PartitionSpec::Dirichlet { alpha } => data::partition_dirichlet(
            &train,
            cfg.clients,
            alpha,
            seeds::derive_seed(cfg.seed, seeds::DOMAIN_PARTITION, 0),
        )?,
    };
    let shards = data::mark_malicious(
        shards,
        cfg.attack_ratio,
        seeds::derive_seed(cfg.seed, seeds::DOMAIN_MARK, 0),
    )?;

    let arch = match cfg.model {
        ModelKind::Logreg => Architecture::Logreg {
            inputs: train.dim(),
            classes: train.num_classes(),
        },
        ModelKind::Mlp2 => Architecture::Mlp2 {
            inputs: train.dim(),
            hidden: cfg.hidden,
            classes: train.num_classes(),
        },
    };
    let mut init_rng = seeds::stream(cfg.seed, seeds::DOMAIN_INIT, 0, 0);
    let mut model = ModelState::init(arch, &mut init_rng)?;
    let layer_count = model.layout().layer_count();

    let rt = FlRuntime {
        train: &train,
        test: &test,
        shards: &shards,
        training: &cfg.training,
        sampled_per_round: cfg.sampled_per_round,
        aggregator: &cfg.aggregator,
        attack: cfg.attack.as_ref(),
        master_seed: cfg.seed,
        log_benign_gradient: cfg.log_benign_gradient,
    };
    let mut agg_state = AggregatorState::default();
    let mut records = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        records.push(run_round(&rt, &mut model, &mut agg_state, round)?);
    }

    Ok(ExperimentResult {
        records,
        honesty: shards.iter().map(|s| (s.client_id, s.honest)).collect(),
        final_model: model,
        layer_count,
    })
}
