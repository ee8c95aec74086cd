//! Evaluation and theory checking: filtering accuracy, empirical
//! robustness-coefficient estimation and its closed-form bound audit.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregate::{AggregationOutcome, AggregatorSpec, AggregatorState};
use crate::attack::{generate_for_round, AttackContext, AttackSpec};
use crate::data::{self, ClientShard, Dataset};
use crate::engine::{local_update, LocalTrainConfig, RoundRecord};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelState};
use crate::seeds;
use crate::update::{ClientId, LayeredUpdate, UpdateBatch};

/// Filtering accuracy of one aggregation outcome against ground truth.
///
/// The classification unit is the (client, layer) pair: a pair is flagged
/// iff the client was excluded from that layer's selection set. The
/// client-level rates flag a client iff it was excluded in at least half
/// the layers.
#[derive(Debug, Clone, Serialize)]
pub struct FilterStats {
    pub tpr: f64,
    pub fpr: f64,
    pub client_tpr: f64,
    pub client_fpr: f64,
    pub per_layer_excluded: Vec<BTreeSet<ClientId>>,
}

pub fn filter_stats(
    outcome: &AggregationOutcome,
    truth: &BTreeMap<ClientId, bool>,
) -> Result<FilterStats> {
    for id in &outcome.participants {
        if !truth.contains_key(id) {
            return Err(Error::invalid(format!("client {id} missing from the honesty map")));
        }
    }
    let layers = outcome.selected.len();
    let per_layer_excluded: Vec<BTreeSet<ClientId>> = outcome
        .selected
        .iter()
        .map(|sel| {
            outcome
                .participants
                .iter()
                .copied()
                .filter(|id| !sel.contains(id))
                .collect()
        })
        .collect();

    let mut flagged_malicious = 0usize;
    let mut flagged_benign = 0usize;
    let mut malicious_pairs = 0usize;
    let mut benign_pairs = 0usize;
    let mut client_flagged_malicious = 0usize;
    let mut client_flagged_benign = 0usize;
    let mut malicious_clients = 0usize;
    let mut benign_clients = 0usize;

    for &id in &outcome.participants {
        let honest = truth[&id];
        let excluded_in = per_layer_excluded.iter().filter(|e| e.contains(&id)).count();
        if honest {
            benign_pairs += layers;
            flagged_benign += excluded_in;
            benign_clients += 1;
            client_flagged_benign += usize::from(2 * excluded_in >= layers);
        } else {
            malicious_pairs += layers;
            flagged_malicious += excluded_in;
            malicious_clients += 1;
            client_flagged_malicious += usize::from(2 * excluded_in >= layers);
        }
    }

    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(FilterStats {
        tpr: rate(flagged_malicious, malicious_pairs),
        fpr: rate(flagged_benign, benign_pairs),
        client_tpr: rate(client_flagged_malicious, malicious_clients),
        client_fpr: rate(client_flagged_benign, benign_clients),
        per_layer_excluded,
    })
}

/// Measured quantities feeding the closed-form robustness bound.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KappaInputs {
    /// Mean kept energy fraction of benign updates under the rule's Top-k.
    pub kept_energy: f64,
    /// Mean dropped energy fraction.
    pub dropped_energy: f64,
    /// Empirical per-client gradient variance at the scenario iterate.
    pub grad_variance: f64,
    /// Empirical inter-client gradient divergence at the scenario iterate.
    pub heterogeneity: f64,
    /// Max squared norm over benign updates.
    pub benign_norm_sq: f64,
    /// Max squared norm over malicious updates that survived filtering.
    pub malicious_norm_sq: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KappaTrial {
    pub sq_error: f64,
    pub bound: f64,
    pub preconditions_held: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct KappaReport {
    /// Monte Carlo estimate of `E |F(x) - mean(benign)|²`.
    pub empirical_kappa: f64,
    /// Mean of the per-trial closed-form bounds.
    pub bound: f64,
    pub inputs: KappaInputs,
    pub trials: Vec<KappaTrial>,
    pub trials_with_preconditions: usize,
    pub trials_within_bound: usize,
}

/// A fixed tiny problem that trials draw honest updates from: a small
/// mixture split over `n` clients, the first-drawn `f` of them malicious,
/// trained for a couple of momentum-free steps so the closed-form bound's
/// update model applies.
pub struct KappaScenario {
    pub dataset: Dataset,
    pub shards: Vec<ClientShard>,
    pub malicious_ids: Vec<ClientId>,
    pub model: ModelState,
    pub train_cfg: LocalTrainConfig,
    pub n: usize,
    pub f: usize,
}

impl KappaScenario {
    pub fn new(n: usize, f: usize, seed: u64) -> Result<Self> {
        if n < 2 || 2 * f >= n {
            return Err(Error::invalid(format!(
                "scenario needs n > 1 and f < n/2, got n = {n}, f = {f}"
            )));
        }
        let dataset = data::synth_gaussian_mixture(8, 16, 15, 0.6, seed ^ 0xD1)?;
        let mut shards = data::partition_iid(&dataset, n, seed ^ 0xD2)?;
        let mut pick = seeds::stream(seed, seeds::DOMAIN_MARK, 0, 0);
        let malicious: BTreeSet<usize> =
            rand::seq::index::sample(&mut pick, n, f).into_iter().collect();
        for shard in shards.iter_mut() {
            shard.honest = !malicious.contains(&shard.client_id);
        }
        let mut init_rng = seeds::stream(seed, seeds::DOMAIN_INIT, 0, 0);
        let model = ModelState::init(
            Architecture::Logreg {
                inputs: dataset.dim(),
                classes: dataset.num_classes(),
            },
            &mut init_rng,
        )?;
        // lr <= 1/(2 * local_steps) keeps the bound's precondition valid.
        let train_cfg = LocalTrainConfig {
            local_steps: 2,
            lr: 0.1,
            momentum: 0.0,
            lr_decay: 1.0,
            batch_size: 8,
            clip: None,
        };
        Ok(KappaScenario {
            dataset,
            shards,
            malicious_ids: malicious.into_iter().collect(),
            model,
            train_cfg,
            n,
            f,
        })
    }

    fn benign_shards(&self) -> impl Iterator<Item = &ClientShard> {
        self.shards.iter().filter(|s| s.honest)
    }

    /// Gradient variance and inter-client divergence measured once at the
    /// scenario iterate with extra full-batch and minibatch evaluations.
    fn measure_gradient_stats(&self, seed: u64) -> Result<(f64, f64)> {
        let benign: Vec<&ClientShard> = self.benign_shards().collect();
        let full: Vec<LayeredUpdate> = benign
            .iter()
            .map(|s| Ok(self.model.forward_backward(&self.dataset, &s.indices)?.1))
            .collect::<Result<_>>()?;
        let mut mean = vec![0.0; self.model.values().len()];
        for g in &full {
            for (m, v) in mean.iter_mut().zip(g.values()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= benign.len() as f64;
        }
        let heterogeneity = full
            .iter()
            .map(|g| {
                g.values()
                    .iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / benign.len() as f64;

        let draws = 50;
        let mut variance = 0.0;
        for (i, shard) in benign.iter().enumerate() {
            let mut rng = seeds::stream(seed, seeds::DOMAIN_TRIAL, (1 << 20) + i as u64, 0);
            let mut acc = 0.0;
            for _ in 0..draws {
                let idx: Vec<usize> = (0..self.train_cfg.batch_size)
                    .map(|_| shard.indices[rng.random_range(0..shard.indices.len())])
                    .collect();
                let (_, g) = self.model.forward_backward(&self.dataset, &idx)?;
                acc += g
                    .values()
                    .iter()
                    .zip(full[i].values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            variance += acc / draws as f64;
        }
        Ok((variance / benign.len() as f64, heterogeneity))
    }
}

/// The sparsifier kept-count an aggregation rule applies, if any.
fn rule_kept_count(agg: &AggregatorSpec, d: usize) -> usize {
    match agg {
        AggregatorSpec::Lasa(p) => p.sparsification.kept_for_dim(d),
        AggregatorSpec::Sparsefed { level, .. } => level.kept_for_dim(d),
        _ => d,
    }
}

/// Closed-form robustness bound with measured inputs:
/// `2 c_k (1 + f/(n-2f)) (2ν + ζ + 2C_m² + 2C²) + b_k C²`.
pub fn kappa_bound(n: usize, f: usize, inputs: &KappaInputs) -> f64 {
    let amplification = 1.0 + f as f64 / (n as f64 - 2.0 * f as f64);
    2.0 * inputs.kept_energy
        * amplification
        * (2.0 * inputs.grad_variance
            + inputs.heterogeneity
            + 2.0 * inputs.malicious_norm_sq
            + 2.0 * inputs.benign_norm_sq)
        + inputs.dropped_energy * inputs.benign_norm_sq
}

/// Monte Carlo estimate of the robustness coefficient of `agg` on the
/// scenario, with the per-trial bound audit.
pub fn estimate_kappa(
    agg: &AggregatorSpec,
    scenario: &KappaScenario,
    attack: Option<&AttackSpec>,
    trials: usize,
    seed: u64,
) -> Result<KappaReport> {
    if trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    let (grad_variance, heterogeneity) = scenario.measure_gradient_stats(seed)?;
    let d = scenario.model.layout().total_len();
    let kept_count = rule_kept_count(agg, d);
    let n = scenario.n;
    let f = scenario.f;
    let lr_precondition =
        scenario.train_cfg.lr <= 1.0 / (2.0 * scenario.train_cfg.local_steps as f64);

    let run_trial = |t: usize| -> Result<(KappaTrial, KappaInputs)> {
        let honest: Vec<LayeredUpdate> = scenario
            .shards
            .iter()
            .map(|shard| {
                let mut rng =
                    seeds::stream(seed, seeds::DOMAIN_TRIAL, t as u64, shard.client_id as u64);
                local_update(
                    &scenario.model,
                    &scenario.dataset,
                    shard,
                    &scenario.train_cfg,
                    scenario.train_cfg.lr,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;

        let benign_idx: Vec<usize> = scenario
            .shards
            .iter()
            .enumerate()
            .filter(|(_, s)| s.honest)
            .map(|(i, _)| i)
            .collect();
        let benign_batch = UpdateBatch::new(
            benign_idx.iter().map(|&i| honest[i].clone()).collect(),
            benign_idx.iter().map(|&i| scenario.shards[i].client_id).collect(),
        )?;

        let mut submitted = honest;
        if let (Some(attack), true) = (attack, f > 0) {
            let malicious_honest = UpdateBatch::new(
                scenario.malicious_ids.iter().map(|&id| submitted[id].clone()).collect(),
                scenario.malicious_ids.clone(),
            )?;
            let ctx = AttackContext {
                benign: &benign_batch,
                malicious_ids: &scenario.malicious_ids,
                malicious_honest: &malicious_honest,
                stream_seed: seed,
                stream_tag: t as u64,
            };
            let crafted = generate_for_round(attack, &ctx)?;
            for (&id, update) in scenario.malicious_ids.iter().zip(crafted) {
                submitted[id] = update;
            }
        }

        let benign_mean = crate::aggregate::fedavg(&benign_batch)?.aggregate;
        let benign_norm_sq = benign_batch
            .updates()
            .iter()
            .map(|u| u.sq_norm())
            .fold(0.0f64, f64::max);

        let batch = UpdateBatch::new(submitted.clone(), (0..n).collect())?;
        let mut state = AggregatorState::default();
        let outcome = agg.apply(&batch, &mut state)?;
        let sq_error = outcome.aggregate.sub(&benign_mean)?.sq_norm();

        let malicious_norm_sq = scenario
            .malicious_ids
            .iter()
            .filter(|id| outcome.selected.iter().any(|sel| sel.contains(id)))
            .map(|&id| submitted[id].sq_norm())
            .fold(0.0f64, f64::max);

        let (kept_energy, dropped_energy) = if kept_count == d {
            (1.0, 0.0)
        } else {
            let mut kept = 0.0;
            let mut dropped = 0.0;
            let mut measured = 0usize;
            for u in benign_batch.updates() {
                if u.sq_norm() == 0.0 {
                    continue;
                }
                let split = crate::sparsify::energy_split(u.values(), kept_count)?;
                kept += split.kept;
                dropped += split.dropped;
                measured += 1;
            }
            if measured == 0 {
                (1.0, 0.0)
            } else {
                (kept / measured as f64, dropped / measured as f64)
            }
        };

        let inputs = KappaInputs {
            kept_energy,
            dropped_energy,
            grad_variance,
            heterogeneity,
            benign_norm_sq,
            malicious_norm_sq,
        };
        let min_selected = outcome.selected.iter().map(|s| s.len()).min().unwrap_or(0);
        let preconditions_held =
            lr_precondition && (min_selected as f64) >= n as f64 / 2.0 - f as f64;
        Ok((
            KappaTrial {
                sq_error,
                bound: kappa_bound(n, f, &inputs),
                preconditions_held,
            },
            inputs,
        ))
    };

    let results: Vec<(KappaTrial, KappaInputs)> = (0..trials)
        .into_par_iter()
        .map(run_trial)
        .collect::<Result<_>>()?;

    let empirical_kappa = results.iter().map(|(t, _)| t.sq_error).sum::<f64>() / trials as f64;
    let bound = results.iter().map(|(t, _)| t.bound).sum::<f64>() / trials as f64;
    let mean_inputs = KappaInputs {
        kept_energy: results.iter().map(|(_, i)| i.kept_energy).sum::<f64>() / trials as f64,
        dropped_energy: results.iter().map(|(_, i)| i.dropped_energy).sum::<f64>() / trials as f64,
        grad_variance,
        heterogeneity,
        benign_norm_sq: results.iter().map(|(_, i)| i.benign_norm_sq).sum::<f64>() / trials as f64,
        malicious_norm_sq: results.iter().map(|(_, i)| i.malicious_norm_sq).sum::<f64>()
            / trials as f64,
    };
    let trials_with_preconditions = results.iter().filter(|(t, _)| t.preconditions_held).count();
    let trials_within_bound = results
        .iter()
        .filter(|(t, _)| t.preconditions_held && t.sq_error <= t.bound)
        .count();
    Ok(KappaReport {
        empirical_kappa,
        bound,
        inputs: mean_inputs,
        trials: results.into_iter().map(|(t, _)| t).collect(),
        trials_with_preconditions,
        trials_within_bound,
    })
}

/// Mean over rounds of the logged benign gradient squared norm.
pub fn resilience_audit(records: &[RoundRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no rounds to audit"));
    }
    let mut total = 0.0;
    for r in records {
        total += r.benign_grad_sq_norm.ok_or_else(|| {
            Error::invalid("gradient logging was not enabled for this run")
        })?;
    }
    Ok(total / records.len() as f64)
}
