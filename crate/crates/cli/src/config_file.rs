//! TOML experiment configs: a flat document with one level of sections.
//!
//! Parsing is strict: unknown keys, type mismatches and invariant
//! violations are errors carrying the offending key path. Omitted filter
//! parameters get the documented defaults, and the resolved config is
//! always written back as a sidecar so no run depends on implicit values.

use std::path::PathBuf;

use serde::Deserialize;

use lasa_core::
    aggregate::{AggregatorSpec, LasaParams};
use lasa_core::attack::{AttackKind, AttackSpec};
use lasa_core::config::{DataSpec, ExperimentConfig, ModelKind, PartitionSpec};
use lasa_core::engine::LocalTrainConfig;
use lasa_core::sparsify::SparsificationLevel;
use lasa_core::{Error, Result};

pub const DEFAULT_SPARSIFICATION_LEVEL: f64 = 0.3;
pub const DEFAULT_DIRECTION_RADIUS: f64 = 1.0;

/// The magnitude radius default follows the dataset: 2.0 for every desk
/// task here (smaller radii only pay off on harder image tasks).
pub fn default_magnitude_radius(_data: &DataSpec) -> f64 {
    2.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: Option<String>,
    seed: u64,
    rounds: usize,
    out: Option<PathBuf>,
    data: RawData,
    partition: RawPartition,
    training: RawTraining,
    aggregator: RawAggregator,
    attack: Option<RawAttack>,
    kappa: Option<RawKappa>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    kind: String,
    classes: Option<usize>,
    dim: Option<usize>,
    train_per_class: Option<usize>,
    test_per_class: Option<usize>,
    spread: Option<f64>,
    train_images: Option<PathBuf>,
    train_labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPartition {
    kind: String,
    alpha: Option<f64>,
    clients: usize,
    attack_ratio: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    model: String,
    hidden: Option<usize>,
    sampled_per_round: usize,
    local_steps: usize,
    lr: f64,
    momentum: Option<f64>,
    lr_decay: Option<f64>,
    batch_size: usize,
    clip: Option<f64>,
    log_benign_gradient: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAggregator {
    kind: String,
    sparsification_level: Option<f64>,
    lambda_m: Option<f64>,
    lambda_d: Option<f64>,
    trim_per_side: Option<usize>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    assumed_byzantine: Option<usize>,
    select: Option<usize>,
    clip: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    kind: String,
    sigma: Option<f64>,
    z: Option<f64>,
    base: Option<String>,
    stealthy: Option<bool>,
    trim_per_side: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKappa {
    trials: Option<usize>,
}

fn reject_unused(section: &str, unused: &[(&str, bool)]) -> Result<()> {
    for (key, set) in unused {
        if *set {
            return Err(Error::Config(format!(
                "{section}.{key} does not apply to this {section} kind"
            )));
        }
    }
    Ok(())
}

/// Parses and fully resolves a config document. `default_name` is used
/// when the document does not name itself (the CLI passes the file stem).
pub fn parse_config(text: &str, default_name: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;

    let data = match raw.data.kind.as_str() {
        "synthetic" => {
            reject_unused(
                "data",
                &[
                    ("train_images", raw.data.train_images.is_some()),
                    ("train_labels", raw.data.train_labels.is_some()),
                    ("test_images", raw.data.test_images.is_some()),
                    ("test_labels", raw.data.test_labels.is_some()),
                ],
            )?;
            DataSpec::Synthetic {
                classes: raw.data.classes.unwrap_or(10),
                dim: raw.data.dim.unwrap_or(16),
                train_per_class: raw.data.train_per_class.unwrap_or(100),
                test_per_class: raw.data.test_per_class.unwrap_or(25),
                spread: raw.data.spread.unwrap_or(0.5),
            }
        }
        "idx" => {
            reject_unused(
                "data",
                &[
                    ("classes", raw.data.classes.is_some()),
                    ("dim", raw.data.dim.is_some()),
                    ("train_per_class", raw.data.train_per_class.is_some()),
                    ("test_per_class", raw.data.test_per_class.is_some()),
                    ("spread", raw.data.spread.is_some()),
                ],
            )?;
            let path = |p: Option<PathBuf>, key: &str| {
                p.ok_or_else(|| Error::Config(format!("data.{key} is required for idx data")))
            };
            DataSpec::Idx {
                train_images: path(raw.data.train_images, "train_images")?,
                train_labels: path(raw.data.train_labels, "train_labels")?,
                test_images: path(raw.data.test_images, "test_images")?,
                test_labels: path(raw.data.test_labels, "test_labels")?,
            }
        }
        other => {
            return Err(Error::Config(format!("data.kind: unknown dataset kind `{other}`")));
        }
    };

    let partition = match raw.partition.kind.as_str() {
        "iid" => {
            reject_unused("partition", &[("alpha", raw.partition.alpha.is_some())])?;
            PartitionSpec::Iid
        }
        "dirichlet" => PartitionSpec::Dirichlet {
            alpha: raw.partition.alpha.unwrap_or(0.5),
        },
        other => {
            return Err(Error::Config(format!(
                "partition.kind: unknown partition kind `{other}`"
            )));
        }
    };

    let model = match raw.training.model.as_str() {
        "logreg" => ModelKind::Logreg,
        "mlp2" => ModelKind::Mlp2,
        other => {
            return Err(Error::Config(format!("training.model: unknown model `{other}`")));
        }
    };

    let attack_ratio = raw.partition.attack_ratio.unwrap_or(0.0);
    let sampled = raw.training.sampled_per_round;
    let assumed_byzantine_default = (attack_ratio * sampled as f64 * (1.0 + 1e-12)).floor() as usize;

    let agg = &raw.aggregator;
    let aggregator = match agg.kind.as_str() {
        "lasa" => {
            reject_unused(
                "aggregator",
                &[
                    ("trim_per_side", agg.trim_per_side.is_some()),
                    ("tol", agg.tol.is_some()),
                    ("max_iter", agg.max_iter.is_some()),
                    ("assumed_byzantine", agg.assumed_byzantine.is_some()),
                    ("select", agg.select.is_some()),
                    ("clip", agg.clip.is_some()),
                ],
            )?;
            let level = SparsificationLevel::new(
                agg.sparsification_level.unwrap_or(DEFAULT_SPARSIFICATION_LEVEL),
            )?;
            AggregatorSpec::Lasa(LasaParams::new(
                level,
                agg.lambda_m.unwrap_or_else(|| default_magnitude_radius(&data)),
                agg.lambda_d.unwrap_or(DEFAULT_DIRECTION_RADIUS),
            )?)
        }
        "fedavg" => {
            reject_unused("aggregator", &all_agg_params(agg))?;
            AggregatorSpec::Fedavg
        }
        "trmean" => {
            reject_unused(
                "aggregator",
                &[
                    ("sparsification_level", agg.sparsification_level.is_some()),
                    ("lambda_m", agg.lambda_m.is_some()),
                    ("lambda_d", agg.lambda_d.is_some()),
                    ("tol", agg.tol.is_some()),
                    ("max_iter", agg.max_iter.is_some()),
                    ("assumed_byzantine", agg.assumed_byzantine.is_some()),
                    ("select", agg.select.is_some()),
                    ("clip", agg.clip.is_some()),
                ],
            )?;
            AggregatorSpec::Trmean {
                trim_per_side: agg.trim_per_side.unwrap_or(assumed_byzantine_default),
            }
        }
        "geomed" => {
            reject_unused(
                "aggregator",
                &[
                    ("sparsification_level", agg.sparsification_level.is_some()),
                    ("lambda_m", agg.lambda_m.is_some()),
                    ("lambda_d", agg.lambda_d.is_some()),
                    ("trim_per_side", agg.trim_per_side.is_some()),
                    ("assumed_byzantine", agg.assumed_byzantine.is_some()),
                    ("select", agg.select.is_some()),
                    ("clip", agg.clip.is_some()),
                ],
            )?;
            AggregatorSpec::Geomed {
                tol: agg.tol.unwrap_or(1e-8),
                max_iter: agg.max_iter.unwrap_or(200),
            }
        }
        "multikrum" => {
            reject_unused(
                "aggregator",
                &[
                    ("sparsification_level", agg.sparsification_level.is_some()),
                    ("lambda_m", agg.lambda_m.is_some()),
                    ("lambda_d", agg.lambda_d.is_some()),
                    ("trim_per_side", agg.trim_per_side.is_some()),
                    ("tol", agg.tol.is_some()),
                    ("max_iter", agg.max_iter.is_some()),
                    ("clip", agg.clip.is_some()),
                ],
            )?;
            let f = agg.assumed_byzantine.unwrap_or(assumed_byzantine_default);
            AggregatorSpec::Multikrum {
                assumed_byzantine: f,
                select: agg.select.unwrap_or_else(|| sampled.saturating_sub(f).max(1)),
            }
        }
        "bulyan" => {
            reject_unused(
                "aggregator",
                &[
                    ("sparsification_level", agg.sparsification_level.is_some()),
                    ("lambda_m", agg.lambda_m.is_some()),
                    ("lambda_d", agg.lambda_d.is_some()),
                    ("trim_per_side", agg.trim_per_side.is_some()),
                    ("tol", agg.tol.is_some()),
                    ("max_iter", agg.max_iter.is_some()),
                    ("select", agg.select.is_some()),
                    ("clip", agg.clip.is_some()),
                ],
            )?;
            AggregatorSpec::Bulyan {
                assumed_byzantine: agg.assumed_byzantine.unwrap_or(assumed_byzantine_default),
            }
        }
        "sparsefed" => {
            reject_unused(
                "aggregator",
                &[
                    ("lambda_m", agg.lambda_m.is_some()),
                    ("lambda_d", agg.lambda_d.is_some()),
                    ("trim_per_side", agg.trim_per_side.is_some()),
                    ("tol", agg.tol.is_some()),
                    ("max_iter", agg.max_iter.is_some()),
                    ("assumed_byzantine", agg.assumed_byzantine.is_some()),
                    ("select", agg.select.is_some()),
                ],
            )?;
            AggregatorSpec::Sparsefed {
                level: SparsificationLevel::new(
                    agg.sparsification_level.unwrap_or(DEFAULT_SPARSIFICATION_LEVEL),
                )?,
                clip: agg.clip.unwrap_or(10.0),
            }
        }
        other => {
            return Err(Error::Config(format!(
                "aggregator.kind: unknown aggregator `{other}`"
            )));
        }
    };

    let attack = match raw.attack {
        None => None,
        Some(a) => {
            let mut spec = AttackSpec::new(AttackKind::from_key(&a.kind)?);
            if let Some(sigma) = a.sigma {
                spec.sigma = sigma;
            }
            if let Some(z) = a.z {
                spec.z = z;
            }
            if let Some(base) = a.base {
                spec.base = AttackKind::from_key(&base)?;
            }
            if let Some(stealthy) = a.stealthy {
                spec.stealthy = stealthy;
            }
            if let Some(trim) = a.trim_per_side {
                spec.trim_per_side = trim;
            }
            Some(spec)
        }
    };

    let config = ExperimentConfig {
        name: raw.name.unwrap_or_else(|| default_name.to_string()),
        seed: raw.seed,
        rounds: raw.rounds,
        out_dir: raw.out.unwrap_or_else(|| PathBuf::from("runs")),
        clients: raw.partition.clients,
        sampled_per_round: sampled,
        attack_ratio,
        data,
        partition,
        model,
        hidden: raw.training.hidden.unwrap_or(16),
        training: LocalTrainConfig {
            local_steps: raw.training.local_steps,
            lr: raw.training.lr,
            momentum: raw.training.momentum.unwrap_or(0.9),
            lr_decay: raw.training.lr_decay.unwrap_or(0.99),
            batch_size: raw.training.batch_size,
            clip: raw.training.clip,
        },
        log_benign_gradient: raw.training.log_benign_gradient.unwrap_or(false),
        aggregator,
        attack,
        kappa_trials: raw.kappa.and_then(|k| k.trials).unwrap_or(200),
    };
    config.validate()?;
    Ok(config)
}

fn all_agg_params(agg: &RawAggregator) -> Vec<(&'static str, bool)> {
    vec![
        ("sparsification_level", agg.sparsification_level.is_some()),
        ("lambda_m", agg.lambda_m.is_some()),
        ("lambda_d", agg.lambda_d.is_some()),
        ("trim_per_side", agg.trim_per_side.is_some()),
        ("tol", agg.tol.is_some()),
        ("max_iter", agg.max_iter.is_some()),
        ("assumed_byzantine", agg.assumed_byzantine.is_some()),
        ("select", agg.select.is_some()),
        ("clip", agg.clip.is_some()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(aggregator: &str, attack: &str) -> String {
        format!(
            r#"
seed = 7
rounds = 3

[data]
kind = "synthetic"

[partition]
kind = "iid"
clients = 10
attack_ratio = 0.2

[training]
model = "logreg"
sampled_per_round = 5
local_steps = 2
lr = 0.1
batch_size = 8

[aggregator]
kind = "{aggregator}"
{attack}"#
        )
    }

    #[test]
    fn defaults_are_applied() {
        let cfg = parse_config(&minimal("lasa", ""), "t").unwrap();
        match cfg.aggregator {
            AggregatorSpec::Lasa(p) => {
                assert_eq!(p.sparsification.level(), 0.3);
                assert_eq!(p.magnitude_radius, 2.0);
                assert_eq!(p.direction_radius, 1.0);
            }
            other => panic!("unexpected aggregator {other:?}"),
        }
        assert!(cfg.attack.is_none());
        assert_eq!(cfg.kappa_trials, 200);
        assert_eq!(cfg.name, "t");
    }

    #[test]
    fn attack_section_round_trips() {
        let cfg = parse_config(
            &minimal("fedavg", "\n[attack]\nkind = \"byzmean\"\nbase = \"signflip\"\n"),
            "t",
        )
        .unwrap();
        let attack = cfg.attack.unwrap();
        assert_eq!(attack.kind, AttackKind::Byzmean);
        assert_eq!(attack.base, AttackKind::Signflip);
        assert_eq!(attack.sigma, 0.5);
    }

    #[test]
    fn admissibility_and_key_errors_carry_paths() {
        let text = minimal("lasa", "").replace("attack_ratio = 0.2", "attack_ratio = 0.6");
        let err = parse_config(&text, "t").unwrap_err().to_string();
        assert!(err.contains("f < n/2"), "{err}");

        let text = minimal("lasa", "") + "\nbogus = 1\n";
        let err = parse_config(&text, "t").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");

        let text = minimal("fedavg", "").replace("kind = \"fedavg\"", "kind = \"fedavg\"\nlambda_m = 1.0");
        let err = parse_config(&text, "t").unwrap_err().to_string();
        assert!(err.contains("aggregator.lambda_m"), "{err}");

        let text = minimal("lasa", "").replace("lr = 0.1", "lr = \"fast\"");
        let err = parse_config(&text, "t").unwrap_err().to_string();
        assert!(err.contains("lr") || err.contains("invalid type"), "{err}");
    }
}
