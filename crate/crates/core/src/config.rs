//! Fully resolved experiment description.
//!
//! Every field is explicit after parsing; serializing one of these is the
//! provenance sidecar written next to each run's outputs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::aggregate::AggregatorSpec;
use crate::attack::AttackSpec;
use crate::engine::LocalTrainConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSpec {
    Synthetic {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        spread: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PartitionSpec {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logreg,
    Mlp2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub rounds: usize,
    pub out_dir: PathBuf,
    pub clients: usize,
    /// Clients sampled per round (h).
    pub sampled_per_round: usize,
    pub attack_ratio: f64,
    pub data: DataSpec,
    pub partition: PartitionSpec,
    pub model: ModelKind,
    /// Hidden width for the two-layer model; ignored by logreg.
    pub hidden: usize,
    pub training: LocalTrainConfig,
    /// Log the benign-average full-batch gradient norm each round
    /// (expensive; needed by the resilience audit).
    pub log_benign_gradient: bool,
    pub aggregator: AggregatorSpec,
    pub attack: Option<AttackSpec>,
    pub kappa_trials: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("clients must be positive".into()));
        }
        if self.sampled_per_round == 0 || self.sampled_per_round > self.clients {
            return Err(Error::Config(format!(
                "sampled_per_round = {} must be in [1, clients = {}]",
                self.sampled_per_round, self.clients
            )));
        }
        if !(0.0..0.5).contains(&self.attack_ratio) {
            return Err(Error::Config(format!(
                "attack_ratio = {} rejected: malicious clients must stay below half (f < n/2)",
                self.attack_ratio
            )));
        }
        self.training.validate()?;
        if let Some(attack) = &self.attack {
            attack.validate()?;
        }
        match &self.data {
            DataSpec::Synthetic {
                classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
            } => {
                if *classes < 2 || *dim < *classes {
                    return Err(Error::Config(
                        "synthetic data needs classes >= 2 and dim >= classes".into(),
                    ));
                }
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::Config("synthetic data needs samples per class".into()));
                }
                if !(*spread >= 0.0) {
                    return Err(Error::Config("spread must be nonnegative".into()));
                }
            }
            DataSpec::Idx { .. } => {}
        }
        if let PartitionSpec::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0) {
                return Err(Error::Config("dirichlet alpha must be positive".into()));
            }
        }
        if self.model == ModelKind::Mlp2 && self.hidden == 0 {
            return Err(Error::Config("mlp2 needs a positive hidden width".into()));
        }
        Ok(())
    }
}
