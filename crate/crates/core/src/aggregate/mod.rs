//! Robust aggregation rules, each a pure function `UpdateBatch -> AggregationOutcome`.
//!
//! The layer-adaptive rule lives in [`lasa`]; classic baselines (trimmed
//! mean, geometric median, Multi-Krum, Bulyan, server-side sparsification
//! with error feedback) live in [`baselines`].

mod baselines;
mod lasa;

use std::collections::BTreeSet;

pub use baselines::{
    bulyan, fedavg, geometric_median, multi_krum, sparsefed_lite, trimmed_mean, ErrorFeedback,
    TrimParam,
};
pub use lasa::{lasa, LasaParams};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sparsify::SparsificationLevel;
use crate::update::{ClientId, LayeredUpdate, UpdateBatch};

/// Per-layer filter scores, indexed like the batch.
#[derive(Debug, Clone)]
pub struct LayerScores {
    pub magnitude: Vec<f64>,
    pub direction: Vec<f64>,
}

/// Aggregated update plus which clients each layer was averaged over.
#[derive(Debug, Clone)]
pub struct AggregationOutcome {
    pub aggregate: LayeredUpdate,
    /// Client ids of the input batch, in batch order.
    pub participants: Vec<ClientId>,
    /// Selected client-id set per layer; never empty.
    pub selected: Vec<BTreeSet<ClientId>>,
    /// Filter score tables per layer, for rules that compute them.
    pub diagnostics: Option<Vec<LayerScores>>,
}

impl AggregationOutcome {
    pub fn selected_counts(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.len()).collect()
    }

    pub(crate) fn with_all_selected(
        aggregate: LayeredUpdate,
        batch: &UpdateBatch,
    ) -> AggregationOutcome {
        let all: BTreeSet<ClientId> = batch.client_ids().iter().copied().collect();
        let layers = batch.layout().layer_count();
        AggregationOutcome {
            aggregate,
            participants: batch.client_ids().to_vec(),
            selected: vec![all; layers],
            diagnostics: None,
        }
    }
}

/// Per-coordinate mean over the batch rows named by `indices`, summed in
/// the given order. Callers pass ascending indices so that different
/// aggregation paths produce bit-identical means.
pub(crate) fn mean_over(batch: &UpdateBatch, indices: &[usize]) -> Vec<f64> {
    debug_assert!(!indices.is_empty());
    let d = batch.layout().total_len();
    let mut acc = vec![0.0; d];
    for &i in indices {
        for (a, v) in acc.iter_mut().zip(batch.update(i).values()) {
            *a += v;
        }
    }
    let inv = indices.len() as f64;
    for a in acc.iter_mut() {
        *a /= inv;
    }
    acc
}

/// A fully resolved aggregation rule, addressable by its config key.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AggregatorSpec {
    Lasa(LasaParams),
    Fedavg,
    Trmean {
        trim_per_side: usize,
    },
    Geomed {
        tol: f64,
        max_iter: usize,
    },
    Multikrum {
        assumed_byzantine: usize,
        select: usize,
    },
    Bulyan {
        assumed_byzantine: usize,
    },
    Sparsefed {
        level: SparsificationLevel,
        clip: f64,
    },
}

/// Mutable server-side state that survives across rounds.
#[derive(Debug, Default)]
pub struct AggregatorState {
    pub error_feedback: ErrorFeedback,
}

impl AggregatorSpec {
    pub fn key(&self) -> &'static str {
        match self {
            AggregatorSpec::Lasa(_) => "lasa",
            AggregatorSpec::Fedavg => "fedavg",
            AggregatorSpec::Trmean { .. } => "trmean",
            AggregatorSpec::Geomed { .. } => "geomed",
            AggregatorSpec::Multikrum { .. } => "multikrum",
            AggregatorSpec::Bulyan { .. } => "bulyan",
            AggregatorSpec::Sparsefed { .. } => "sparsefed",
        }
    }

    pub fn apply(
        &self,
        batch: &UpdateBatch,
        state: &mut AggregatorState,
    ) -> Result<AggregationOutcome> {
        match self {
            AggregatorSpec::Lasa(params) => lasa(batch, params),
            AggregatorSpec::Fedavg => fedavg(batch),
            AggregatorSpec::Trmean { trim_per_side } => {
                trimmed_mean(batch, TrimParam::new(*trim_per_side))
            }
            AggregatorSpec::Geomed { tol, max_iter } => geometric_median(batch, *tol, *max_iter),
            AggregatorSpec::Multikrum {
                assumed_byzantine,
                select,
            } => multi_krum(batch, *assumed_byzantine, *select),
            AggregatorSpec::Bulyan { assumed_byzantine } => bulyan(batch, *assumed_byzantine),
            AggregatorSpec::Sparsefed { level, clip } => {
                let keep = level.kept_for_dim(batch.layout().total_len());
                sparsefed_lite(batch, keep, *clip, &mut state.error_feedback)
            }
        }
    }
}
