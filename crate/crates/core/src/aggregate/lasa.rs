//! Layer-adaptive sparsified aggregation.
//!
//! Each update is Top-k sparsified over its whole flat vector, then every
//! layer is filtered independently: clients whose layer magnitude (L2) and
//! direction (sign purity) scores both sit within the configured radii of
//! the cohort median are averaged; the rest are dropped for that layer.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregationOutcome, LayerScores};
use crate::error::{Error, Result};
use crate::sparsify::{sparsify_update, SparsificationLevel};
use crate::stats::{mz_scores, pdp};
use crate::update::{l2_norm, LayeredUpdate, UpdateBatch};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LasaParams {
    pub sparsification: SparsificationLevel,
    /// Filtering radius on magnitude scores.
    pub magnitude_radius: f64,
    /// Filtering radius on direction scores.
    pub direction_radius: f64,
}

impl LasaParams {
    pub fn new(
        sparsification: SparsificationLevel,
        magnitude_radius: f64,
        direction_radius: f64,
    ) -> Result<Self> {
        if !(magnitude_radius > 0.0) || !(direction_radius > 0.0) {
            return Err(Error::invalid("filtering radii must be positive"));
        }
        Ok(LasaParams {
            sparsification,
            magnitude_radius,
            direction_radius,
        })
    }
}

pub fn lasa(batch: &UpdateBatch, params: &LasaParams) -> Result<AggregationOutcome> {
    let n = batch.n();
    let layers = batch.layout().layer_count();
    let ids = batch.client_ids();

    let sparsified: Vec<LayeredUpdate> = batch
        .updates()
        .iter()
        .map(|u| sparsify_update(u, params.sparsification))
        .collect();

    let mut aggregate = vec![0.0; batch.layout().total_len()];
    let mut selected = Vec::with_capacity(layers);
    let mut diagnostics = Vec::with_capacity(layers);

    for l in 0..layers {
        let spec = &batch.layout().specs()[l];
        let magnitudes: Vec<f64> = sparsified
            .iter()
            .map(|u| l2_norm(u.slice_layer(l).expect("valid layer")))
            .collect();
        let directions: Vec<f64> = sparsified
            .iter()
            .map(|u| pdp(u.slice_layer(l).expect("valid layer")).expect("nonempty layer"))
            .collect();
        let magnitude_scores = mz_scores(&magnitudes);
        let direction_scores = mz_scores(&directions);

        let mut keep: Vec<usize> = (0..n)
            .filter(|&i| {
                magnitude_scores[i].abs() <= params.magnitude_radius
                    && direction_scores[i].abs() <= params.direction_radius
            })
            .collect();
        if keep.is_empty() {
            // Nothing passed both radii; keep the most central client so
            // the layer average stays defined.
            let best = (0..n)
                .min_by(|&a, &b| {
                    let sa = magnitude_scores[a].abs().max(direction_scores[a].abs());
                    let sb = magnitude_scores[b].abs().max(direction_scores[b].abs());
                    sa.partial_cmp(&sb).expect("finite scores").then(a.cmp(&b))
                })
                .expect("batch is nonempty");
            keep.push(best);
        }

        let inv = keep.len() as f64;
        for j in spec.offset..spec.offset + spec.len {
            let mut acc = 0.0;
            for &i in &keep {
                acc += sparsified[i].values()[j];
            }
            aggregate[j] = acc / inv;
        }

        selected.push(keep.iter().map(|&i| ids[i]).collect::<BTreeSet<_>>());
        diagnostics.push(LayerScores {
            magnitude: magnitude_scores,
            direction: direction_scores,
        });
    }

    Ok(AggregationOutcome {
        aggregate: LayeredUpdate::new(aggregate, batch.layout().clone())?,
        participants: ids.to_vec(),
        selected,
        diagnostics: Some(diagnostics),
    })
}
