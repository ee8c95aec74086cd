//! Robust statistics used by the layer-wise filter and several baselines.
//!
//! - `pdp`: sign-based direction purity of a vector, in [0, 1].
//! - `mz_scores`: how many standard deviations each value sits from the
//!   median of its set.
//! - `coordinate_median` / `metric_table`: shared kernels.

use crate::error::{Error, Result};
use crate::update::{l2_norm, LayeredUpdate, UpdateBatch};

/// Positive direction purity: `0.5 * (1 + sum(sgn) / sum(|sgn|))`.
///
/// `sgn(0) = 0`, so coefficients zeroed by sparsification drop out of both
/// sums. An all-zero vector has no direction; 0.5 is the neutral value
/// symmetric under negation.
pub fn pdp(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::invalid("direction purity of an empty vector"));
    }
    let mut signed = 0i64;
    let mut nonzero = 0i64;
    for v in x {
        if *v > 0.0 {
            signed += 1;
            nonzero += 1;
        } else if *v < 0.0 {
            signed -= 1;
            nonzero += 1;
        }
    }
    if nonzero == 0 {
        return Ok(0.5);
    }
    Ok(0.5 * (1.0 + signed as f64 / nonzero as f64))
}

/// Median with the even-length mean-of-middles convention.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Population (divide-by-n) standard deviation around the mean.
pub fn population_std(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "std of empty set");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// `(x_i - median) / sigma` for every element. Zero spread gives all-zero
/// scores: identical metrics are no evidence to exclude anyone.
pub fn mz_scores(values: &[f64]) -> Vec<f64> {
    assert!(!values.is_empty(), "mz scores of empty set");
    let med = median(values);
    let sigma = population_std(values);
    if sigma == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - med) / sigma).collect()
}

/// Per-coordinate median across clients.
pub fn coordinate_median(batch: &UpdateBatch) -> LayeredUpdate {
    let d = batch.layout().total_len();
    let n = batch.n();
    let mut out = Vec::with_capacity(d);
    let mut column = vec![0.0; n];
    for j in 0..d {
        for (i, u) in batch.updates().iter().enumerate() {
            column[i] = u.values()[j];
        }
        out.push(median(&column));
    }
    LayeredUpdate::new(out, batch.layout().clone()).expect("medians of finite values are finite")
}

/// Per-(client, layer) magnitude and direction metrics of a batch.
#[derive(Debug, Clone)]
pub struct LayerMetricTable {
    /// `magnitude[i][l]`: L2 norm of client i's layer l.
    pub magnitude: Vec<Vec<f64>>,
    /// `direction[i][l]`: direction purity of client i's layer l.
    pub direction: Vec<Vec<f64>>,
}

pub fn metric_table(batch: &UpdateBatch) -> LayerMetricTable {
    let layers = batch.layout().layer_count();
    let mut magnitude = Vec::with_capacity(batch.n());
    let mut direction = Vec::with_capacity(batch.n());
    for u in batch.updates() {
        let mut mag_row = Vec::with_capacity(layers);
        let mut dir_row = Vec::with_capacity(layers);
        for l in 0..layers {
            let slice = u.slice_layer(l).expect("layer index within layout");
            mag_row.push(l2_norm(slice));
            dir_row.push(pdp(slice).expect("layers are nonempty"));
        }
        magnitude.push(mag_row);
        direction.push(dir_row);
    }
    LayerMetricTable {
        magnitude,
        direction,
    }
}
