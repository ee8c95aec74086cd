//! Top-k sparsification of model updates and the induced energy split.
//!
//! `top_k` keeps the k largest-magnitude coefficients in place and zeroes
//! the rest. Ties at the k-boundary keep the lower index so results are
//! identical across runs and platforms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::update::{l2_norm, LayeredUpdate};

/// Fraction of coefficients zeroed out: `1 - k/d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SparsificationLevel(f64);

impl SparsificationLevel {
    pub fn new(level: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&level) {
            return Err(Error::invalid(format!(
                "sparsification level {level} outside [0, 1)"
            )));
        }
        Ok(SparsificationLevel(level))
    }

    pub fn level(&self) -> f64 {
        self.0
    }

    /// Number of kept coefficients for dimension `d`: round half up,
    /// clamped to `[1, d]` so extreme levels never annihilate an update.
    pub fn kept_for_dim(&self, d: usize) -> usize {
        let k = ((1.0 - self.0) * d as f64).round() as usize;
        k.clamp(1, d.max(1))
    }
}

/// How an update's squared norm splits under Top-k.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnergySplit {
    /// Fraction retained by the kept coefficients.
    pub kept: f64,
    /// Fraction removed with the zeroed coefficients.
    pub dropped: f64,
}

/// Keeps the k largest-|.| entries of `x` at their original positions.
pub fn top_k(x: &[f64], k: usize) -> Result<Vec<f64>> {
    let d = x.len();
    if k > d {
        return Err(Error::invalid(format!("k = {k} exceeds dimension {d}")));
    }
    if k == d {
        return Ok(x.to_vec());
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        x[j].abs()
            .partial_cmp(&x[i].abs())
            .expect("finite values")
            .then(i.cmp(&j))
    });
    let mut out = vec![0.0; d];
    for &i in &order[..k] {
        out[i] = x[i];
    }
    Ok(out)
}

/// Global Top-k over the whole flat update (across layer boundaries),
/// with k derived from the level. Layout is preserved.
pub fn sparsify_update(u: &LayeredUpdate, sl: SparsificationLevel) -> LayeredUpdate {
    let k = sl.kept_for_dim(u.values().len());
    let values = top_k(u.values(), k).expect("k is clamped to the dimension");
    LayeredUpdate::new(values, u.layout().clone()).expect("sparsification keeps values finite")
}

/// Measures `kept = |Top_k(x)|^2 / |x|^2` and `dropped = |Top_k(x) - x|^2 / |x|^2`.
pub fn energy_split(x: &[f64], k: usize) -> Result<EnergySplit> {
    let total = l2_norm(x).powi(2);
    if total == 0.0 {
        return Err(Error::invalid("energy split of the zero vector is undefined"));
    }
    let kept_vec = top_k(x, k)?;
    let kept = l2_norm(&kept_vec).powi(2) / total;
    let residual: Vec<f64> = kept_vec.iter().zip(x).map(|(a, b)| a - b).collect();
    let dropped = l2_norm(&residual).powi(2) / total;
    Ok(EnergySplit { kept, dropped })
}
