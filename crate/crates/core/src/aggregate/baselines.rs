//! Baseline aggregation rules: plain averaging, coordinate-wise trimmed
//! mean, geometric median (Weiszfeld), Multi-Krum, Bulyan, and a reduced
//! SparseFed (server-side Top-k with clipping and error feedback).

use std::collections::BTreeSet;

use crate::aggregate::{mean_over, AggregationOutcome};
use crate::error::{Error, Result};
use crate::sparsify::top_k;
use crate::update::{l2_norm, LayeredUpdate, UpdateBatch};

/// Unweighted mean of the batch.
pub fn fedavg(batch: &UpdateBatch) -> Result<AggregationOutcome> {
    let all: Vec<usize> = (0..batch.n()).collect();
    let mean = mean_over(batch, &all);
    Ok(AggregationOutcome::with_all_selected(
        LayeredUpdate::new(mean, batch.layout().clone())?,
        batch,
    ))
}

/// Trim count per side for the coordinate-wise trimmed mean.
#[derive(Debug, Clone, Copy)]
pub struct TrimParam {
    pub per_side: usize,
}

impl TrimParam {
    pub fn new(per_side: usize) -> Self {
        TrimParam { per_side }
    }
}

/// Per coordinate, drops the `b` largest and `b` smallest values and
/// averages the rest (in client order, so `b = 0` is bit-equal to fedavg).
pub fn trimmed_mean(batch: &UpdateBatch, trim: TrimParam) -> Result<AggregationOutcome> {
    let n = batch.n();
    let b = trim.per_side;
    if 2 * b >= n {
        return Err(Error::Admissibility(format!(
            "trimmed mean needs 2b < n, got b = {b}, n = {n}"
        )));
    }
    let d = batch.layout().total_len();
    let mut out = vec![0.0; d];
    let mut column: Vec<(f64, usize)> = Vec::with_capacity(n);
    for j in 0..d {
        column.clear();
        column.extend(
            batch
                .updates()
                .iter()
                .enumerate()
                .map(|(i, u)| (u.values()[j], i)),
        );
        column.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite values").then(a.1.cmp(&b.1)));
        let mut retained: Vec<usize> = column[b..n - b].iter().map(|&(_, i)| i).collect();
        retained.sort_unstable();
        let mut acc = 0.0;
        for &i in &retained {
            acc += batch.update(i).values()[j];
        }
        out[j] = acc / retained.len() as f64;
    }
    Ok(AggregationOutcome::with_all_selected(
        LayeredUpdate::new(out, batch.layout().clone())?,
        batch,
    ))
}

/// Weiszfeld iteration from the coordinate-wise mean.
///
/// When an iterate lands exactly on a data point, it is nudged toward the
/// coordinate mean and the iteration continues.
pub fn geometric_median(
    batch: &UpdateBatch,
    tol: f64,
    max_iter: usize,
) -> Result<AggregationOutcome> {
    if !(tol > 0.0) {
        return Err(Error::invalid("geometric median tolerance must be positive"));
    }
    let all: Vec<usize> = (0..batch.n()).collect();
    let mean = mean_over(batch, &all);
    let points: Vec<&[f64]> = batch.updates().iter().map(|u| u.values()).collect();

    let objective = |y: &[f64]| -> f64 {
        points
            .iter()
            .map(|p| dist(y, p))
            .sum()
    };

    let mut y = mean.clone();
    let mut prev_obj = objective(&y);
    for _ in 0..max_iter {
        if let Some(i) = points.iter().position(|p| dist(&y, p) == 0.0) {
            let shift: Vec<f64> = mean.iter().zip(points[i]).map(|(m, p)| m - p).collect();
            if l2_norm(&shift) == 0.0 {
                break;
            }
            for (yj, s) in y.iter_mut().zip(&shift) {
                *yj += 1e-12 * s;
            }
        }
        let mut weight_sum = 0.0;
        let mut next = vec![0.0; y.len()];
        for p in &points {
            let w = 1.0 / dist(&y, p);
            weight_sum += w;
            for (nj, pj) in next.iter_mut().zip(*p) {
                *nj += w * pj;
            }
        }
        for nj in next.iter_mut() {
            *nj /= weight_sum;
        }
        let step = dist(&next, &y);
        let obj = objective(&next);
        debug_assert!(
            obj <= prev_obj + 1e-9 * (1.0 + prev_obj),
            "Weiszfeld objective increased: {prev_obj} -> {obj}"
        );
        prev_obj = obj;
        y = next;
        if step < tol {
            break;
        }
    }
    Ok(AggregationOutcome::with_all_selected(
        LayeredUpdate::new(y, batch.layout().clone())?,
        batch,
    ))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Krum-style scores: each client's score is the sum of squared distances
/// to its `n - f - 2` nearest other clients. Ties break on client index.
fn krum_scores(points: &[&[f64]], members: &[usize], assumed_byzantine: usize) -> Vec<(f64, usize)> {
    let r = members.len();
    let neighbors = r.saturating_sub(assumed_byzantine + 2);
    let mut scores = Vec::with_capacity(r);
    for &i in members {
        let mut dists: Vec<(f64, usize)> = members
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| {
                let dsq = points[i]
                    .iter()
                    .zip(points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                (dsq, j)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
        let score: f64 = dists.iter().take(neighbors).map(|&(d, _)| d).sum();
        scores.push((score, i));
    }
    scores.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
    scores
}

/// Mean of the `select` lowest-scoring clients under Krum scores.
pub fn multi_krum(
    batch: &UpdateBatch,
    assumed_byzantine: usize,
    select: usize,
) -> Result<AggregationOutcome> {
    let n = batch.n();
    if n < 2 * assumed_byzantine + 3 {
        return Err(Error::Admissibility(format!(
            "multi-krum needs n >= 2f + 3, got n = {n}, f = {assumed_byzantine}"
        )));
    }
    if select == 0 || select > n - assumed_byzantine {
        return Err(Error::Admissibility(format!(
            "multi-krum needs 1 <= m <= n - f, got m = {select}"
        )));
    }
    let points: Vec<&[f64]> = batch.updates().iter().map(|u| u.values()).collect();
    let members: Vec<usize> = (0..n).collect();
    let scores = krum_scores(&points, &members, assumed_byzantine);
    let mut chosen: Vec<usize> = scores.iter().take(select).map(|&(_, i)| i).collect();
    chosen.sort_unstable();
    let mean = mean_over(batch, &chosen);
    let ids: BTreeSet<_> = chosen.iter().map(|&i| batch.client_ids()[i]).collect();
    Ok(AggregationOutcome {
        aggregate: LayeredUpdate::new(mean, batch.layout().clone())?,
        participants: batch.client_ids().to_vec(),
        selected: vec![ids; batch.layout().layer_count()],
        diagnostics: None,
    })
}

/// Iterated Krum selection of `n - 2f` candidates, then a per-coordinate
/// trimmed mean around the candidate median keeping `n - 4f` values.
pub fn bulyan(batch: &UpdateBatch, assumed_byzantine: usize) -> Result<AggregationOutcome> {
    let n = batch.n();
    let f = assumed_byzantine;
    if n < 4 * f + 3 {
        return Err(Error::Admissibility(format!(
            "bulyan needs n >= 4f + 3, got n = {n}, f = {f}"
        )));
    }
    let points: Vec<&[f64]> = batch.updates().iter().map(|u| u.values()).collect();

    let mut remaining: Vec<usize> = (0..n).collect();
    let mut candidates = Vec::with_capacity(n - 2 * f);
    while candidates.len() < n - 2 * f {
        let scores = krum_scores(&points, &remaining, f);
        let best = scores[0].1;
        candidates.push(best);
        remaining.retain(|&i| i != best);
    }
    candidates.sort_unstable();

    let keep = n - 4 * f;
    let d = batch.layout().total_len();
    let mut out = vec![0.0; d];
    let mut column = Vec::with_capacity(candidates.len());
    for j in 0..d {
        column.clear();
        column.extend(candidates.iter().map(|&i| points[i][j]));
        let med = crate::stats::median(&column);
        let mut by_closeness: Vec<(f64, usize)> = candidates
            .iter()
            .map(|&i| ((points[i][j] - med).abs(), i))
            .collect();
        by_closeness.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
        let mut retained: Vec<usize> = by_closeness[..keep].iter().map(|&(_, i)| i).collect();
        retained.sort_unstable();
        let mut acc = 0.0;
        for &i in &retained {
            acc += points[i][j];
        }
        out[j] = acc / keep as f64;
    }

    let ids: BTreeSet<_> = candidates.iter().map(|&i| batch.client_ids()[i]).collect();
    Ok(AggregationOutcome {
        aggregate: LayeredUpdate::new(out, batch.layout().clone())?,
        participants: batch.client_ids().to_vec(),
        selected: vec![ids; batch.layout().layer_count()],
        diagnostics: None,
    })
}

/// Server-side residual carried across rounds by `sparsefed_lite`.
#[derive(Debug, Default)]
pub struct ErrorFeedback {
    residual: Option<LayeredUpdate>,
}

impl ErrorFeedback {
    pub fn residual(&self) -> Option<&LayeredUpdate> {
        self.residual.as_ref()
    }
}

/// Clip each update to `|Δ|₂ <= clip`, average, add the carried error,
/// emit the Top-k of the sum and store the remainder for the next round.
pub fn sparsefed_lite(
    batch: &UpdateBatch,
    keep: usize,
    clip: f64,
    state: &mut ErrorFeedback,
) -> Result<AggregationOutcome> {
    if !(clip > 0.0) {
        return Err(Error::invalid("clip bound must be positive"));
    }
    let d = batch.layout().total_len();
    if keep > d {
        return Err(Error::invalid(format!("keep count {keep} exceeds dimension {d}")));
    }
    let mut acc = vec![0.0; d];
    for u in batch.updates() {
        let norm = u.norm();
        let scale = if norm > clip { clip / norm } else { 1.0 };
        for (a, v) in acc.iter_mut().zip(u.values()) {
            *a += scale * v;
        }
    }
    let inv = batch.n() as f64;
    for a in acc.iter_mut() {
        *a /= inv;
    }
    if let Some(res) = &state.residual {
        crate::update::check_same_layout(res.layout(), batch.layout())?;
        for (a, r) in acc.iter_mut().zip(res.values()) {
            *a += r;
        }
    }
    let emitted = top_k(&acc, keep)?;
    let residual: Vec<f64> = acc.iter().zip(&emitted).map(|(c, e)| c - e).collect();
    state.residual = Some(LayeredUpdate::new(residual, batch.layout().clone())?);
    Ok(AggregationOutcome::with_all_selected(
        LayeredUpdate::new(emitted, batch.layout().clone())?,
        batch,
    ))
}
