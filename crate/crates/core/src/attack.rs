//! Poisoning attack generators.
//!
//! Each generator replaces the sampled malicious clients' updates with
//! crafted ones, given full knowledge of the benign updates of the round.
//! Generation is pure given the seed: every malicious client draws from a
//! client-id-keyed stream, so parallel generation reproduces exactly.

use rand::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::update::{ClientId, LayeredUpdate, UpdateBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Random,
    Noise,
    Signflip,
    Minmax,
    Minsum,
    TailoredTrmean,
    Lie,
    Byzmean,
}

impl AttackKind {
    pub fn from_key(key: &str) -> Result<Self> {
        Ok(match key {
            "random" => AttackKind::Random,
            "noise" => AttackKind::Noise,
            "signflip" => AttackKind::Signflip,
            "minmax" => AttackKind::Minmax,
            "minsum" => AttackKind::Minsum,
            "tailored_trmean" => AttackKind::TailoredTrmean,
            "lie" => AttackKind::Lie,
            "byzmean" => AttackKind::Byzmean,
            other => return Err(Error::Config(format!("unknown attack kind `{other}`"))),
        })
    }

    pub fn key(&self) -> &'static str {
        match self {
            AttackKind::Random => "random",
            AttackKind::Noise => "noise",
            AttackKind::Signflip => "signflip",
            AttackKind::Minmax => "minmax",
            AttackKind::Minsum => "minsum",
            AttackKind::TailoredTrmean => "tailored_trmean",
            AttackKind::Lie => "lie",
            AttackKind::Byzmean => "byzmean",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Noise scale for the random and noise attacks.
    pub sigma: f64,
    /// Shift factor for the lie attack.
    pub z: f64,
    /// Group-1 generator for the byzmean attack.
    pub base: AttackKind,
    /// Bound the minsum attack by the minimum instead of the maximum total
    /// benign distance.
    pub stealthy: bool,
    /// Trim count per side targeted by the tailored trimmed-mean attack.
    pub trim_per_side: usize,
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        AttackSpec {
            kind,
            sigma: 0.5,
            z: 0.5,
            base: AttackKind::Lie,
            stealthy: false,
            trim_per_side: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config("attack sigma must be positive".into()));
        }
        if !self.z.is_finite() {
            return Err(Error::Config("attack z must be finite".into()));
        }
        if self.kind == AttackKind::Byzmean && self.base == AttackKind::Byzmean {
            return Err(Error::Config("byzmean cannot use itself as base".into()));
        }
        Ok(())
    }
}

/// Everything an attack sees in one round.
pub struct AttackContext<'a> {
    /// Honest updates submitted by the benign clients this round.
    pub benign: &'a UpdateBatch,
    pub malicious_ids: &'a [ClientId],
    /// Honest-behavior updates of the malicious clients (they run local
    /// training honestly first; noise/signflip perturb these).
    pub malicious_honest: &'a UpdateBatch,
    /// Seed and tag addressing this round's attack streams.
    pub stream_seed: u64,
    pub stream_tag: u64,
}

impl<'a> AttackContext<'a> {
    fn validate(&self) -> Result<()> {
        if self.malicious_ids.is_empty() {
            return Err(Error::invalid("attack context without malicious clients"));
        }
        if self.malicious_honest.client_ids() != self.malicious_ids {
            return Err(Error::invalid(
                "malicious honest updates not aligned with malicious ids",
            ));
        }
        for id in self.malicious_ids {
            if self.benign.client_ids().contains(id) {
                return Err(Error::invalid(format!(
                    "client {id} is both benign and malicious"
                )));
            }
        }
        Ok(())
    }

    fn rng_for(&self, client: ClientId) -> rand_chacha::ChaCha8Rng {
        seeds::stream(self.stream_seed, seeds::DOMAIN_ATTACK, self.stream_tag, client as u64)
    }

    fn f(&self) -> usize {
        self.malicious_ids.len()
    }
}

/// Dispatches to the generator for `spec.kind`. Returns one update per
/// malicious id, in context order.
pub fn generate(spec: &AttackSpec, ctx: &AttackContext) -> Result<Vec<LayeredUpdate>> {
    ctx.validate()?;
    spec.validate()?;
    match spec.kind {
        AttackKind::Random => attack_random(ctx, spec.sigma),
        AttackKind::Noise => attack_noise(ctx, spec.sigma),
        AttackKind::Signflip => attack_signflip(ctx),
        AttackKind::Minmax => attack_minmax(ctx),
        AttackKind::Minsum => attack_minsum(ctx, spec.stealthy),
        AttackKind::TailoredTrmean => attack_tailored_trmean(ctx, spec.trim_per_side),
        AttackKind::Lie => attack_lie(ctx, spec.z),
        AttackKind::Byzmean => attack_byzmean(ctx, spec),
    }
}

/// Like [`generate`] but degrades gracefully where a round's sample makes
/// the configured attack inapplicable: byzmean with a single sampled
/// malicious client falls back to its base attack.
pub fn generate_for_round(spec: &AttackSpec, ctx: &AttackContext) -> Result<Vec<LayeredUpdate>> {
    if spec.kind == AttackKind::Byzmean && ctx.malicious_ids.len() < 2 {
        let mut base = spec.clone();
        base.kind = spec.base;
        return generate(&base, ctx);
    }
    generate(spec, ctx)
}

fn attack_random(ctx: &AttackContext, sigma: f64) -> Result<Vec<LayeredUpdate>> {
    let layout = ctx.malicious_honest.layout().clone();
    let d = layout.total_len();
    ctx.malicious_ids
        .iter()
        .map(|&id| {
            let mut rng = ctx.rng_for(id);
            let values: Vec<f64> = (0..d)
                .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            LayeredUpdate::new(values, layout.clone())
        })
        .collect()
}

fn attack_noise(ctx: &AttackContext, sigma: f64) -> Result<Vec<LayeredUpdate>> {
    ctx.malicious_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let mut rng = ctx.rng_for(id);
            let honest = ctx.malicious_honest.update(i);
            let values: Vec<f64> = honest
                .values()
                .iter()
                .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            LayeredUpdate::new(values, honest.layout().clone())
        })
        .collect()
}

fn attack_signflip(ctx: &AttackContext) -> Result<Vec<LayeredUpdate>> {
    ctx.malicious_honest
        .updates()
        .iter()
        .map(|u| u.scale(-1.0))
        .collect()
}

/// Coordinate-wise mean and population std over the benign updates.
fn benign_stats(benign: &UpdateBatch) -> (Vec<f64>, Vec<f64>) {
    let d = benign.layout().total_len();
    let n = benign.n() as f64;
    let mut mean = vec![0.0; d];
    for u in benign.updates() {
        for (m, v) in mean.iter_mut().zip(u.values()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for u in benign.updates() {
        for ((s, v), m) in var.iter_mut().zip(u.values()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt()).collect();
    (mean, std)
}

fn pairwise_distances(benign: &UpdateBatch) -> Vec<Vec<f64>> {
    let n = benign.n();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let dist = distance(benign.update(i).values(), benign.update(j).values());
            d[i][j] = dist;
            d[j][i] = dist;
        }
    }
    d
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Shared scaffolding for the distance-bounded attacks: craft
/// `mean + gamma * direction` with the largest `gamma` (binary search over
/// [0, 200], 60 halvings) that keeps `constraint(candidate) <= bound`.
fn distance_bounded_attack(
    ctx: &AttackContext,
    bound: f64,
    constraint: impl Fn(&[f64]) -> f64,
) -> Result<Vec<LayeredUpdate>> {
    let layout = ctx.benign.layout().clone();
    let (mean, std) = benign_stats(ctx.benign);
    let std_norm = crate::update::l2_norm(&std);
    let direction: Vec<f64> = if std_norm == 0.0 {
        vec![0.0; std.len()]
    } else {
        std.iter().map(|s| -s / std_norm).collect()
    };

    let candidate = |gamma: f64| -> Vec<f64> {
        mean.iter()
            .zip(&direction)
            .map(|(m, p)| m + gamma * p)
            .collect()
    };

    let feasible = |gamma: f64| constraint(&candidate(gamma)) <= bound;
    let gamma = if !feasible(0.0) {
        // Only reachable with the stealthy minsum bound; the mean itself
        // already violates it, so stay at the mean.
        0.0
    } else if feasible(200.0) {
        200.0
    } else {
        let mut lo = 0.0;
        let mut hi = 200.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };

    let update = LayeredUpdate::new(candidate(gamma), layout)?;
    Ok(vec![update; ctx.f()])
}

fn attack_minmax(ctx: &AttackContext) -> Result<Vec<LayeredUpdate>> {
    if ctx.benign.n() < 2 {
        let (mean, _) = benign_stats(ctx.benign);
        let u = LayeredUpdate::new(mean, ctx.benign.layout().clone())?;
        return Ok(vec![u; ctx.f()]);
    }
    let dists = pairwise_distances(ctx.benign);
    let bound = dists
        .iter()
        .flatten()
        .copied()
        .fold(0.0f64, f64::max);
    let points: Vec<Vec<f64>> = ctx
        .benign
        .updates()
        .iter()
        .map(|u| u.values().to_vec())
        .collect();
    distance_bounded_attack(ctx, bound, move |c| {
        points
            .iter()
            .map(|p| distance(c, p))
            .fold(0.0f64, f64::max)
    })
}

fn attack_minsum(ctx: &AttackContext, stealthy: bool) -> Result<Vec<LayeredUpdate>> {
    if ctx.benign.n() < 2 {
        let (mean, _) = benign_stats(ctx.benign);
        let u = LayeredUpdate::new(mean, ctx.benign.layout().clone())?;
        return Ok(vec![u; ctx.f()]);
    }
    let dists = pairwise_distances(ctx.benign);
    let totals: Vec<f64> = dists.iter().map(|row| row.iter().sum()).collect();
    let bound = if stealthy {
        totals.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        totals.iter().copied().fold(0.0f64, f64::max)
    };
    let points: Vec<Vec<f64>> = ctx
        .benign
        .updates()
        .iter()
        .map(|u| u.values().to_vec())
        .collect();
    distance_bounded_attack(ctx, bound, move |c| {
        points.iter().map(|p| distance(c, p)).sum()
    })
}

fn attack_tailored_trmean(ctx: &AttackContext, trim_per_side: usize) -> Result<Vec<LayeredUpdate>> {
    let layout = ctx.benign.layout().clone();
    let d = layout.total_len();
    let nb = ctx.benign.n();
    let f = ctx.f();
    let (mean, _) = benign_stats(ctx.benign);

    // Extremal benign value opposite to the benign mean direction.
    let mut extremal = vec![0.0; d];
    for j in 0..d {
        let column = ctx.benign.updates().iter().map(|u| u.values()[j]);
        extremal[j] = if mean[j] >= 0.0 {
            column.fold(f64::INFINITY, f64::min)
        } else {
            column.fold(f64::NEG_INFINITY, f64::max)
        };
    }

    let n_all = nb + f;
    let trim = trim_per_side.min((n_all - 1) / 2);
    let objective = |beta: &[f64]| -> f64 {
        // Distance between the benign average and the trimmed mean of the
        // full (attacked) cohort.
        let mut sq = 0.0;
        let mut column: Vec<f64> = Vec::with_capacity(n_all);
        for j in 0..d {
            column.clear();
            column.extend(ctx.benign.updates().iter().map(|u| u.values()[j]));
            column.extend(std::iter::repeat_n(beta[j], f));
            column.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
            let kept = &column[trim..n_all - trim];
            let trimmed = kept.iter().sum::<f64>() / kept.len() as f64;
            sq += (mean[j] - trimmed) * (mean[j] - trimmed);
        }
        sq.sqrt()
    };

    let mut best_scale = 1.0;
    let mut best_objective = f64::NEG_INFINITY;
    let mut scale = 1.0;
    while scale <= 5.0 + 1e-9 {
        let beta: Vec<f64> = extremal.iter().map(|e| scale * e).collect();
        let o = objective(&beta);
        if o > best_objective {
            best_objective = o;
            best_scale = scale;
        }
        scale += 0.5;
    }

    let beta: Vec<f64> = extremal.iter().map(|e| best_scale * e).collect();
    let update = LayeredUpdate::new(beta, layout)?;
    Ok(vec![update; f])
}

fn attack_lie(ctx: &AttackContext, z: f64) -> Result<Vec<LayeredUpdate>> {
    let (mean, std) = benign_stats(ctx.benign);
    let values: Vec<f64> = mean.iter().zip(&std).map(|(m, s)| m - z * s).collect();
    let update = LayeredUpdate::new(values, ctx.benign.layout().clone())?;
    Ok(vec![update; ctx.f()])
}

fn attack_byzmean(ctx: &AttackContext, spec: &AttackSpec) -> Result<Vec<LayeredUpdate>> {
    let f = ctx.f();
    if f < 2 {
        return Err(Error::invalid("byzmean needs at least two malicious clients"));
    }
    let group1 = f / 2;
    let group2 = f - group1;

    let mut base_spec = spec.clone();
    base_spec.kind = spec.base;
    let sub_honest = UpdateBatch::new(
        ctx.malicious_honest.updates()[..group1].to_vec(),
        ctx.malicious_ids[..group1].to_vec(),
    )?;
    let sub_ctx = AttackContext {
        benign: ctx.benign,
        malicious_ids: &ctx.malicious_ids[..group1],
        malicious_honest: &sub_honest,
        stream_seed: ctx.stream_seed,
        stream_tag: ctx.stream_tag,
    };
    let group1_updates = generate(&base_spec, &sub_ctx)?;

    // The closed form targets the mean of the group-1 updates: solving for
    // the group-2 value makes the cohort mean land exactly on it.
    let d = ctx.benign.layout().total_len();
    let mut group1_mean = vec![0.0; d];
    for u in &group1_updates {
        for (m, v) in group1_mean.iter_mut().zip(u.values()) {
            *m += v;
        }
    }
    for m in group1_mean.iter_mut() {
        *m /= group1 as f64;
    }
    let mut benign_sum = vec![0.0; d];
    for u in ctx.benign.updates() {
        for (s, v) in benign_sum.iter_mut().zip(u.values()) {
            *s += v;
        }
    }
    let n_total = (ctx.benign.n() + f) as f64;
    let group2_values: Vec<f64> = group1_mean
        .iter()
        .zip(&benign_sum)
        .map(|(b1, s)| ((n_total - group1 as f64) * b1 - s) / group2 as f64)
        .collect();
    let group2_update = LayeredUpdate::new(group2_values, ctx.benign.layout().clone())?;

    let mut out = group1_updates;
    out.extend(std::iter::repeat_n(group2_update, group2));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::update::{l2_norm, Layout};
    use std::sync::Arc;

    fn batch(rows: Vec<Vec<f64>>, ids: Vec<ClientId>, layout: Arc<Layout>) -> UpdateBatch {
        UpdateBatch::new(
            rows.into_iter()
                .map(|r| LayeredUpdate::new(r, layout.clone()).unwrap())
                .collect(),
            ids,
        )
        .unwrap()
    }

    fn simple_ctx<'a>(
        benign: &'a UpdateBatch,
        malicious_honest: &'a UpdateBatch,
        ids: &'a [ClientId],
    ) -> AttackContext<'a> {
        AttackContext {
            benign,
            malicious_ids: ids,
            malicious_honest,
            stream_seed: 99,
            stream_tag: 0,
        }
    }

    #[test]
    fn attacks_are_deterministic_per_seed() {
        let layout = Layout::from_lens([("w", 4)]).unwrap();
        let benign = batch(
            vec![vec![0.1, -0.2, 0.3, 0.0], vec![0.2, -0.1, 0.25, 0.05]],
            vec![0, 1],
            layout.clone(),
        );
        let honest = batch(vec![vec![0.15, -0.15, 0.2, 0.1]], vec![2], layout);
        let ids = [2];
        for kind in [
            AttackKind::Random,
            AttackKind::Noise,
            AttackKind::Signflip,
            AttackKind::Minmax,
            AttackKind::Minsum,
            AttackKind::TailoredTrmean,
            AttackKind::Lie,
        ] {
            let spec = AttackSpec::new(kind);
            let a = generate(&spec, &simple_ctx(&benign, &honest, &ids)).unwrap();
            let b = generate(&spec, &simple_ctx(&benign, &honest, &ids)).unwrap();
            assert_eq!(a, b, "{kind:?} not reproducible");
        }
    }

    #[test]
    fn random_attack_moments_match_the_distribution() {
        let layout = Layout::from_lens([("w", 4)]).unwrap();
        let benign = batch(vec![vec![0.0; 4]; 2], vec![0, 1], layout.clone());
        let draws = 100_000usize;
        // One malicious client per tag so every draw is an independent
        // stream; accumulate per-coordinate moments.
        let honest = batch(vec![vec![0.0; 4]], vec![9], layout.clone());
        let mut sum = [0.0; 4];
        let mut sumsq = [0.0; 4];
        let spec = AttackSpec::new(AttackKind::Random);
        for t in 0..draws {
            let ctx = AttackContext {
                benign: &benign,
                malicious_ids: &[9],
                malicious_honest: &honest,
                stream_seed: 7,
                stream_tag: t as u64,
            };
            let u = &generate(&spec, &ctx).unwrap()[0];
            for (j, v) in u.values().iter().enumerate() {
                sum[j] += v;
                sumsq[j] += v * v;
            }
        }
        let n = draws as f64;
        for j in 0..4 {
            let mean = sum[j] / n;
            let var = sumsq[j] / n - mean * mean;
            // CLT bound: 3 sigma / sqrt(n) with sigma = 0.5.
            assert!(mean.abs() <= 3.0 * 0.5 / n.sqrt(), "mean[{j}] = {mean}");
            assert!((var - 0.25).abs() <= 0.02 * 0.25, "var[{j}] = {var}");
        }
    }

    #[test]
    fn random_attack_vanishes_with_sigma() {
        let layout = Layout::from_lens([("w", 3)]).unwrap();
        let benign = batch(vec![vec![1.0, 1.0, 1.0]], vec![0], layout.clone());
        let honest = batch(vec![vec![1.0, 1.0, 1.0]], vec![5], layout);
        let mut spec = AttackSpec::new(AttackKind::Random);
        spec.sigma = 1e-12;
        let out = generate(&spec, &simple_ctx(&benign, &honest, &[5])).unwrap();
        assert!(l2_norm(out[0].values()) < 1e-10);
    }

    #[test]
    fn noise_attack_concentrates_around_the_honest_update() {
        let d = 10_000usize;
        let layout = Layout::from_lens([("w", d)]).unwrap();
        let benign = batch(vec![vec![0.0; d]], vec![0], layout.clone());
        let honest_row: Vec<f64> = (0..d).map(|j| (j as f64 * 0.37).sin()).collect();
        let honest = batch(vec![honest_row.clone(); 3], vec![7, 8, 9], layout);
        let spec = AttackSpec::new(AttackKind::Noise);
        let ctx = simple_ctx(&benign, &honest, &[7, 8, 9]);
        let out = generate(&spec, &ctx).unwrap();
        let mut ratios = 0.0;
        for u in &out {
            let sq: f64 = u
                .values()
                .iter()
                .zip(&honest_row)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            ratios += sq / d as f64;
        }
        // Chi-square concentration: the average of 3d squared deviations.
        let mean_ratio = ratios / 3.0;
        assert!((mean_ratio - 0.25).abs() <= 0.02 * 0.25, "{mean_ratio}");

        // The perturbation is centered: averaging the three drawn updates
        // coordinate-wise stays within the CLT envelope of the honest one.
        let mut max_dev: f64 = 0.0;
        for j in 0..d {
            let avg = out.iter().map(|u| u.values()[j]).sum::<f64>() / 3.0;
            max_dev = max_dev.max((avg - honest_row[j]).abs());
        }
        // sd of the 3-draw mean is 0.5/sqrt(3); allow 5 sigma across 10^4 coords.
        assert!(max_dev <= 5.0 * 0.5 / 3f64.sqrt(), "{max_dev}");

        let mut tight = AttackSpec::new(AttackKind::Noise);
        tight.sigma = 1e-15;
        let out = generate(&tight, &ctx).unwrap();
        for (u, h) in out.iter().zip(honest.updates()) {
            let diff: f64 = u
                .values()
                .iter()
                .zip(h.values())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff < 1e-10);
        }
    }

    #[test]
    fn signflip_examples() {
        let layout = Layout::from_lens([("w", 2)]).unwrap();
        let benign = batch(vec![vec![0.0, 0.0]], vec![0], layout.clone());
        let honest = batch(vec![vec![1.0, -2.0]], vec![3], layout.clone());
        let spec = AttackSpec::new(AttackKind::Signflip);
        let out = generate(&spec, &simple_ctx(&benign, &honest, &[3])).unwrap();
        assert_eq!(out[0].values(), &[-1.0, 2.0]);

        // Involution: flipping the flipped update restores the original.
        let flipped = batch(vec![out[0].values().to_vec()], vec![3], layout);
        let restored = generate(&spec, &simple_ctx(&benign, &flipped, &[3])).unwrap();
        assert_eq!(restored[0].values(), honest.update(0).values());

        // Direction purity mirrors under the flip.
        let p = crate::stats::pdp(honest.update(0).values()).unwrap();
        let q = crate::stats::pdp(out[0].values()).unwrap();
        assert!((q - (1.0 - p)).abs() < 1e-15);
    }

    #[test]
    fn minmax_matches_one_dimensional_closed_form() {
        // Benign points {0, 2}: mean 1, direction -1, max pairwise
        // distance 2. The largest feasible shift solves
        // max(|1 - g|, |1 + g|) = 2, so g = 1 and the crafted value is 0.
        let layout = Layout::from_lens([("w", 1)]).unwrap();
        let benign = batch(vec![vec![0.0], vec![2.0]], vec![0, 1], layout.clone());
        let honest = batch(vec![vec![1.0]], vec![5], layout);
        let spec = AttackSpec::new(AttackKind::Minmax);
        let out = generate(&spec, &simple_ctx(&benign, &honest, &[5])).unwrap();
        assert!((out[0].values()[0] - 0.0).abs() < 1e-9, "{}", out[0].values()[0]);
    }

    #[test]
    fn identical_benign_updates_pin_the_crafted_update_to_the_mean() {
        let layout = Layout::from_lens([("w", 3)]).unwrap();
        let benign = batch(vec![vec![0.5, -0.25, 1.0]; 4], (0..4).collect(), layout.clone());
        let honest = batch(vec![vec![0.0; 3]], vec![9], layout);
        for kind in [AttackKind::Minmax, AttackKind::Minsum] {
            let spec = AttackSpec::new(kind);
            let out = generate(&spec, &simple_ctx(&benign, &honest, &[9])).unwrap();
            assert_eq!(out[0].values(), &[0.5, -0.25, 1.0], "{kind:?}");
        }
    }

    #[test]
    fn distance_constraints_hold_after_search() {
        let layout = Layout::from_lens([("w", 6)]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for trial in 0..100 {
            let n = 3 + (trial % 5);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let benign = batch(rows.clone(), (0..n).collect(), layout.clone());
            let honest = batch(vec![vec![0.0; 6]; 2], vec![90, 91], layout.clone());
            let ctx = AttackContext {
                benign: &benign,
                malicious_ids: &[90, 91],
                malicious_honest: &honest,
                stream_seed: trial as u64,
                stream_tag: 1,
            };

            let minmax = generate(&AttackSpec::new(AttackKind::Minmax), &ctx).unwrap();
            let beta = minmax[0].values();
            let bound = rows
                .iter()
                .flat_map(|a| rows.iter().map(move |b| distance(a, b)))
                .fold(0.0f64, f64::max);
            let worst = rows.iter().map(|r| distance(beta, r)).fold(0.0f64, f64::max);
            assert!(worst <= bound * (1.0 + 1e-4), "minmax slack: {worst} vs {bound}");
            assert_eq!(minmax[0], minmax[1]);

            let minsum = generate(&AttackSpec::new(AttackKind::Minsum), &ctx).unwrap();
            let beta = minsum[0].values();
            let bound = rows
                .iter()
                .map(|a| rows.iter().map(|b| distance(a, b)).sum::<f64>())
                .fold(0.0f64, f64::max);
            let total: f64 = rows.iter().map(|r| distance(beta, r)).sum();
            assert!(total <= bound * (1.0 + 1e-4), "minsum slack: {total} vs {bound}");
        }
    }

    #[test]
    fn stealthy_minsum_respects_the_tighter_bound_when_feasible() {
        let layout = Layout::from_lens([("w", 2)]).unwrap();
        // Mean sits inside the hull; the minimum-total bound is feasible.
        let rows = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, 0.9]];
        let benign = batch(rows.clone(), vec![0, 1, 2], layout.clone());
        let honest = batch(vec![vec![0.0; 2]], vec![9], layout);
        let mut spec = AttackSpec::new(AttackKind::Minsum);
        spec.stealthy = true;
        let out = generate(&spec, &simple_ctx(&benign, &honest, &[9])).unwrap();
        let beta = out[0].values();
        let bound = rows
            .iter()
            .map(|a| rows.iter().map(|b| distance(a, b)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let total: f64 = rows.iter().map(|r| distance(beta, r)).sum();
        assert!(total <= bound * (1.0 + 1e-4));
    }

    #[test]
    fn tailored_trmean_examples() {
        let layout = Layout::from_lens([("w", 1)]).unwrap();

        // Equal benign updates: the benign average and the trimmed mean
        // coincide for every scale, so the tie keeps the smallest scale.
        let equal = batch(vec![vec![2.0]; 3], vec![0, 1, 2], layout.clone());
        let honest = batch(vec![vec![0.0]], vec![9], layout.clone());
        let spec = AttackSpec::new(AttackKind::TailoredTrmean);
        let out = generate(&spec, &simple_ctx(&equal, &honest, &[9])).unwrap();
        assert_eq!(out[0].values(), &[2.0]); // scale 1 times the extremal value

        // Grid oracle on benign {1, 2, 3} with one trim per side.
        let benign = batch(
            vec![vec![1.0], vec![2.0], vec![3.0]],
            vec![0, 1, 2],
            layout.clone(),
        );
        let out = generate(&spec, &simple_ctx(&benign, &honest, &[9])).unwrap();
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut s = 1.0;
        while s <= 5.0 + 1e-9 {
            let beta = s * 1.0; // extremal value opposite the positive mean is the min, 1.0
            let mut all = [1.0, 2.0, 3.0, beta];
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let trimmed = (all[1] + all[2]) / 2.0;
            let objective = (2.0f64 - trimmed).abs();
            if objective > best.0 {
                best = (objective, s);
            }
            s += 0.5;
        }
        assert_eq!(out[0].values()[0], best.1 * 1.0);

        // The chosen scale can only improve on the scale-1 baseline.
        let baseline = {
            let mut all = [1.0, 2.0, 3.0, 1.0];
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (2.0f64 - (all[1] + all[2]) / 2.0).abs()
        };
        assert!(best.0 >= baseline - 1e-12);
    }

    #[test]
    fn lie_examples() {
        let layout = Layout::from_lens([("w", 1)]).unwrap();
        let benign = batch(vec![vec![0.0], vec![2.0]], vec![0, 1], layout.clone());
        let honest = batch(vec![vec![0.5]], vec![7], layout.clone());

        let mut spec = AttackSpec::new(AttackKind::Lie);
        let out = generate(&spec, &simple_ctx(&benign, &honest, &[7])).unwrap();
        // mean 1, population std 1, z = 0.5.
        assert_eq!(out[0].values(), &[0.5]);

        spec.z = 0.0;
        let out = generate(&spec, &simple_ctx(&benign, &honest, &[7])).unwrap();
        assert_eq!(out[0].values(), &[1.0]);

        let identical = batch(vec![vec![3.0]; 4], (0..4).collect(), layout);
        spec.z = 0.5;
        let out = generate(&spec, &simple_ctx(&identical, &honest, &[7])).unwrap();
        assert_eq!(out[0].values(), &[3.0]);
    }

    #[test]
    fn byzmean_forces_the_cohort_mean_onto_group_one() {
        let layout = Layout::from_lens([("w", 3)]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for &(n, f) in &[(8usize, 2usize), (12, 3), (20, 5)] {
            let benign_rows: Vec<Vec<f64>> = (0..n - f)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let benign = batch(benign_rows.clone(), (0..n - f).collect(), layout.clone());
            let honest_rows: Vec<Vec<f64>> = (0..f)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let ids: Vec<ClientId> = (100..100 + f).collect();
            let honest = batch(honest_rows, ids.clone(), layout.clone());
            let ctx = AttackContext {
                benign: &benign,
                malicious_ids: &ids,
                malicious_honest: &honest,
                stream_seed: n as u64,
                stream_tag: f as u64,
            };
            let spec = AttackSpec::new(AttackKind::Byzmean);
            let out = generate(&spec, &ctx).unwrap();
            assert_eq!(out.len(), f);

            let group1 = f / 2;
            for j in 0..3 {
                let mut total: f64 = benign_rows.iter().map(|r| r[j]).sum();
                total += out.iter().map(|u| u.values()[j]).sum::<f64>();
                let cohort_mean = total / n as f64;
                let g1_mean: f64 =
                    out[..group1].iter().map(|u| u.values()[j]).sum::<f64>() / group1 as f64;
                assert!(
                    (cohort_mean - g1_mean).abs() <= 1e-10 * (1.0 + g1_mean.abs()),
                    "n={n} f={f} j={j}: {cohort_mean} vs {g1_mean}"
                );
            }
        }
    }

    #[test]
    fn byzmean_scalar_instance_matches_hand_solution() {
        // f = 2, n = 4, benign {1, 3}: group 1 is one lie update with
        // mean 2, std 1, z = 0.5 -> 1.5. The group-2 value solves
        // ((4 - 1) * 1.5 - 4) / 1 = 0.5.
        let layout = Layout::from_lens([("w", 1)]).unwrap();
        let benign = batch(vec![vec![1.0], vec![3.0]], vec![0, 1], layout.clone());
        let honest = batch(vec![vec![0.0], vec![0.0]], vec![8, 9], layout);
        let ctx = simple_ctx(&benign, &honest, &[8, 9]);
        let spec = AttackSpec::new(AttackKind::Byzmean);
        let out = generate(&spec, &ctx).unwrap();
        assert_eq!(out[0].values(), &[1.5]);
        assert_eq!(out[1].values(), &[0.5]);
    }

    #[test]
    fn byzmean_identity_holds_with_signflip_base() {
        let layout = Layout::from_lens([("w", 2)]).unwrap();
        let benign = batch(
            vec![vec![1.0, -1.0], vec![0.5, 0.5], vec![0.0, 1.0]],
            vec![0, 1, 2],
            layout.clone(),
        );
        let honest = batch(vec![vec![0.2, 0.3], vec![-0.4, 0.1]], vec![7, 8], layout);
        let mut spec = AttackSpec::new(AttackKind::Byzmean);
        spec.base = AttackKind::Signflip;
        let ctx = simple_ctx(&benign, &honest, &[7, 8]);
        let out = generate(&spec, &ctx).unwrap();
        assert_eq!(out[0].values(), &[-0.2, -0.3]); // flipped group-1 honest update
        for j in 0..2 {
            let total: f64 = benign.updates().iter().map(|u| u.values()[j]).sum::<f64>()
                + out.iter().map(|u| u.values()[j]).sum::<f64>();
            assert!((total / 5.0 - out[0].values()[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn byzmean_rejects_a_single_malicious_client_but_round_fallback_degrades() {
        let layout = Layout::from_lens([("w", 1)]).unwrap();
        let benign = batch(vec![vec![1.0], vec![2.0]], vec![0, 1], layout.clone());
        let honest = batch(vec![vec![0.0]], vec![9], layout);
        let ctx = simple_ctx(&benign, &honest, &[9]);
        let spec = AttackSpec::new(AttackKind::Byzmean);
        assert!(generate(&spec, &ctx).is_err());
        let out = generate_for_round(&spec, &ctx).unwrap();
        let lie = generate(&AttackSpec::new(AttackKind::Lie), &ctx).unwrap();
        assert_eq!(out, lie);
    }

    #[test]
    fn attacks_do_not_touch_the_benign_batch() {
        let layout = Layout::from_lens([("w", 2)]).unwrap();
        let rows = vec![vec![1.0, 2.0], vec![3.0, -1.0]];
        let benign = batch(rows.clone(), vec![0, 1], layout.clone());
        let honest = batch(vec![vec![0.1, 0.1]], vec![5], layout);
        let spec = AttackSpec::new(AttackKind::Minmax);
        let _ = generate(&spec, &simple_ctx(&benign, &honest, &[5])).unwrap();
        for (u, r) in benign.updates().iter().zip(&rows) {
            assert_eq!(u.values(), r.as_slice());
        }
    }
}
