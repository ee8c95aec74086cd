//! Tiny differentiable classifiers: softmax regression and a two-layer
//! ReLU MLP. Parameters live in the same layered flat-vector form as model
//! updates, so server arithmetic and client training share one algebra.

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::update::{LayeredUpdate, Layout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Logreg {
        inputs: usize,
        classes: usize,
    },
    Mlp2 {
        inputs: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Architecture {
    /// One layer per named parameter tensor; weights and biases are
    /// separate layers.
    pub fn layout(&self) -> Result<Arc<Layout>> {
        match *self {
            Architecture::Logreg { inputs, classes } => {
                Layout::from_lens([("w", classes * inputs), ("b", classes)])
            }
            Architecture::Mlp2 {
                inputs,
                hidden,
                classes,
            } => Layout::from_lens([
                ("w1", hidden * inputs),
                ("b1", hidden),
                ("w2", classes * hidden),
                ("b2", classes),
            ]),
        }
    }

    pub fn inputs(&self) -> usize {
        match *self {
            Architecture::Logreg { inputs, .. } => inputs,
            Architecture::Mlp2 { inputs, .. } => inputs,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::Logreg { classes, .. } => classes,
            Architecture::Mlp2 { classes, .. } => classes,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelState {
    arch: Architecture,
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ModelState {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let layout = arch.layout()?;
        Ok(ModelState {
            arch,
            values: vec![0.0; layout.total_len()],
            layout,
        })
    }

    /// Weights drawn from N(0, 1/fan_in), biases zero.
    pub fn init(arch: Architecture, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut state = ModelState::zeros(arch)?;
        let fill = |values: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            for v in values.iter_mut() {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        match arch {
            Architecture::Logreg { inputs, classes } => {
                fill(&mut state.values[..classes * inputs], inputs, rng);
            }
            Architecture::Mlp2 {
                inputs,
                hidden,
                classes,
            } => {
                let w1 = hidden * inputs;
                fill(&mut state.values[..w1], inputs, rng);
                let w2_start = w1 + hidden;
                fill(&mut state.values[w2_start..w2_start + classes * hidden], hidden, rng);
            }
        }
        Ok(state)
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn parameters(&self) -> LayeredUpdate {
        LayeredUpdate::new(self.values.clone(), self.layout.clone())
            .expect("parameters stay finite")
    }

    pub fn from_parameters(arch: Architecture, params: &LayeredUpdate) -> Result<Self> {
        let layout = arch.layout()?;
        crate::update::check_same_layout(&layout, params.layout())?;
        Ok(ModelState {
            arch,
            layout,
            values: params.values().to_vec(),
        })
    }

    /// Server step `θ <- θ - Δ`, one rounding per coordinate.
    pub fn apply_delta(&mut self, delta: &LayeredUpdate) -> Result<()> {
        crate::update::check_same_layout(&self.layout, delta.layout())?;
        for (p, d) in self.values.iter_mut().zip(delta.values()) {
            *p -= d;
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i} after update")));
        }
        Ok(())
    }

    fn logits(&self, x: &[f64], scratch: &mut Scratch) -> Vec<f64> {
        match self.arch {
            Architecture::Logreg { inputs, classes } => {
                let (w, b) = (&self.values[..classes * inputs], &self.values[classes * inputs..]);
                (0..classes)
                    .map(|c| {
                        b[c] + w[c * inputs..(c + 1) * inputs]
                            .iter()
                            .zip(x)
                            .map(|(wj, xj)| wj * xj)
                            .sum::<f64>()
                    })
                    .collect()
            }
            Architecture::Mlp2 {
                inputs,
                hidden,
                classes,
            } => {
                let w1_len = hidden * inputs;
                let w1 = &self.values[..w1_len];
                let b1 = &self.values[w1_len..w1_len + hidden];
                let w2_start = w1_len + hidden;
                let w2 = &self.values[w2_start..w2_start + classes * hidden];
                let b2 = &self.values[w2_start + classes * hidden..];

                scratch.pre.clear();
                scratch.act.clear();
                for k in 0..hidden {
                    let a = b1[k]
                        + w1[k * inputs..(k + 1) * inputs]
                            .iter()
                            .zip(x)
                            .map(|(wj, xj)| wj * xj)
                            .sum::<f64>();
                    scratch.pre.push(a);
                    scratch.act.push(if a > 0.0 { a } else { 0.0 });
                }
                (0..classes)
                    .map(|c| {
                        b2[c] + w2[c * hidden..(c + 1) * hidden]
                            .iter()
                            .zip(&scratch.act)
                            .map(|(wk, hk)| wk * hk)
                            .sum::<f64>()
                    })
                    .collect()
            }
        }
    }

    /// Mean cross-entropy loss and its exact gradient over the minibatch
    /// rows named by `idx`.
    pub fn forward_backward(&self, data: &Dataset, idx: &[usize]) -> Result<(f64, LayeredUpdate)> {
        if idx.is_empty() {
            return Err(Error::invalid("empty minibatch"));
        }
        if data.dim() != self.arch.inputs() {
            return Err(Error::invalid(format!(
                "feature dimension {} does not match model inputs {}",
                data.dim(),
                self.arch.inputs()
            )));
        }
        if data.num_classes() != self.arch.classes() {
            return Err(Error::invalid(format!(
                "dataset has {} classes, model expects {}",
                data.num_classes(),
                self.arch.classes()
            )));
        }
        let mut grad = vec![0.0; self.layout.total_len()];
        let mut loss = 0.0;
        let mut scratch = Scratch::default();
        for &i in idx {
            let x = data.row(i);
            let y = data.label(i);
            let logits = self.logits(x, &mut scratch);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
            loss += log_z - logits[y];

            let probs: Vec<f64> = logits.iter().map(|z| (z - log_z).exp()).collect();
            match self.arch {
                Architecture::Logreg { inputs, classes } => {
                    for c in 0..classes {
                        let g = probs[c] - if c == y { 1.0 } else { 0.0 };
                        let row = &mut grad[c * inputs..(c + 1) * inputs];
                        for (gw, xj) in row.iter_mut().zip(x) {
                            *gw += g * xj;
                        }
                        grad[classes * inputs + c] += g;
                    }
                }
                Architecture::Mlp2 {
                    inputs,
                    hidden,
                    classes,
                } => {
                    let w1_len = hidden * inputs;
                    let w2_start = w1_len + hidden;
                    let w2 = &self.values[w2_start..w2_start + classes * hidden];

                    let mut hidden_grad = vec![0.0; hidden];
                    for c in 0..classes {
                        let g = probs[c] - if c == y { 1.0 } else { 0.0 };
                        let row = &mut grad[w2_start + c * hidden..w2_start + (c + 1) * hidden];
                        for (k, (gw, hk)) in row.iter_mut().zip(&scratch.act).enumerate() {
                            *gw += g * hk;
                            hidden_grad[k] += g * w2[c * hidden + k];
                        }
                        grad[w2_start + classes * hidden + c] += g;
                    }
                    for k in 0..hidden {
                        if scratch.pre[k] <= 0.0 {
                            continue;
                        }
                        let ga = hidden_grad[k];
                        let row = &mut grad[k * inputs..(k + 1) * inputs];
                        for (gw, xj) in row.iter_mut().zip(x) {
                            *gw += ga * xj;
                        }
                        grad[w1_len + k] += ga;
                    }
                }
            }
        }
        let inv = 1.0 / idx.len() as f64;
        for g in grad.iter_mut() {
            *g *= inv;
        }
        Ok((loss * inv, LayeredUpdate::new(grad, self.layout.clone())?))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut scratch = Scratch::default();
        let logits = self.logits(x, &mut scratch);
        let mut best = 0;
        for (c, z) in logits.iter().enumerate() {
            if *z > logits[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        let hits = (0..data.len())
            .filter(|&i| self.predict(data.row(i)) == data.label(i))
            .count();
        hits as f64 / data.len() as f64
    }

    pub fn mean_loss(&self, data: &Dataset) -> f64 {
        let idx: Vec<usize> = (0..data.len()).collect();
        let (loss, _) = self
            .forward_backward(data, &idx)
            .expect("dataset matches the model");
        loss
    }
}

#[derive(Default)]
struct Scratch {
    pre: Vec<f64>,
    act: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use rand_chacha::rand_core::SeedableRng;

    fn two_class_batch() -> Dataset {
        Dataset::new(
            vec![1.0, 0.0, 0.0, 1.0],
            2,
            vec![0, 1],
            2,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_softmax_loss() {
        let model = ModelState::zeros(Architecture::Logreg { inputs: 2, classes: 2 }).unwrap();
        let data = two_class_batch();
        let (loss, _) = model.forward_backward(&data, &[0, 1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn duplicated_sample_doubles_its_weight_in_the_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = ModelState::init(Architecture::Logreg { inputs: 2, classes: 2 }, &mut rng).unwrap();
        let data = two_class_batch();
        let (_, g_a) = model.forward_backward(&data, &[0]).unwrap();
        let (_, g_b) = model.forward_backward(&data, &[1]).unwrap();
        let (_, g_dup) = model.forward_backward(&data, &[0, 1, 1]).unwrap();
        for ((a, b), d) in g_a.values().iter().zip(g_b.values()).zip(g_dup.values()) {
            assert!(((a + 2.0 * b) / 3.0 - d).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = crate::data::synth_gaussian_mixture(3, 5, 8, 0.8, 42).unwrap();
        for arch in [
            Architecture::Logreg { inputs: 5, classes: 3 },
            Architecture::Mlp2 { inputs: 5, hidden: 4, classes: 3 },
        ] {
            let model = ModelState::init(arch, &mut rng).unwrap();
            let idx: Vec<usize> = (0..8).collect();
            let (_, grad) = model.forward_backward(&data, &idx).unwrap();
            let d = model.values().len();
            for probe in 0..d {
                let step = 1e-5;
                let mut plus = model.clone();
                plus.values[probe] += step;
                let mut minus = model.clone();
                minus.values[probe] -= step;
                let (lp, _) = plus.forward_backward(&data, &idx).unwrap();
                let (lm, _) = minus.forward_backward(&data, &idx).unwrap();
                let fd = (lp - lm) / (2.0 * step);
                let g = grad.values()[probe];
                let rel = (fd - g).abs() / g.abs().max(1.0);
                assert!(rel < 1e-6, "{arch:?} coordinate {probe}: fd {fd} vs {g}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let model = ModelState::zeros(Architecture::Logreg { inputs: 3, classes: 2 }).unwrap();
        let data = two_class_batch();
        assert!(model.forward_backward(&data, &[0]).is_err());
        assert!(model
            .forward_backward(&two_class_batch(), &[])
            .is_err_and(|e| matches!(e, Error::InvalidArgument(_))));
    }
}
