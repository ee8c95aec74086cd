//! Dataset synthesis, IDX ingestion and client partitioning.

use std::collections::BTreeSet;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::update::ClientId;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Scale of the simplex the synthetic class means sit on.
const MEAN_SCALE: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
    /// (rows, cols) of the source images, kept so IDX re-serialization is
    /// byte-exact.
    image_shape: Option<(u32, u32)>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dim == 0 || labels.is_empty() {
            return Err(Error::invalid("dataset needs at least one sample and feature"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values for {} samples of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::invalid(format!("label {l} outside {num_classes} classes")));
        }
        Ok(Dataset {
            features,
            dim,
            labels,
            num_classes,
            image_shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

/// One client's slice of a dataset plus its honesty flag.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: ClientId,
    pub indices: Vec<usize>,
    pub honest: bool,
}

/// Gaussian mixture with class means on a scaled simplex (pairwise
/// equidistant by construction). Deterministic per seed.
pub fn synth_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::invalid("mixture needs at least two classes"));
    }
    if dim < num_classes {
        return Err(Error::invalid(format!(
            "dim {dim} too small for {num_classes} simplex means"
        )));
    }
    if samples_per_class == 0 {
        return Err(Error::invalid("mixture needs samples in every class"));
    }
    if !(spread >= 0.0) {
        return Err(Error::invalid("spread must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(num_classes * samples_per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for class in 0..num_classes {
        for _ in 0..samples_per_class {
            for j in 0..dim {
                let mean = if j == class { MEAN_SCALE } else { 0.0 };
                features.push(mean + spread * rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(class);
        }
    }
    Dataset::new(features, dim, labels, num_classes)
}

/// Loads an MNIST-style IDX image/label pair. Pixels scale to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut img = IdxReader { bytes: images, pos: 0 };
    let magic = img.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::DataFormat(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = img.u32_be()? as usize;
    let rows = img.u32_be()?;
    let cols = img.u32_be()?;
    let dim = (rows as usize) * (cols as usize);
    if dim == 0 || count == 0 {
        return Err(Error::DataFormat("empty image file".into()));
    }
    let pixels = img.take(count * dim)?;
    if img.pos != images.len() {
        return Err(Error::DataFormat("trailing bytes in image file".into()));
    }

    let mut lbl = IdxReader { bytes: labels, pos: 0 };
    let magic = lbl.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::DataFormat(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = lbl.u32_be()? as usize;
    if label_count != count {
        return Err(Error::DataFormat(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let raw_labels = lbl.take(count)?;
    if lbl.pos != labels.len() {
        return Err(Error::DataFormat("trailing bytes in label file".into()));
    }
    let mut parsed_labels = Vec::with_capacity(count);
    for &b in raw_labels {
        if b > 9 {
            return Err(Error::DataFormat(format!("label {b} outside 0-9")));
        }
        parsed_labels.push(b as usize);
    }

    let features: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let mut ds = Dataset::new(features, dim, parsed_labels, 10)?;
    ds.image_shape = Some((rows, cols));
    Ok(ds)
}

/// Inverse of [`parse_idx`]; the oracle for byte-exact round trips.
pub fn serialize_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = ds.image_shape.unwrap_or((ds.dim as u32, 1));
    if (rows as usize) * (cols as usize) != ds.dim {
        return Err(Error::invalid("image shape does not match feature dim"));
    }
    let mut images = Vec::with_capacity(16 + ds.len() * ds.dim);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    images.extend_from_slice(&rows.to_be_bytes());
    images.extend_from_slice(&cols.to_be_bytes());
    for v in &ds.features {
        images.push((v * 255.0).round() as u8);
    }
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|l| *l as u8));
    Ok((images, labels))
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::DataFormat("truncated IDX file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Random permutation split into near-equal shards (sizes differ by <= 1).
pub fn partition_iid(ds: &Dataset, n: usize, seed: u64) -> Result<Vec<ClientShard>> {
    if n == 0 || n > ds.len() {
        return Err(Error::invalid(format!(
            "cannot split {} samples over {n} clients",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    perm.shuffle(&mut rng);
    let base = ds.len() / n;
    let extra = ds.len() % n;
    let mut shards = Vec::with_capacity(n);
    let mut cursor = 0;
    for client_id in 0..n {
        let take = base + usize::from(client_id < extra);
        shards.push(ClientShard {
            client_id,
            indices: perm[cursor..cursor + take].to_vec(),
            honest: true,
        });
        cursor += take;
    }
    Ok(shards)
}

/// Per class, a symmetric Dirichlet draw over clients allocates that
/// class's samples proportionally (largest-remainder rounding). Extreme
/// draws can leave shards empty; those are repaired by moving one sample
/// from the currently largest shard.
pub fn partition_dirichlet(ds: &Dataset, n: usize, alpha: f64, seed: u64) -> Result<Vec<ClientShard>> {
    if n == 0 || n > ds.len() {
        return Err(Error::invalid(format!(
            "cannot split {} samples over {n} clients",
            ds.len()
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("dirichlet alpha must be positive"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for i in 0..ds.len() {
        by_class[ds.label(i)].push(i);
    }
    if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::invalid(format!("class {c} has no samples to partition")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(format!("gamma: {e}")))?;
    let mut shards: Vec<ClientShard> = (0..n)
        .map(|client_id| ClientShard {
            client_id,
            indices: Vec::new(),
            honest: true,
        })
        .collect();

    for samples in by_class.iter_mut() {
        samples.shuffle(&mut rng);
        let mut weights: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            weights = vec![1.0; n];
        }
        let counts = largest_remainder(&weights, samples.len());
        let mut cursor = 0;
        for (shard, count) in shards.iter_mut().zip(counts) {
            shard.indices.extend_from_slice(&samples[cursor..cursor + count]);
            cursor += count;
        }
    }

    // Local SGD needs every shard nonempty.
    loop {
        let Some(empty) = shards.iter().position(|s| s.indices.is_empty()) else {
            break;
        };
        let largest = shards
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.indices.len().cmp(&b.indices.len()).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .expect("shards exist");
        let moved = shards[largest].indices.pop().expect("largest shard is nonempty");
        shards[empty].indices.push(moved);
    }
    Ok(shards)
}

/// Proportional integer allocation that conserves the total exactly.
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let weight_sum: f64 = weights.iter().sum();
    let mut counts = Vec::with_capacity(weights.len());
    let mut fractions: Vec<(f64, usize)> = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, w) in weights.iter().enumerate() {
        let share = w / weight_sum * total as f64;
        let floor = share.floor() as usize;
        counts.push(floor);
        assigned += floor;
        fractions.push((share - floor as f64, i));
    }
    fractions.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
    for &(_, i) in fractions.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Flags `floor(ratio * n)` uniformly chosen clients as dishonest.
pub fn mark_malicious(mut shards: Vec<ClientShard>, attack_ratio: f64, seed: u64) -> Result<Vec<ClientShard>> {
    if !(0.0..=1.0).contains(&attack_ratio) {
        return Err(Error::invalid(format!("attack ratio {attack_ratio} outside [0, 1]")));
    }
    let n = shards.len();
    // Guard the floor against representation error in ratio * n.
    let count = (attack_ratio * n as f64 * (1.0 + 1e-12)).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<usize> = rand::seq::index::sample(&mut rng, n, count).into_iter().collect();
    for (i, shard) in shards.iter_mut().enumerate() {
        shard.honest = !chosen.contains(&i);
    }
    Ok(shards)
}
