//! Layered parameter-vector algebra.
//!
//! A model update is a flat `f64` vector plus layer-boundary metadata. All
//! aggregators, attacks and the sparsifier operate on this representation.
//! Values are validated to be finite on construction; every operation here
//! is a pure function over immutable data.

use std::sync::Arc;

use crate::error::{Error, Result};

pub type ClientId = usize;

/// One named contiguous segment of the flat coefficient vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered list of layer segments tiling a flat vector exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<LayerSpec>,
    total: usize,
}

impl Layout {
    /// Validates that lengths are positive, offsets strictly increase and
    /// the segments tile `[0, total)` without gaps.
    pub fn new(specs: Vec<LayerSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::invalid("layout needs at least one layer"));
        }
        let mut expected_offset = 0usize;
        for s in &specs {
            if s.len == 0 {
                return Err(Error::invalid(format!("layer {} has zero length", s.name)));
            }
            if s.offset != expected_offset {
                return Err(Error::invalid(format!(
                    "layer {} at offset {} does not tile the vector (expected {})",
                    s.name, s.offset, expected_offset
                )));
            }
            expected_offset += s.len;
        }
        Ok(Layout {
            specs,
            total: expected_offset,
        })
    }

    /// Builds a layout from `(name, len)` pairs, deriving offsets.
    pub fn from_lens<S: Into<String>>(parts: impl IntoIterator<Item = (S, usize)>) -> Result<Arc<Self>> {
        let mut specs = Vec::new();
        let mut offset = 0usize;
        for (name, len) in parts {
            specs.push(LayerSpec {
                name: name.into(),
                offset,
                len,
            });
            offset += len;
        }
        Layout::new(specs).map(Arc::new)
    }

    pub fn layer_count(&self) -> usize {
        self.specs.len()
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }
}

/// A client's model update: flat values plus the shared layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredUpdate {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl LayeredUpdate {
    /// Rejects dimension mismatches and any non-finite entry.
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::LayoutMismatch(format!(
                "update has {} values, layout expects {}",
                values.len(),
                layout.total_len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("update coefficient {i}")));
        }
        Ok(LayeredUpdate { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        LayeredUpdate {
            values: vec![0.0; layout.total_len()],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Read-only view of the contiguous sub-vector for layer `l`.
    pub fn slice_layer(&self, l: usize) -> Result<&[f64]> {
        let spec = self.layout.specs.get(l).ok_or(Error::LayerOutOfRange {
            index: l,
            layers: self.layout.layer_count(),
        })?;
        Ok(&self.values[spec.offset..spec.offset + spec.len])
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        LayeredUpdate::new(self.values.iter().map(|v| v * c).collect(), self.layout.clone())
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        check_same_layout(&self.layout, &other.layout)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| f(*a, *b))
            .collect();
        LayeredUpdate::new(values, self.layout.clone())
    }

    /// Flat binary record: LE u32 layer count, per layer (LE u16 name
    /// length, UTF-8 name, LE u32 length), then the values as LE f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.layout.layer_count() as u32).to_le_bytes());
        for spec in self.layout.specs() {
            out.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
            out.extend_from_slice(spec.name.as_bytes());
            out.extend_from_slice(&(spec.len as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let layer_count = cur.u32()? as usize;
        let mut parts = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::DataFormat("layer name is not UTF-8".into()))?
                .to_string();
            let len = cur.u32()? as usize;
            parts.push((name, len));
        }
        let layout = Layout::from_lens(parts)?;
        let mut values = Vec::with_capacity(layout.total_len());
        for _ in 0..layout.total_len() {
            values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        if cur.pos != bytes.len() {
            return Err(Error::DataFormat("trailing bytes in update record".into()));
        }
        LayeredUpdate::new(values, layout)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::DataFormat("truncated update record".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// A round's worth of updates sharing one layout, in client-id order.
#[derive(Debug, Clone)]
pub struct UpdateBatch {
    updates: Vec<LayeredUpdate>,
    client_ids: Vec<ClientId>,
}

impl UpdateBatch {
    pub fn new(updates: Vec<LayeredUpdate>, client_ids: Vec<ClientId>) -> Result<Self> {
        if updates.is_empty() {
            return Err(Error::invalid("batch needs at least one update"));
        }
        if updates.len() != client_ids.len() {
            return Err(Error::invalid(format!(
                "{} updates but {} client ids",
                updates.len(),
                client_ids.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &client_ids {
            if !seen.insert(*id) {
                return Err(Error::invalid(format!("duplicate client id {id}")));
            }
        }
        let first = updates[0].layout().clone();
        for u in &updates[1..] {
            check_same_layout(&first, u.layout())?;
        }
        Ok(UpdateBatch {
            updates,
            client_ids,
        })
    }

    pub fn n(&self) -> usize {
        self.updates.len()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.updates[0].layout()
    }

    pub fn updates(&self) -> &[LayeredUpdate] {
        &self.updates
    }

    pub fn update(&self, i: usize) -> &LayeredUpdate {
        &self.updates[i]
    }

    pub fn client_ids(&self) -> &[ClientId] {
        &self.client_ids
    }
}

pub(crate) fn check_same_layout(a: &Arc<Layout>, b: &Arc<Layout>) -> Result<()> {
    if Arc::ptr_eq(a, b) || a == b {
        Ok(())
    } else {
        Err(Error::LayoutMismatch(
            "updates do not share a layout".into(),
        ))
    }
}

/// Euclidean norm of a slice.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Elementwise weighted sum over the batch with the shared layout.
pub fn linear_combine(batch: &UpdateBatch, weights: &[f64]) -> Result<LayeredUpdate> {
    if weights.len() != batch.n() {
        return Err(Error::invalid(format!(
            "{} weights for {} updates",
            weights.len(),
            batch.n()
        )));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("weight {i}")));
    }
    let d = batch.layout().total_len();
    let mut acc = vec![0.0; d];
    for (u, w) in batch.updates().iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(u.values()) {
            *a += w * v;
        }
    }
    LayeredUpdate::new(acc, batch.layout().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout_ab() -> Arc<Layout> {
        Layout::from_lens([("a", 1), ("b", 3)]).unwrap()
    }

    #[test]
    fn slice_layer_examples() {
        let u = LayeredUpdate::new(vec![1.0, 2.0, 3.0, 4.0], layout_ab()).unwrap();
        assert_eq!(u.slice_layer(1).unwrap(), &[2.0, 3.0, 4.0]);
        assert_eq!(u.slice_layer(0).unwrap(), &[1.0]);

        let single = LayeredUpdate::new(vec![5.0, 6.0], Layout::from_lens([("w", 2)]).unwrap()).unwrap();
        assert_eq!(single.slice_layer(0).unwrap(), single.values());

        let two = LayeredUpdate::new(
            vec![5.0, -5.0],
            Layout::from_lens([("a", 1), ("b", 1)]).unwrap(),
        )
        .unwrap();
        assert_eq!(two.slice_layer(0).unwrap(), &[5.0]);
        assert!(matches!(
            two.slice_layer(2),
            Err(Error::LayerOutOfRange { index: 2, layers: 2 })
        ));
    }

    #[test]
    fn linear_combine_examples() {
        let layout = Layout::from_lens([("w", 2)]).unwrap();
        let batch = UpdateBatch::new(
            vec![
                LayeredUpdate::new(vec![1.0, 1.0], layout.clone()).unwrap(),
                LayeredUpdate::new(vec![3.0, 3.0], layout.clone()).unwrap(),
            ],
            vec![0, 1],
        )
        .unwrap();
        assert_eq!(
            linear_combine(&batch, &[0.5, 0.5]).unwrap().values(),
            &[2.0, 2.0]
        );
        assert_eq!(
            linear_combine(&batch, &[1.0, 0.0]).unwrap().values(),
            batch.update(0).values()
        );
        assert_eq!(
            linear_combine(&batch, &[0.0, 0.0]).unwrap().values(),
            &[0.0, 0.0]
        );
        assert!(linear_combine(&batch, &[1.0]).is_err());
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(l2_norm(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(l2_norm(&[1.0, 1.0, 1.0, 1.0]), 2.0);
    }

    #[test]
    fn construction_rejects_non_finite() {
        let layout = Layout::from_lens([("w", 2)]).unwrap();
        assert!(LayeredUpdate::new(vec![1.0, f64::NAN], layout.clone()).is_err());
        assert!(LayeredUpdate::new(vec![f64::INFINITY, 0.0], layout.clone()).is_err());
        assert!(LayeredUpdate::new(vec![1.0], layout).is_err());
    }

    #[test]
    fn layout_validation() {
        assert!(Layout::from_lens::<&str>([]).is_err());
        assert!(Layout::from_lens([("a", 0)]).is_err());
        assert!(Layout::new(vec![
            LayerSpec { name: "a".into(), offset: 0, len: 2 },
            LayerSpec { name: "b".into(), offset: 3, len: 1 },
        ])
        .is_err());
    }

    #[test]
    fn batch_rejects_mixed_layouts_and_duplicate_ids() {
        let a = LayeredUpdate::new(vec![1.0, 2.0], Layout::from_lens([("w", 2)]).unwrap()).unwrap();
        let b = LayeredUpdate::new(
            vec![1.0, 2.0],
            Layout::from_lens([("w", 1), ("v", 1)]).unwrap(),
        )
        .unwrap();
        assert!(UpdateBatch::new(vec![a.clone(), b], vec![0, 1]).is_err());
        assert!(UpdateBatch::new(vec![a.clone(), a.clone()], vec![0, 0]).is_err());
        assert!(UpdateBatch::new(vec![], vec![]).is_err());
    }

    #[test]
    fn binary_record_round_trip() {
        let u = LayeredUpdate::new(vec![1.5, -2.25, 0.0, 1e9], layout_ab()).unwrap();
        let bytes = u.to_bytes();
        let back = LayeredUpdate::from_bytes(&bytes).unwrap();
        assert_eq!(u, back);
        assert!(LayeredUpdate::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(LayeredUpdate::from_bytes(&extended).is_err());
    }

    proptest! {
        #[test]
        fn slices_reconstruct_values(values in proptest::collection::vec(-1e6f64..1e6, 6)) {
            let layout = Layout::from_lens([("a", 2), ("b", 3), ("c", 1)]).unwrap();
            let u = LayeredUpdate::new(values.clone(), layout.clone()).unwrap();
            let mut rebuilt = Vec::new();
            for l in 0..layout.layer_count() {
                rebuilt.extend_from_slice(u.slice_layer(l).unwrap());
            }
            prop_assert_eq!(rebuilt, values);
        }

        #[test]
        fn linear_combine_is_linear(
            x in proptest::collection::vec(-1e3f64..1e3, 4),
            y in proptest::collection::vec(-1e3f64..1e3, 4),
            w1 in proptest::collection::vec(-2.0f64..2.0, 2),
            w2 in proptest::collection::vec(-2.0f64..2.0, 2),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let layout = layout_ab();
            let batch = UpdateBatch::new(
                vec![
                    LayeredUpdate::new(x, layout.clone()).unwrap(),
                    LayeredUpdate::new(y, layout.clone()).unwrap(),
                ],
                vec![0, 1],
            ).unwrap();
            let mixed: Vec<f64> = w1.iter().zip(&w2).map(|(u, v)| a * u + b * v).collect();
            let lhs = linear_combine(&batch, &mixed).unwrap();
            let rhs_a = linear_combine(&batch, &w1).unwrap().scale(a).unwrap();
            let rhs_b = linear_combine(&batch, &w2).unwrap().scale(b).unwrap();
            let rhs = rhs_a.add(&rhs_b).unwrap();
            for (l, r) in lhs.values().iter().zip(rhs.values()) {
                let tol = 1e-10 * (1.0 + l.abs().max(r.abs()));
                prop_assert!((l - r).abs() <= tol, "{l} vs {r}");
            }
        }

        #[test]
        fn norm_decomposes_over_layers(values in proptest::collection::vec(-1e3f64..1e3, 6)) {
            let layout = Layout::from_lens([("a", 1), ("b", 2), ("c", 3)]).unwrap();
            let u = LayeredUpdate::new(values, layout.clone()).unwrap();
            let total = l2_norm(u.values()).powi(2);
            let by_layer: f64 = (0..layout.layer_count())
                .map(|l| l2_norm(u.slice_layer(l).unwrap()).powi(2))
                .sum();
            prop_assert!((total - by_layer).abs() <= 1e-10 * (1.0 + total));
        }
    }
}
