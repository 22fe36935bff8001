//! Flat parameter storage with a named tensor layout.
//!
//! All trainable tensors of a network live in one contiguous `Vec<f64>`.
//! Layers hold [`ParamId`] handles into a shared [`Layout`]; gradients use
//! a second buffer with the same layout. This keeps the optimizer, the
//! finite-difference checker and serialization oblivious to architecture.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WEIGHTS_FORMAT: &str = "poseforge-weights-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        let len = shape.iter().product();
        self.entries.push(ParamEntry { name, shape: shape.to_vec(), offset: self.total, len });
        self.total += len;
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }
}

/// Values (or gradients) for every tensor of a [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![0.0; layout.total()];
        Self { layout, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn from_vec(layout: Arc<Layout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total() {
            return Err(Error::Shape(format!("expected {} values, got {}", layout.total(), data.len())));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let e = self.layout.entry(id);
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = self.layout.entry(id);
        let (o, l) = (e.offset, e.len);
        &mut self.data[o..o + l]
    }

    fn dims2(&self, id: ParamId) -> (usize, usize) {
        match self.layout.entry(id).shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            s => panic!("parameter {} has rank {}", self.layout.entry(id).name, s.len()),
        }
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let dims = self.dims2(id);
        ArrayView2::from_shape(dims, self.slice(id)).expect("layout shape")
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let dims = self.dims2(id);
        ArrayViewMut2::from_shape(dims, self.slice_mut(id)).expect("layout shape")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.slice(id))
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(self.slice_mut(id))
    }

    /// `self += other`, element-wise in index order.
    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in self.data.iter_mut() {
            *a *= k;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Serializes to the weights JSON format at full double precision.
    pub fn to_weights_json(&self) -> String {
        let tensors: BTreeMap<&str, WireTensor> = self
            .layout
            .entries()
            .iter()
            .map(|e| {
                (e.name.as_str(), WireTensor { shape: e.shape.clone(), data: self.data[e.offset..e.offset + e.len].to_vec() })
            })
            .collect();
        serde_json::to_string(&WireWeights { format: WEIGHTS_FORMAT.into(), tensors }).expect("weights serialize")
    }

    /// Loads values for `layout` from a weights document. Every tensor of
    /// the layout must be present with a matching shape.
    pub fn from_weights_json(layout: Arc<Layout>, text: &str) -> Result<Self> {
        let wire: WireWeights<'_> = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if wire.format != WEIGHTS_FORMAT {
            return Err(Error::Parse(format!("unknown weights format {:?}", wire.format)));
        }
        let mut out = ParamSet::zeros(layout);
        for e in out.layout.clone().entries() {
            let t = wire.tensors.get(e.name.as_str()).ok_or_else(|| Error::Parse(format!("missing tensor {}", e.name)))?;
            if t.shape != e.shape || t.data.len() != e.len {
                return Err(Error::Shape(format!("tensor {}: expected shape {:?}, got {:?}", e.name, e.shape, t.shape)));
            }
            if !t.data.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {}", e.name)));
            }
            out.data[e.offset..e.offset + e.len].copy_from_slice(&t.data);
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct WireTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WireWeights<'a> {
    format: String,
    #[serde(borrow)]
    tensors: BTreeMap<&'a str, WireTensor>,
}
