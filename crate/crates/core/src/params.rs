//! Named trainable parameters.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse ownership of parameters, used for freezing policies and
/// checkpoint grouping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Token embeddings and self-attention layers of the question encoder.
    TextEncoder,
    /// The MLP turning `h_aff` into the `H_Aff` query.
    TextProjection,
    /// Causal answer decoder.
    AnswerHead,
    /// Hierarchical 3-D encoder and its refinement layers.
    Backbone,
    /// Cross/channel attention and granularity gates.
    Fusion,
    /// Dynamic-kernel decoder.
    Decoder,
    /// Structure-alignment encoders and shared attention.
    Alignment,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::TextEncoder,
        ParamGroup::TextProjection,
        ParamGroup::AnswerHead,
        ParamGroup::Backbone,
        ParamGroup::Fusion,
        ParamGroup::Decoder,
        ParamGroup::Alignment,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names: module constructors own unique prefixes.
    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        let prev = self.index.insert(name.to_string(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name: name.to_string(), group, value });
        id
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: &str,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = libm::sqrt(6.0 / (rows + cols) as f64);
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, group, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize) -> ParamId {
        self.add(name, group, Tensor::zeros(rows, cols))
    }

    pub fn add_full(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, group, Tensor::full(rows, cols, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), ParamId(i))).collect();
    }

    /// Order-sensitive FNV-1a over the raw bits of every parameter in `group`.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| p.group == group) {
            for x in p.value.data() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Copy values from `other` for every parameter with a matching name and shape.
    /// Returns the number of copied tensors.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(id) = other.id(&p.name) {
                let src = other.get(id);
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    n += 1;
                }
            }
        }
        n
    }
}
