//! Layers assembled from autograd primitives.
//!
//! Each layer only stores [`ParamId`]s; values live in the [`ParamStore`] the
//! graph borrows, so the same layer definition serves training, inference and
//! finite-difference checks.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, din: usize, dout: usize, rng: &mut R) -> Self {
        let weight = store.add_xavier(&format!("{name}.weight"), group, din, dout, rng);
        let bias = Some(store.add_zeros(&format!("{name}.bias"), group, 1, dout));
        Self { weight, bias }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, group: ParamGroup, din: usize, dout: usize) -> Self {
        let weight = store.add_zeros(&format!("{name}.weight"), group, din, dout);
        let bias = Some(store.add_zeros(&format!("{name}.bias"), group, 1, dout));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let y = g.matmul(x, g.param(self.weight));
        match self.bias {
            Some(b) => g.add_row(y, g.param(b)),
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gain: store.add_full(&format!("{name}.gain"), group, 1, dim, 1.0),
            shift: store.add_zeros(&format!("{name}.shift"), group, 1, dim),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x, LN_EPS);
        let s = g.mul_row(n, g.param(self.gain));
        g.add_row(s, g.param(self.shift))
    }
}

/// `Linear → GELU → Linear`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        din: usize,
        hidden: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), group, din, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), group, hidden, dout, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let h = g.gelu(self.fc1.forward(g, x));
        self.fc2.forward(g, h)
    }
}

/// Which keys a query row may attend to.
#[derive(Clone, Copy, Debug)]
pub enum AttnMask<'a> {
    None,
    /// One flag per key; `false` keys are excluded for every query.
    Keys(&'a [bool]),
    /// Query `i` sees keys `0..=i` that are also valid.
    Causal(&'a [bool]),
}

impl AttnMask<'_> {
    fn additive(&self, lq: usize, lk: usize) -> Option<Tensor> {
        match *self {
            AttnMask::None => None,
            AttnMask::Keys(valid) => {
                assert_eq!(valid.len(), lk, "key mask length");
                if valid.iter().all(|&v| v) {
                    return None;
                }
                let mut t = Tensor::zeros(lq, lk);
                for i in 0..lq {
                    for (j, &ok) in valid.iter().enumerate() {
                        if !ok {
                            t.set(i, j, f64::NEG_INFINITY);
                        }
                    }
                }
                Some(t)
            }
            AttnMask::Causal(valid) => {
                assert_eq!(valid.len(), lk, "key mask length");
                let mut t = Tensor::zeros(lq, lk);
                for i in 0..lq {
                    for (j, &ok) in valid.iter().enumerate() {
                        if j > i || !ok {
                            t.set(i, j, f64::NEG_INFINITY);
                        }
                    }
                }
                Some(t)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    /// Queries of width `dq`, keys/values of width `dkv`, attention width `dim`,
    /// output width `dout`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dq: usize,
        dkv: usize,
        dim: usize,
        dout: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "attention width {dim} not divisible by {heads} heads");
        Self {
            wq: Linear::new(store, &format!("{name}.q"), group, dq, dim, rng),
            wk: Linear::new(store, &format!("{name}.k"), group, dkv, dim, rng),
            wv: Linear::new(store, &format!("{name}.v"), group, dkv, dim, rng),
            wo: Linear::new(store, &format!("{name}.o"), group, dim, dout, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &Graph, queries: Var, keys: Var, mask: AttnMask<'_>) -> Var {
        let heads = self.attend(g, queries, keys, mask);
        self.wo.forward(g, heads)
    }

    /// Concatenated per-head outputs before the output projection.
    pub fn attend(&self, g: &Graph, queries: Var, keys: Var, mask: AttnMask<'_>) -> Var {
        let q = self.wq.forward(g, queries);
        let k = self.wk.forward(g, keys);
        let v = self.wv.forward(g, keys);
        let (lq, _) = g.shape(q);
        let (lk, _) = g.shape(k);
        let additive = mask.additive(lq, lk);
        let dh = self.dim / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let mut scores = g.scale(g.matmul_t(qh, kh), scale);
            if let Some(m) = &additive {
                scores = g.add_const(scores, m);
            }
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        }
    }
}

/// Pre-norm self-attention block: `x + MHA(LN x)`, then `x + FFN(LN x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), group, dim, dim, dim, dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), group, dim, 4 * dim, dim, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var, mask: AttnMask<'_>) -> Var {
        let h = self.ln1.forward(g, x);
        let x = g.add(x, self.attn.forward(g, h, h, mask));
        let h = self.ln2.forward(g, x);
        g.add(x, self.ffn.forward(g, h))
    }
}

/// Pre-norm decoder block: self-attention, cross-attention into a memory,
/// feed-forward, each with a residual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: Mlp,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        memory_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), group, dim, dim, dim, dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), group, dim, memory_dim, dim, dim, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), group, dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), group, dim, 4 * dim, dim, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var, self_mask: AttnMask<'_>, memory: Var, memory_mask: AttnMask<'_>) -> Var {
        let h = self.ln1.forward(g, x);
        let x = g.add(x, self.self_attn.forward(g, h, h, self_mask));
        let h = self.ln2.forward(g, x);
        let x = g.add(x, self.cross_attn.forward(g, h, memory, memory_mask));
        let h = self.ln3.forward(g, x);
        g.add(x, self.ffn.forward(g, h))
    }
}
