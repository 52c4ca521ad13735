use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::autograd::{Graph, Var};
use crate::nn::{AttnMask, Linear, Mlp, MultiHeadAttention};
use crate::params::{ParamGroup, ParamId, ParamStore};

/// Language-to-geometry fusion shared by the three levels. Only the
/// positional embedding differs per level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fusion {
    pub cross: MultiHeadAttention,
    /// `3 × d_text`, one row per level.
    pub pos_emb: ParamId,
    pub ffn: Mlp,
    pub to_d: Linear,
    pub squeeze: Linear,
    pub excite: Linear,
    pub proj: Linear,
    /// `3 × d`; zero at start so every level weighs 1/3.
    pub w_gate: ParamId,
}

impl Fusion {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, dt) = (cfg.d, cfg.d_text);
        let grp = ParamGroup::Fusion;
        let bottleneck = (2 * d / 4).max(1);
        Self {
            cross: MultiHeadAttention::new(store, "fusion.cross", grp, dt, d, dt, dt, cfg.text_heads, rng),
            pos_emb: store.add_xavier("fusion.pos_emb", grp, 3, dt, rng),
            ffn: Mlp::new(store, "fusion.ffn", grp, dt, 2 * dt, dt, rng),
            to_d: Linear::new(store, "fusion.to_d", grp, dt, d, rng),
            squeeze: Linear::new(store, "fusion.squeeze", grp, 2 * d, bottleneck, rng),
            excite: Linear::new(store, "fusion.excite", grp, bottleneck, d, rng),
            proj: Linear::new(store, "fusion.proj", grp, 2 * d, d, rng),
            w_gate: store.add_zeros("fusion.w_gate", grp, 3, d),
        }
    }

    /// `1 × d_text` spatial summary of `f_g` as seen from `h_aff`.
    pub fn cross_attend(&self, g: &Graph, h_aff: Var, f_g: Var, level: usize) -> Var {
        let a = self.cross.forward(g, h_aff, f_g, AttnMask::None);
        g.add(a, g.row(g.param(self.pos_emb), level))
    }

    /// Residual feed-forward on the cross-attention output, mapped to width `d`.
    pub fn spatial_residual(&self, g: &Graph, f_spatial: Var) -> Var {
        let s = g.add(f_spatial, self.ffn.forward(g, f_spatial));
        self.to_d.forward(g, s)
    }

    /// Per-channel sigmoid gates (`1 × d`) computed from the pooled
    /// concatenation.
    pub fn channel_gates(&self, g: &Graph, concat: Var) -> Var {
        let pooled = g.mean_rows(concat);
        let h = g.gelu(self.squeeze.forward(g, pooled));
        g.sigmoid(self.excite.forward(g, h))
    }

    /// `proj([F̄ ‖ gates ⊙ F_g]) + F_g` with `F̄` broadcast over the points.
    pub fn channel_attend(&self, g: &Graph, f_bar: Var, f_g: Var) -> Var {
        let (n, _) = g.shape(f_g);
        let concat = g.concat_cols(&[g.broadcast_rows(f_bar, n), f_g]);
        let gates = self.channel_gates(g, concat);
        let rescaled = g.concat_cols(&[g.broadcast_rows(f_bar, n), g.mul_row(f_g, gates)]);
        g.add(self.proj.forward(g, rescaled), f_g)
    }

    /// Mixes levels already upsampled to a common resolution. Returns the
    /// fused `N × d` features and the `3 × d` gate weights.
    pub fn select_granularity(&self, g: &Graph, upsampled: &[Var; 3]) -> (Var, Var) {
        let w_gate = g.param(self.w_gate);
        let logits: Vec<Var> =
            upsampled.iter().enumerate().map(|(i, &f)| g.mul(g.row(w_gate, i), g.mean_rows(f))).collect();
        let weights = level_softmax(g, g.concat_rows(&logits));
        (mix_levels(g, upsampled, weights), weights)
    }
}

/// Softmax down each column of a `3 × d` logit block.
pub fn level_softmax(g: &Graph, logits: Var) -> Var {
    g.transpose(g.softmax_rows(g.transpose(logits)))
}

/// `Σ_i w_i ⊙ F̄_i` with `w_i` row `i` of `weights`.
pub fn mix_levels(g: &Graph, upsampled: &[Var; 3], weights: Var) -> Var {
    let mut acc = g.mul_row(upsampled[0], g.row(weights, 0));
    for (i, &f) in upsampled.iter().enumerate().skip(1) {
        acc = g.add(acc, g.mul_row(f, g.row(weights, i)));
    }
    acc
}
