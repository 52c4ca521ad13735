use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::autograd::{Graph, SparseRows, Var};
use crate::error::Result;
use crate::gscore::{idw_weights, Point};
use crate::nn::{AttnMask, DecoderLayer, LayerNorm, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Turns the language query into a per-object kernel and scores every
/// Gaussian with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDecoder {
    pub query: Linear,
    pub layers: Vec<DecoderLayer>,
    pub ln: LayerNorm,
    pub kernel: Linear,
}

/// IDW operator from `src` onto the `n_max` padded rows. Rows at or beyond
/// `real.len()` get no weights, so they come out as zero rows.
pub fn padded_upsampler(src: &[Point], real: &[Point], n_max: usize, cfg: &ModelConfig) -> Result<Rc<SparseRows>> {
    let w = idw_weights(src, real, cfg.idw_k.min(src.len()), cfg.idw_power)?;
    let mut rows: Vec<Vec<(usize, f64)>> = (0..real.len()).map(|j| w.row(j).to_vec()).collect();
    rows.resize(n_max, Vec::new());
    Ok(Rc::new(SparseRows::new(src.len(), rows)))
}

/// `sigmoid(F_valid · kernelᵀ) ⊙ valid`, an `n × 1` column.
pub fn score_points(g: &Graph, f_valid: Var, kernel: Var, valid: &Tensor) -> Var {
    let logits = g.matmul_t(f_valid, kernel);
    g.mul_col(g.sigmoid(logits), g.constant(valid.clone()))
}

impl MaskDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let grp = ParamGroup::Decoder;
        Self {
            query: Linear::new(store, "decoder.query", grp, cfg.d_text, cfg.d, rng),
            layers: (0..cfg.decoder_layers)
                .map(|i| DecoderLayer::new(store, &format!("decoder.layer{i}"), grp, cfg.d, cfg.d, cfg.heads, rng))
                .collect(),
            ln: LayerNorm::new(store, "decoder.ln", grp, cfg.d),
            // Zero output weights start every score at exactly one half.
            kernel: Linear::zeroed(store, "decoder.kernel", grp, cfg.d, cfg.d),
        }
    }

    /// `1 × d` dynamic kernel from the `1 × d_text` query attending to the
    /// valid rows of `memory`.
    pub fn dynamic_kernel(&self, g: &Graph, h_aff: Var, memory: Var, valid: &[bool]) -> Var {
        let mut x = self.query.forward(g, h_aff);
        for layer in &self.layers {
            x = layer.forward(g, x, AttnMask::None, memory, AttnMask::Keys(valid));
        }
        self.kernel.forward(g, self.ln.forward(g, x))
    }
}
