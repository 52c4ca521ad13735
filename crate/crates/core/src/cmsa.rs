//! Structure alignment between predicted splat regions and annotated point
//! cloud regions of the same category and affordance.
//!
//! Each side is encoded as "region relative to whole object": the region's
//! tokens attend to the whole object's tokens through an attention block and
//! feed-forward projection shared by both modalities. The loss pulls the
//! splat embedding towards the point-cloud embeddings, weighting clouds whose
//! shape is closer (by Chamfer distance) more heavily.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::gscore::{chamfer_distance, Point, PointCloudObject, STRUCT_DIM};
use crate::nn::{AttnMask, Mlp, MultiHeadAttention};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const STE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmsaConfig {
    /// Embedding width compared by the cosine loss.
    pub d_consis: usize,
    /// Width of the set encoders and the shared attention.
    pub width: usize,
    pub heads: usize,
    pub tau: f64,
    /// Points kept per paired cloud.
    pub pc_points: usize,
}

impl CmsaConfig {
    /// Encoders a quarter of the backbone width `d`.
    pub fn for_width(d: usize) -> Self {
        let width = (d / 4).max(2);
        let heads = if width.is_multiple_of(4) { 4 } else if width.is_multiple_of(2) { 2 } else { 1 };
        Self { d_consis: 256, width, heads, tau: 0.1, pc_points: 256 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            bail!(Argument, "temperature must be positive, got {}", self.tau);
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) || self.d_consis == 0 {
            bail!(Config, "alignment width {} with {} heads", self.width, self.heads);
        }
        if self.pc_points == 0 {
            bail!(Config, "pc_points must be positive");
        }
        Ok(())
    }
}

/// How the predicted mask enters the alignment graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Hard threshold forward, identity backward.
    Ste,
    /// The raw scores forward and backward. Used to finite-difference the
    /// surrogate path; the selected rows are still the thresholded ones.
    Relaxed,
}

/// Forward `1[s ≥ 0.5]`, backward identity.
pub fn ste_binarize(g: &Graph, scores: Var) -> Var {
    let hard = g.with_value(scores, |s| s.map(|x| if x >= STE_THRESHOLD { 1.0 } else { 0.0 }));
    g.straight_through(scores, hard)
}

/// Two-stage set encoder: per-point net, max-pooled context appended to
/// every point, second per-point net.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetEncoder {
    pub local: Mlp,
    pub mix: Mlp,
}

impl SetEncoder {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, width: usize, rng: &mut R) -> Self {
        let grp = ParamGroup::Alignment;
        Self {
            local: Mlp::new(store, &alloc::format!("{name}.local"), grp, din, width, width, rng),
            mix: Mlp::new(store, &alloc::format!("{name}.mix"), grp, 2 * width, width, width, rng),
        }
    }

    /// Token-level encoding, one row per input row.
    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let (n, _) = g.shape(x);
        let h = g.gelu(self.local.forward(g, x));
        let ctx = g.group_max(h, n);
        self.mix.forward(g, g.concat_cols(&[h, g.broadcast_rows(ctx, n)]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Splat,
    Cloud,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cmsa {
    pub cfg: CmsaConfig,
    pub phi_gs: SetEncoder,
    pub phi_pc: SetEncoder,
    pub attn: MultiHeadAttention,
    pub ffn: Mlp,
}

impl Cmsa {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: CmsaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        Ok(Self {
            cfg,
            phi_gs: SetEncoder::new(store, "cmsa.phi_gs", STRUCT_DIM, w, rng),
            phi_pc: SetEncoder::new(store, "cmsa.phi_pc", 3, w, rng),
            attn: MultiHeadAttention::new(store, "cmsa.attn", ParamGroup::Alignment, w, w, w, w, cfg.heads, rng),
            ffn: Mlp::new(store, "cmsa.ffn", ParamGroup::Alignment, w, 2 * w, cfg.d_consis, rng),
        })
    }

    /// Encodes the masked rows and the whole object with the branch's
    /// encoder. `mask` is an `N × 1` column (hard or soft) whose gradient
    /// reaches the selected rows; `selected` lists the rows in the region.
    pub fn encode_region(&self, g: &Graph, input: Var, mask: Var, selected: &[usize], which: Branch) -> Result<(Var, Var)> {
        if selected.is_empty() {
            bail!(EmptyRegion, "mask selects no rows");
        }
        let enc = match which {
            Branch::Splat => &self.phi_gs,
            Branch::Cloud => &self.phi_pc,
        };
        let region = g.gather_rows(g.mul_col(input, mask), selected.to_vec());
        Ok((enc.forward(g, region), enc.forward(g, input)))
    }

    /// Unit `1 × d_consis` embedding of a region relative to its object.
    pub fn structural_affinity(&self, g: &Graph, f_aff: Var, f_full: Var) -> Var {
        let attended = self.attn.forward(g, f_aff, f_full, AttnMask::None);
        let pooled = g.mean_rows(attended);
        g.l2_normalize_rows(self.ffn.forward(g, pooled))
    }

    /// Embedding of an annotated cloud; its region is the score ≥ 0.5 set.
    pub fn embed_cloud(&self, g: &Graph, cloud: &PointCloudObject) -> Result<Var> {
        let n = cloud.points.len();
        let pts = Tensor::from_vec(n, 3, cloud.points.iter().flat_map(|p| p.iter().map(|&x| x as f64)).collect());
        let selected: Vec<usize> = (0..n).filter(|&i| cloud.scores[i] as f64 >= STE_THRESHOLD).collect();
        let ones = g.constant(Tensor::full(n, 1, 1.0));
        let (fa, ff) = self
            .encode_region(g, g.constant(pts), ones, &selected, Branch::Cloud)
            .map_err(|_| crate::Error::EmptyRegion(alloc::format!("cloud {} has no positive points", cloud.id)))?;
        Ok(self.structural_affinity(g, fa, ff))
    }
}

/// Result of pushing predicted scores through the mask stage.
pub struct RegionMask {
    pub mask: Var,
    pub selected: Vec<usize>,
    /// True when nothing crossed the threshold and the uniform fallback was
    /// used.
    pub fallback: bool,
}

/// Binarizes `scores` (`N × 1`). If no score reaches the threshold, the
/// scores are treated as uniform 0.5 for this step, which selects every row
/// while keeping the identity gradient.
pub fn region_mask(g: &Graph, scores: Var, mode: MaskMode) -> RegionMask {
    let values = g.value(scores);
    let mut selected: Vec<usize> = (0..values.rows()).filter(|&i| values.get(i, 0) >= STE_THRESHOLD).collect();
    let fallback = selected.is_empty();
    if fallback {
        selected = (0..values.rows()).collect();
    }
    let mask = match (mode, fallback) {
        (MaskMode::Ste, false) => ste_binarize(g, scores),
        (MaskMode::Ste, true) => g.straight_through(scores, Tensor::full(values.rows(), 1, 1.0)),
        (MaskMode::Relaxed, false) => scores,
        (MaskMode::Relaxed, true) => g.add_scalar(g.sub(scores, g.constant(values)), 0.5),
    };
    RegionMask { mask, selected, fallback }
}

/// Softmax over clouds of `−chamfer(centers, cloud)/τ`.
pub fn consistency_weights(centers: &[Point], clouds: &[Vec<Point>], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        bail!(Argument, "temperature must be positive, got {tau}");
    }
    if clouds.is_empty() {
        bail!(Pairing, "no clouds to weight");
    }
    let logits = clouds
        .iter()
        .map(|c| chamfer_distance(centers, c).map(|d| -d / tau))
        .collect::<Result<Vec<f64>>>()?;
    Ok(softmax(&logits))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| libm::exp(l - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `Σ_k w_k (1 − ⟨z_gs, z_k⟩)` on unit vectors.
pub fn consistency_loss(z_gs: &[f64], z_pcs: &[Vec<f64>], w: &[f64]) -> Result<f64> {
    if z_pcs.len() != w.len() {
        bail!(Argument, "{} embeddings for {} weights", z_pcs.len(), w.len());
    }
    let mut total = 0.0;
    for (z, &wk) in z_pcs.iter().zip(w) {
        if z.len() != z_gs.len() {
            bail!(Argument, "embedding widths {} and {}", z_gs.len(), z.len());
        }
        let dot: f64 = z.iter().zip(z_gs).map(|(a, b)| a * b).sum();
        total += wk * (1.0 - dot);
    }
    Ok(total)
}

pub fn consistency_loss_graph(g: &Graph, z_gs: Var, z_pcs: &[Var], w: &[f64]) -> Result<Var> {
    if z_pcs.is_empty() || z_pcs.len() != w.len() {
        bail!(Argument, "{} embeddings for {} weights", z_pcs.len(), w.len());
    }
    let mut total: Option<Var> = None;
    for (&z, &wk) in z_pcs.iter().zip(w) {
        let cos = g.sum_all(g.mul(z_gs, z));
        let term = g.scale(g.add_scalar(g.scale(cos, -1.0), 1.0), wk);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    Ok(total.expect("at least one cloud"))
}

/// Keeps at most `n` points of a cloud, positives and negatives thinned
/// separately by an even stride so the region keeps its share and never
/// vanishes when it was present.
pub fn subsample_cloud(cloud: &PointCloudObject, n: usize) -> PointCloudObject {
    let total = cloud.points.len();
    if total <= n {
        return cloud.clone();
    }
    let pos: Vec<usize> = (0..total).filter(|&i| cloud.scores[i] as f64 >= STE_THRESHOLD).collect();
    let neg: Vec<usize> = (0..total).filter(|&i| (cloud.scores[i] as f64) < STE_THRESHOLD).collect();
    let mut n_pos = (n * pos.len() + total / 2) / total;
    if !pos.is_empty() {
        n_pos = n_pos.max(1);
    }
    let n_pos = n_pos.min(pos.len());
    let n_neg = (n - n_pos).min(neg.len());
    let pick = |from: &[usize], k: usize| -> Vec<usize> { (0..k).map(|j| from[j * from.len() / k]).collect() };
    let mut idx = pick(&pos, n_pos);
    idx.extend(pick(&neg, n_neg));
    idx.sort_unstable();
    PointCloudObject {
        id: cloud.id.clone(),
        category: cloud.category.clone(),
        affordance: cloud.affordance.clone(),
        points: idx.iter().map(|&i| cloud.points[i]).collect(),
        scores: idx.iter().map(|&i| cloud.scores[i]).collect(),
    }
}
