use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::gscore::{fps_downsample, idw_weights, knn, Point, STRUCT_DIM};
use crate::nn::{AttnMask, EncoderLayer, Mlp};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Centroids of one set-abstraction stage and their kNN groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Grouping {
    /// Indices into the stage's source points, in FPS order.
    pub centroids: Vec<usize>,
    /// `centroids.len() * k` source indices, group by group.
    pub neighbors: Vec<usize>,
    pub k: usize,
}

/// FPS picks `n` centroids (always starting from row 0), then each centroid
/// gathers its `k` nearest sources. Both steps depend only on relative
/// positions.
pub fn sa_grouping(src: &[Point], n: usize, k: usize) -> Result<Grouping> {
    let centroids = fps_downsample(src, n, 0)?;
    let k = k.min(src.len());
    let mut neighbors = Vec::with_capacity(n * k);
    for &c in &centroids {
        neighbors.extend(knn(src, &src[c], k).into_iter().map(|(i, _)| i));
    }
    Ok(Grouping { centroids, neighbors, k })
}

/// Per-object input normalization: centers relative to their mean and
/// divided by the RMS radius, log-scales relative to their mean, rotations
/// unchanged. Grouping still uses the raw positions. Also returns the radius.
pub fn standardize(x: &Tensor) -> (Tensor, f64) {
    let n = x.rows() as f64;
    let mut mean = [0.0; 6];
    for i in 0..x.rows() {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += x.get(i, c) / n;
        }
    }
    let mut r2 = 0.0;
    for i in 0..x.rows() {
        r2 += (0..3).map(|c| (x.get(i, c) - mean[c]) * (x.get(i, c) - mean[c])).sum::<f64>() / n;
    }
    let radius = libm::sqrt(r2).max(1e-12);
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        for c in 0..3 {
            row[c] = (row[c] - mean[c]) / radius;
        }
        for c in 3..6 {
            row[c] -= mean[c];
        }
    }
    (out, radius)
}

/// Features at the three granularities, finest first.
pub struct Levels {
    pub positions: [Vec<Point>; 3],
    /// `N_i × d` each.
    pub features: [Var; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder3d {
    sa: [Mlp; 3],
    fp: [Mlp; 2],
    refine: Vec<EncoderLayer>,
}

fn idw_op(src: &[Point], dst: &[Point], cfg: &ModelConfig) -> Result<Rc<crate::autograd::SparseRows>> {
    Ok(Rc::new(idw_weights(src, dst, cfg.idw_k.min(src.len()), cfg.idw_power)?))
}

impl Encoder3d {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        let grp = ParamGroup::Backbone;
        let ins = [STRUCT_DIM + 3, d + 3, d + 3];
        Self {
            sa: core::array::from_fn(|i| Mlp::new(store, &format!("backbone.sa{i}"), grp, ins[i], d, d, rng)),
            fp: core::array::from_fn(|i| Mlp::new(store, &format!("backbone.fp{i}"), grp, 2 * d, d, d, rng)),
            refine: (0..cfg.encoder_refine_layers)
                .map(|i| EncoderLayer::new(store, &format!("backbone.refine{i}"), grp, d, cfg.heads, rng))
                .collect(),
        }
    }

    /// One abstraction stage: group, append centroid-relative offsets (in
    /// units of the object radius), run
    /// the per-point net and max-pool each group.
    fn abstraction(&self, g: &Graph, stage: usize, src: &[Point], feats: Var, grouping: &Grouping, radius: f64) -> Var {
        let k = grouping.k;
        let mut rel = Tensor::zeros(grouping.neighbors.len(), 3);
        for (gi, &c) in grouping.centroids.iter().enumerate() {
            for j in 0..k {
                let p = src[grouping.neighbors[gi * k + j]];
                let r = rel.row_mut(gi * k + j);
                for a in 0..3 {
                    r[a] = (p[a] - src[c][a]) / radius;
                }
            }
        }
        let grouped = g.gather_rows(feats, grouping.neighbors.clone());
        let x = g.concat_cols(&[grouped, g.constant(rel)]);
        let h = g.gelu(self.sa[stage].forward(g, x));
        g.group_max(h, k)
    }

    /// `down` is the `n_min × 10` structural block of one object.
    pub fn forward(&self, g: &Graph, down: &Tensor, cfg: &ModelConfig) -> Result<Levels> {
        let [n1, n2, n3] = cfg.granularity_sizes;
        if down.rows() < n1 {
            bail!(Config, "objects downsample to {} rows but the first granularity needs {n1}", down.rows());
        }
        let p0: Vec<Point> = (0..down.rows()).map(|i| [down.get(i, 0), down.get(i, 1), down.get(i, 2)]).collect();
        let (x0, radius) = standardize(down);
        let x0 = g.constant(x0);

        let g1 = sa_grouping(&p0, n1, cfg.group_size)?;
        let p1: Vec<Point> = g1.centroids.iter().map(|&i| p0[i]).collect();
        let f1 = self.abstraction(g, 0, &p0, x0, &g1, radius);

        let g2 = sa_grouping(&p1, n2, cfg.group_size)?;
        let p2: Vec<Point> = g2.centroids.iter().map(|&i| p1[i]).collect();
        let f2 = self.abstraction(g, 1, &p1, f1, &g2, radius);

        let g3 = sa_grouping(&p2, n3, cfg.group_size)?;
        let p3: Vec<Point> = g3.centroids.iter().map(|&i| p2[i]).collect();
        let f3 = self.abstraction(g, 2, &p2, f2, &g3, radius);

        let up2 = g.sparse(f3, idw_op(&p3, &p2, cfg)?);
        let d2 = g.gelu(self.fp[0].forward(g, g.concat_cols(&[up2, f2])));
        let up1 = g.sparse(d2, idw_op(&p2, &p1, cfg)?);
        let mut d1 = g.gelu(self.fp[1].forward(g, g.concat_cols(&[up1, f1])));
        for layer in &self.refine {
            d1 = layer.forward(g, d1, AttnMask::None);
        }
        Ok(Levels { positions: [p1, p2, p3], features: [d1, d2, f3] })
    }
}
