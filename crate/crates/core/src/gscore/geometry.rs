use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::SparseRows;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub type Point = [f64; 3];

/// Added to `dist^power` so coincident points stay finite.
pub const IDW_EPS: f64 = 1e-8;

#[inline]
pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Farthest-point sampling. The first pick is `seed mod N`; each later pick
/// maximizes the distance to the selected set, ties going to the lowest index.
pub fn fps_downsample(positions: &[Point], n: usize, seed: u64) -> Result<Vec<usize>> {
    let total = positions.len();
    if n == 0 || n > total {
        bail!(Argument, "cannot sample {n} of {total} points");
    }
    let first = (seed % total as u64) as usize;
    let mut picked = Vec::with_capacity(n);
    let mut taken = vec![false; total];
    let mut nearest = vec![f64::INFINITY; total];
    let mut current = first;
    loop {
        picked.push(current);
        taken[current] = true;
        if picked.len() == n {
            break;
        }
        let c = positions[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in positions.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = sq_dist(p, &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best_d {
                best_d = nearest[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(picked)
}

/// Indices and squared distances of the `k` nearest sources, closest first,
/// ties broken by lower index.
pub fn knn(src: &[Point], query: &Point, k: usize) -> Vec<(usize, f64)> {
    let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
    for (i, p) in src.iter().enumerate() {
        let d = sq_dist(p, query);
        if best.len() == k && d >= best[k - 1].1 {
            continue;
        }
        let pos = best.iter().position(|&(_, bd)| d < bd).unwrap_or(best.len());
        best.insert(pos, (i, d));
        best.truncate(k);
    }
    best
}

/// Row-sparse IDW operator from `src` to `dst`: row `j` holds the normalized
/// weights of `dst[j]`'s `k` nearest sources.
pub fn idw_weights(src: &[Point], dst: &[Point], k: usize, power: f64) -> Result<SparseRows> {
    if k == 0 || k > src.len() {
        bail!(Argument, "idw needs 1 <= k <= {} sources, got k = {k}", src.len());
    }
    let rows = dst
        .iter()
        .map(|q| {
            let nn = knn(src, q, k);
            let raw: Vec<f64> = nn
                .iter()
                .map(|&(_, d2)| {
                    let dp = if power == 2.0 { d2 } else { libm::pow(libm::sqrt(d2), power) };
                    1.0 / (dp + IDW_EPS)
                })
                .collect();
            let total: f64 = raw.iter().sum();
            nn.iter().zip(&raw).map(|(&(i, _), &w)| (i, w / total)).collect()
        })
        .collect();
    Ok(SparseRows::new(src.len(), rows))
}

pub fn idw_interpolate(src_pos: &[Point], src_feat: &Tensor, dst_pos: &[Point], k: usize, power: f64) -> Result<Tensor> {
    if src_feat.rows() != src_pos.len() {
        bail!(Argument, "{} source positions but {} feature rows", src_pos.len(), src_feat.rows());
    }
    Ok(idw_weights(src_pos, dst_pos, k, power)?.apply(src_feat))
}

fn mean_nearest(from: &[Point], to: &[Point]) -> f64 {
    let mut acc = 0.0;
    for p in from {
        let mut best = f64::INFINITY;
        for q in to {
            let d = sq_dist(p, q);
            if d < best {
                best = d;
            }
        }
        acc += best;
    }
    acc / from.len() as f64
}

/// Symmetric Chamfer distance on squared Euclidean distances.
pub fn chamfer_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        bail!(Argument, "chamfer distance of an empty point set");
    }
    Ok(mean_nearest(a, b) + mean_nearest(b, a))
}
