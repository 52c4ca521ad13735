use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

use super::geometry::{fps_downsample, Point};
use super::types::{GaussianStruct, STRUCT_DIM};

/// A batch of splat sets with two shared resolutions: every object is
/// downsampled to the smallest object's size (`down`) and zero-padded to the
/// largest (`padded`).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchedGaussians {
    pub ids: Vec<String>,
    pub n_real: Vec<usize>,
    pub n_min: usize,
    pub n_max: usize,
    /// FPS row indices into each object, in selection order.
    pub down_index: Vec<Vec<usize>>,
    /// `n_min × 10` per object.
    pub down: Vec<Tensor>,
    /// `n_max × 10` per object.
    pub padded: Vec<Tensor>,
    pub validity: Vec<Vec<bool>>,
}

impl BatchedGaussians {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn down_positions(&self, b: usize) -> Vec<Point> {
        positions_of(&self.down[b], self.n_min)
    }

    /// Positions of the real rows of `padded[b]`.
    pub fn real_positions(&self, b: usize) -> Vec<Point> {
        positions_of(&self.padded[b], self.n_real[b])
    }

    pub fn validity_column(&self, b: usize) -> Tensor {
        Tensor::from_vec(self.n_max, 1, self.validity[b].iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())
    }
}

fn positions_of(t: &Tensor, rows: usize) -> Vec<Point> {
    (0..rows).map(|i| {
        let r = t.row(i);
        [r[0], r[1], r[2]]
    })
    .collect()
}

/// `ids` may be empty, in which case slots are named by position.
pub fn make_batch(objects: &[&GaussianStruct], ids: &[String], seed: u64) -> Result<BatchedGaussians> {
    if objects.is_empty() {
        bail!(Argument, "cannot batch zero objects");
    }
    if !ids.is_empty() && ids.len() != objects.len() {
        bail!(Argument, "{} ids for {} objects", ids.len(), objects.len());
    }
    for o in objects {
        if o.n_real == 0 || o.n_real > o.features.rows() || o.features.cols() != STRUCT_DIM {
            bail!(Argument, "malformed structural features ({} real of {} rows)", o.n_real, o.features.rows());
        }
    }
    let n_min = objects.iter().map(|o| o.n_real).min().unwrap_or(0);
    let n_max = objects.iter().map(|o| o.n_real).max().unwrap_or(0);
    let mut down_index = Vec::with_capacity(objects.len());
    let mut down = Vec::with_capacity(objects.len());
    let mut padded = Vec::with_capacity(objects.len());
    let mut validity = Vec::with_capacity(objects.len());
    for o in objects {
        let real = o.features.gather_rows(&(0..o.n_real).collect::<Vec<_>>());
        let idx = fps_downsample(&o.positions(), n_min, seed)?;
        down.push(real.gather_rows(&idx));
        down_index.push(idx);
        padded.push(GaussianStruct { features: real, n_real: o.n_real }.padded(n_max));
        validity.push((0..n_max).map(|j| j < o.n_real).collect());
    }
    let ids = if ids.is_empty() { (0..objects.len()).map(|i| alloc::format!("{i}")).collect() } else { ids.to_vec() };
    Ok(BatchedGaussians { ids, n_real: objects.iter().map(|o| o.n_real).collect(), n_min, n_max, down_index, down, padded, validity })
}
