use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Width of the structural feature row.
pub const STRUCT_DIM: usize = 10;

/// Column layout of [`GaussianStruct::features`].
///
/// Scales are kept exactly as stored in 3DGS files (log-space).
pub const STRUCT_COLUMNS: [&str; STRUCT_DIM] =
    ["x", "y", "z", "log_scale_0", "log_scale_1", "log_scale_2", "rot_w", "rot_x", "rot_y", "rot_z"];

/// Quaternions further than this from unit norm are renormalized on load.
pub const QUAT_RENORM_TOL: f64 = 1e-6;

/// One splat set. Quaternions are `(w, x, y, z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianObject {
    pub id: String,
    pub category: String,
    pub centers: Vec<[f32; 3]>,
    pub scales: Vec<[f32; 3]>,
    pub rotations: Vec<[f32; 4]>,
    pub opacity: Vec<f32>,
    /// Row-major `N × color_dim` spherical-harmonic coefficients.
    pub color: Vec<f32>,
    pub color_dim: usize,
}

impl GaussianObject {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: String,
        category: String,
        centers: Vec<[f32; 3]>,
        scales: Vec<[f32; 3]>,
        rotations: Vec<[f32; 4]>,
        opacity: Vec<f32>,
        color: Vec<f32>,
        color_dim: usize,
    ) -> Result<Self> {
        let g = Self { id, category, centers, scales, rotations, opacity, color, color_dim };
        g.validate()?;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.centers.len();
        if n == 0 {
            bail!(EmptyObject, "gaussian object '{}' has no splats", self.id);
        }
        if self.scales.len() != n || self.rotations.len() != n || self.opacity.len() != n {
            bail!(Format, "gaussian object '{}' has fields of differing length", self.id);
        }
        if self.color_dim < 3 || self.color.len() != n * self.color_dim {
            bail!(Format, "gaussian object '{}' needs at least 3 color coefficients per splat", self.id);
        }
        Ok(())
    }

    /// Unit-normalize (when off by more than [`QUAT_RENORM_TOL`]) and flip
    /// every quaternion to a non-negative scalar part.
    pub fn canonicalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = canonical_quaternion(*q);
        }
    }

    pub fn center_f64(&self) -> Vec<[f64; 3]> {
        self.centers.iter().map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect()
    }

    pub fn color_row(&self, i: usize) -> &[f32] {
        &self.color[i * self.color_dim..(i + 1) * self.color_dim]
    }
}

pub fn canonical_quaternion(q: [f32; 4]) -> [f32; 4] {
    let mut q = q;
    let norm = libm::sqrt(q.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>());
    if norm > 0.0 && libm::fabs(norm - 1.0) > QUAT_RENORM_TOL {
        for x in &mut q {
            *x = (*x as f64 / norm) as f32;
        }
    }
    if q[0] < 0.0 {
        for x in &mut q {
            *x = -*x;
        }
    }
    q
}

/// The 10-column structural slice (centers, log scales, rotation) fed to the
/// network, zero-padded below `n_real`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStruct {
    pub features: Tensor,
    pub n_real: usize,
}

impl GaussianStruct {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        (0..self.n_real).map(|i| {
            let r = self.features.row(i);
            [r[0], r[1], r[2]]
        })
        .collect()
    }

    /// Zero rows appended up to `rows`.
    pub fn padded(&self, rows: usize) -> Tensor {
        assert!(rows >= self.features.rows());
        let mut data = self.features.data().to_vec();
        data.resize(rows * STRUCT_DIM, 0.0);
        Tensor::from_vec(rows, STRUCT_DIM, data)
    }
}

pub fn extract_struct(g: &GaussianObject) -> GaussianStruct {
    let n = g.len();
    let mut data = Vec::with_capacity(n * STRUCT_DIM);
    for i in 0..n {
        data.extend(g.centers[i].iter().map(|&x| x as f64));
        data.extend(g.scales[i].iter().map(|&x| x as f64));
        data.extend(g.rotations[i].iter().map(|&x| x as f64));
    }
    GaussianStruct { features: Tensor::from_vec(n, STRUCT_DIM, data), n_real: n }
}

/// An annotated point cloud; `scores` is the per-point affordance map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloudObject {
    pub id: String,
    pub category: String,
    pub affordance: String,
    pub points: Vec<[f32; 3]>,
    pub scores: Vec<f32>,
}

impl PointCloudObject {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            bail!(EmptyObject, "point cloud '{}' has no points", self.id);
        }
        if self.scores.len() != self.points.len() {
            bail!(Format, "point cloud '{}' has {} scores for {} points", self.id, self.scores.len(), self.points.len());
        }
        if self.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            bail!(Format, "point cloud '{}' has scores outside [0, 1]", self.id);
        }
        Ok(())
    }

    pub fn points_f64(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect()
    }
}

/// Per-Gaussian affordance scores in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffordanceMask {
    pub scores: Vec<f64>,
}

impl AffordanceMask {
    pub const THRESHOLD: f64 = 0.5;

    pub fn new(scores: Vec<f64>) -> Self {
        Self { scores }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn binary_view(&self) -> Vec<bool> {
        self.scores.iter().map(|&s| s >= Self::THRESHOLD).collect()
    }

    pub fn positives(&self) -> usize {
        self.binary_view().iter().filter(|&&b| b).count()
    }
}
