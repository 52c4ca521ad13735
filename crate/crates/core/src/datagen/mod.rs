//! Deterministic synthetic splat objects with affordance labels, paired point
//! clouds, instructions and split manifests.

mod instructions;
mod shapes;
mod splits;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::evalkit::SampleKey;
use crate::gscore::{canonical_quaternion, AffordanceMask, GaussianObject, Point, PointCloudObject};
use crate::rng;

pub use instructions::{corpus, make_instruction, template_listing, InstructionRecord, AFF_TOKEN, ANSWER_TEMPLATES, QUESTION_TEMPLATES};
pub use shapes::{affordances_of, build_shape, Part, Primitive, Region, Shape, CATEGORIES};
pub use splits::{build_splits, build_splits_with, pair_pointclouds, DatasetSplit, Holdout, HoldoutLevel, Pair, SplitMode};

/// Zero-order SH basis constant, used to store RGB as `f_dc` coefficients.
const SH_C0: f64 = 0.282_094_791_773_878_14;
const MIN_PER_PART: usize = 8;
const MAX_ATTEMPTS: u64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub category: String,
    pub affordances: Vec<String>,
    /// Inclusive bounds on the Gaussian count.
    pub n_gaussians_range: (usize, usize),
    pub n_points: usize,
    /// Standard deviation of the positional noise.
    pub jitter: f64,
}

impl SyntheticSpec {
    pub fn for_category(category: &str) -> Result<Self> {
        let Some(affs) = affordances_of(category) else {
            bail!(Argument, "unknown category '{category}'");
        };
        Ok(Self {
            category: category.into(),
            affordances: affs.iter().map(|&a| a.into()).collect(),
            n_gaussians_range: (256, 384),
            n_points: 2048,
            jitter: 0.005,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedObject {
    pub gaussian: GaussianObject,
    /// One cloud per affordance of the spec, same order.
    pub point_clouds: Vec<PointCloudObject>,
    pub masks: Vec<AffordanceMask>,
}

fn jittered<R: Rng>(p: Point, noise: &Normal<f64>, r: &mut R) -> Point {
    [p[0] + noise.sample(r), p[1] + noise.sample(r), p[2] + noise.sample(r)]
}

fn to_f32(p: Point) -> [f32; 3] {
    [p[0] as f32, p[1] as f32, p[2] as f32]
}

fn as_f64(p: [f32; 3]) -> Point {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Picks a primitive of `part` with probability proportional to its area.
fn sample_part<R: Rng>(part: &Part, r: &mut R) -> Point {
    let total = part.area();
    let mut x = r.random_range(0.0..total);
    for prim in &part.primitives {
        let a = prim.area();
        if x < a {
            return prim.sample(r);
        }
        x -= a;
    }
    part.primitives[part.primitives.len() - 1].sample(r)
}

/// Per-part counts proportional to area with a floor, summing to `n`.
fn allocate(parts: &[Part], n: usize) -> Vec<usize> {
    let total: f64 = parts.iter().map(Part::area).sum();
    let spare = n - MIN_PER_PART * parts.len();
    let exact: Vec<f64> = parts.iter().map(|p| spare as f64 * p.area() / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| MIN_PER_PART + e as usize).collect();
    let mut order: Vec<usize> = (0..parts.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - libm::floor(exact[b])).total_cmp(&(exact[a] - libm::floor(exact[a]))).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

pub fn generate_object(spec: &SyntheticSpec, seed: u64) -> Result<GeneratedObject> {
    let Some(offered) = affordances_of(&spec.category) else {
        bail!(Argument, "unknown category '{}'", spec.category);
    };
    if let Some(a) = spec.affordances.iter().find(|a| !offered.contains(&a.as_str())) {
        bail!(Argument, "category '{}' has no affordance '{a}'", spec.category);
    }
    let (lo, hi) = spec.n_gaussians_range;
    if lo > hi || lo < MIN_PER_PART * 3 || spec.n_points == 0 || !(spec.jitter >= 0.0) {
        bail!(Argument, "invalid synthetic spec for '{}'", spec.category);
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut r = rng::indexed_stream(seed, &format!("object:{}", spec.category), attempt);
        let generated = attempt_object(spec, seed, &mut r)?;
        let clouds_ok = generated.point_clouds.iter().all(|c| c.scores.iter().any(|&s| s >= 0.5));
        if clouds_ok && generated.masks.iter().all(|m| m.positives() > 0) {
            return Ok(generated);
        }
    }
    bail!(Contract, "no non-empty masks and clouds for '{}' after {MAX_ATTEMPTS} attempts", spec.category)
}

fn attempt_object<R: Rng>(spec: &SyntheticSpec, seed: u64, r: &mut R) -> Result<GeneratedObject> {
    let shape = build_shape(&spec.category, r).expect("category checked by caller");
    let noise = Normal::new(0.0, spec.jitter).map_err(|_| crate::Error::Argument("jitter".into()))?;
    let n = r.random_range(spec.n_gaussians_range.0..=spec.n_gaussians_range.1);
    let counts = allocate(&shape.parts, n);

    let mut rows: Vec<([f32; 3], [f32; 3], [f32; 4], f32, [f32; 3])> = Vec::with_capacity(n);
    for (part, &count) in shape.parts.iter().zip(&counts) {
        let dc = part.color.map(|c| ((c as f64 - 0.5) / SH_C0) as f32);
        for _ in 0..count {
            let center = to_f32(jittered(sample_part(part, r), &noise, r));
            let scale = [0; 3].map(|_| libm::log(r.random_range(0.008..0.025)) as f32);
            let q: [f64; 4] = [0; 4].map(|_| StandardNormal.sample(r));
            let norm = libm::sqrt(q.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
            let rot = canonical_quaternion(q.map(|x| (x / norm) as f32));
            let opacity = r.random_range(-1.0..3.0) as f32;
            rows.push((center, scale, rot, opacity, dc));
        }
    }
    rows.shuffle(r);

    let id = format!("{}-s{seed}", spec.category);
    let gaussian = GaussianObject::new(
        id.clone(),
        spec.category.clone(),
        rows.iter().map(|r| r.0).collect(),
        rows.iter().map(|r| r.1).collect(),
        rows.iter().map(|r| r.2).collect(),
        rows.iter().map(|r| r.3).collect(),
        rows.iter().flat_map(|r| r.4).collect(),
        3,
    )?;

    let region = |aff: &str| &shape.regions.iter().find(|(a, _)| a == aff).expect("affordance checked by caller").1;
    let masks = spec
        .affordances
        .iter()
        .map(|a| {
            let reg = region(a);
            AffordanceMask::new(gaussian.centers.iter().map(|&c| if reg.contains(&as_f64(c)) { 1.0 } else { 0.0 }).collect())
        })
        .collect();

    let total: f64 = shape.parts.iter().map(Part::area).sum();
    let points: Vec<[f32; 3]> = (0..spec.n_points)
        .map(|_| {
            let mut x = r.random_range(0.0..total);
            let mut chosen = &shape.parts[shape.parts.len() - 1];
            for p in &shape.parts {
                if x < p.area() {
                    chosen = p;
                    break;
                }
                x -= p.area();
            }
            to_f32(jittered(sample_part(chosen, r), &noise, r))
        })
        .collect();
    let point_clouds = spec
        .affordances
        .iter()
        .map(|a| {
            let reg = region(a);
            PointCloudObject {
                id: format!("{id}/pc/{a}"),
                category: spec.category.clone(),
                affordance: a.clone(),
                scores: points.iter().map(|&p| if reg.contains(&as_f64(p)) { 1.0 } else { 0.0 }).collect(),
                points: points.clone(),
            }
        })
        .collect();
    Ok(GeneratedObject { gaussian, point_clouds, masks })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_objects: usize,
    pub seed: u64,
    /// Objects cycle through these categories in order.
    pub categories: Vec<String>,
    /// Keep only the first `n` affordances of each category.
    pub max_affordances: Option<usize>,
    pub n_gaussians_range: (usize, usize),
    pub n_points: usize,
    pub jitter: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_objects: 48,
            seed: 0,
            categories: CATEGORIES.iter().map(|&c| c.into()).collect(),
            max_affordances: None,
            n_gaussians_range: (256, 384),
            n_points: 2048,
            jitter: 0.005,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub gaussian: GaussianObject,
    pub affordances: Vec<String>,
    pub masks: Vec<AffordanceMask>,
}

impl ObjectRecord {
    pub fn mask(&self, affordance: &str) -> Option<&AffordanceMask> {
        self.affordances.iter().position(|a| a == affordance).map(|i| &self.masks[i])
    }
}

/// One (object, affordance) training or evaluation unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub object: usize,
    pub category: String,
    pub affordance: String,
    pub instruction: InstructionRecord,
}

impl SampleRecord {
    pub fn key(&self) -> SampleKey {
        SampleKey { id: self.id.clone(), category: self.category.clone(), affordance: self.affordance.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub objects: Vec<ObjectRecord>,
    pub point_clouds: Vec<PointCloudObject>,
    pub samples: Vec<SampleRecord>,
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.categories.is_empty() || cfg.n_objects == 0 {
        bail!(Argument, "dataset needs at least one category and one object");
    }
    let mut objects = Vec::with_capacity(cfg.n_objects);
    let mut point_clouds = Vec::new();
    let mut samples = Vec::new();
    for i in 0..cfg.n_objects {
        let category = &cfg.categories[i % cfg.categories.len()];
        let mut spec = SyntheticSpec::for_category(category)?;
        if let Some(m) = cfg.max_affordances {
            spec.affordances.truncate(m.max(1));
        }
        spec.n_gaussians_range = cfg.n_gaussians_range;
        spec.n_points = cfg.n_points;
        spec.jitter = cfg.jitter;
        let object_seed = rng::indexed_stream(cfg.seed, "object-seed", i as u64).random::<u64>();
        let mut g = generate_object(&spec, object_seed)?;
        let id = format!("{category}-{i:04}");
        g.gaussian.id = id.clone();
        let mut tr = rng::indexed_stream(cfg.seed, "template", i as u64);
        for (pc, a) in g.point_clouds.iter_mut().zip(&spec.affordances) {
            pc.id = format!("{id}/pc/{a}");
            let template_id = tr.random_range(0..QUESTION_TEMPLATES.len());
            samples.push(SampleRecord {
                id: format!("{id}/{a}"),
                object: i,
                category: category.clone(),
                affordance: a.clone(),
                instruction: make_instruction(category, a, template_id, 0)?,
            });
        }
        point_clouds.extend(g.point_clouds);
        objects.push(ObjectRecord { gaussian: g.gaussian, affordances: spec.affordances, masks: g.masks });
    }
    Ok(Dataset { config: cfg.clone(), objects, point_clouds, samples })
}

impl Dataset {
    pub fn sample_keys(&self) -> Vec<SampleKey> {
        self.samples.iter().map(SampleRecord::key).collect()
    }

    pub fn sample(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Indices of the point clouds annotated with `(category, affordance)`.
    pub fn pool(&self, category: &str, affordance: &str) -> Vec<usize> {
        (0..self.point_clouds.len())
            .filter(|&i| self.point_clouds[i].category == category && self.point_clouds[i].affordance == affordance)
            .collect()
    }

    /// Ground truth for a sample as per-Gaussian scores.
    pub fn ground_truth(&self, s: &SampleRecord) -> &AffordanceMask {
        self.objects[s.object].mask(&s.affordance).expect("sample affordance belongs to its object")
    }

    pub fn pairs(&self) -> Vec<Pair> {
        let set: alloc::collections::BTreeSet<Pair> = self.samples.iter().map(|s| (s.category.clone(), s.affordance.clone())).collect();
        set.into_iter().collect()
    }

    /// FNV-1a over ids and the raw bits of every stored value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for o in &self.objects {
            let g = &o.gaussian;
            h.bytes(g.id.as_bytes());
            for c in &g.centers {
                h.floats(c);
            }
            for s in &g.scales {
                h.floats(s);
            }
            for q in &g.rotations {
                h.floats(q);
            }
            h.floats(&g.opacity);
            h.floats(&g.color);
            for m in &o.masks {
                for &s in &m.scores {
                    h.bytes(&s.to_bits().to_le_bytes());
                }
            }
        }
        for pc in &self.point_clouds {
            h.bytes(pc.id.as_bytes());
            for p in &pc.points {
                h.floats(p);
            }
            h.floats(&pc.scores);
        }
        for s in &self.samples {
            h.bytes(s.id.as_bytes());
            h.bytes(s.instruction.question.as_bytes());
        }
        h.0
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn bytes(&mut self, b: &[u8]) {
        for &x in b {
            self.0 ^= x as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn floats(&mut self, f: &[f32]) {
        for x in f {
            self.bytes(&x.to_bits().to_le_bytes());
        }
    }
}
