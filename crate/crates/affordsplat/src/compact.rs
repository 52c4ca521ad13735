//! The compact dataset container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"AFSDATA\0" | u32 version | u64 header_len | header (UTF-8 JSON) | payload
//! ```
//!
//! The payload is a flat run of little-endian `f32` values. Every field in
//! `header.fields` names its offset (in values, not bytes) and shape, so the
//! file can be read without this crate. Masks are stored as `f32` too; they
//! are binary, so the widening back to `f64` is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use affordsplat_core::datagen::{Dataset, DatasetConfig, ObjectRecord, SampleRecord};
use affordsplat_core::gscore::{AffordanceMask, GaussianObject, PointCloudObject};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"AFSDATA\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: String,
    pub category: String,
    pub splats: usize,
    pub color_dim: usize,
    pub affordances: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudEntry {
    pub id: String,
    pub category: String,
    pub affordance: String,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactHeader {
    pub byte_order: String,
    pub dtype: String,
    pub dataset_seed: u64,
    pub config: DatasetConfig,
    /// Column names of each per-splat field.
    pub column_layout: Vec<(String, Vec<String>)>,
    pub objects: Vec<ObjectEntry>,
    pub point_clouds: Vec<CloudEntry>,
    pub samples: Vec<SampleRecord>,
    pub fields: Vec<FieldEntry>,
    pub total_values: usize,
}

fn layout() -> Vec<(String, Vec<String>)> {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    vec![
        ("centers".into(), s(&["x", "y", "z"])),
        ("scales".into(), s(&["scale_0", "scale_1", "scale_2"])),
        ("rotations".into(), s(&["rot_w", "rot_x", "rot_y", "rot_z"])),
        ("opacity".into(), s(&["opacity"])),
        ("color".into(), s(&["f_dc_0", "f_dc_1", "f_dc_2", "f_rest_*"])),
        ("mask".into(), s(&["score"])),
        ("points".into(), s(&["x", "y", "z"])),
        ("point_scores".into(), s(&["score"])),
    ]
}

struct Payload {
    values: Vec<f32>,
    fields: Vec<FieldEntry>,
}

impl Payload {
    fn push(&mut self, name: String, rows: usize, cols: usize, data: impl IntoIterator<Item = f32>) {
        let offset = self.values.len();
        self.values.extend(data);
        debug_assert_eq!(self.values.len() - offset, rows * cols);
        self.fields.push(FieldEntry { name, offset, rows, cols });
    }
}

pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    let mut p = Payload { values: Vec::new(), fields: Vec::new() };
    let mut objects = Vec::with_capacity(ds.objects.len());
    for (i, o) in ds.objects.iter().enumerate() {
        let g = &o.gaussian;
        let n = g.len();
        p.push(format!("objects/{i}/centers"), n, 3, g.centers.iter().flatten().copied());
        p.push(format!("objects/{i}/scales"), n, 3, g.scales.iter().flatten().copied());
        p.push(format!("objects/{i}/rotations"), n, 4, g.rotations.iter().flatten().copied());
        p.push(format!("objects/{i}/opacity"), n, 1, g.opacity.iter().copied());
        p.push(format!("objects/{i}/color"), n, g.color_dim, g.color.iter().copied());
        for (a, m) in o.affordances.iter().zip(&o.masks) {
            if m.scores.iter().any(|&s| (s as f32) as f64 != s) {
                return Err(Error::format(format!("mask '{}/{a}' is not representable as float32", g.id)));
            }
            p.push(format!("objects/{i}/mask/{a}"), m.len(), 1, m.scores.iter().map(|&s| s as f32));
        }
        objects.push(ObjectEntry {
            id: g.id.clone(),
            category: g.category.clone(),
            splats: n,
            color_dim: g.color_dim,
            affordances: o.affordances.clone(),
        });
    }
    let mut clouds = Vec::with_capacity(ds.point_clouds.len());
    for (i, c) in ds.point_clouds.iter().enumerate() {
        p.push(format!("point_clouds/{i}/points"), c.points.len(), 3, c.points.iter().flatten().copied());
        p.push(format!("point_clouds/{i}/scores"), c.scores.len(), 1, c.scores.iter().copied());
        clouds.push(CloudEntry {
            id: c.id.clone(),
            category: c.category.clone(),
            affordance: c.affordance.clone(),
            points: c.points.len(),
        });
    }
    let header = CompactHeader {
        byte_order: "little".into(),
        dtype: "float32".into(),
        dataset_seed: ds.config.seed,
        config: ds.config.clone(),
        column_layout: layout(),
        objects,
        point_clouds: clouds,
        samples: ds.samples.clone(),
        total_values: p.values.len(),
        fields: p.fields,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(e.to_string()))?;
    let io = |e: std::io::Error| Error::format(format!("writing compact dataset: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut buf = Vec::with_capacity(p.values.len() * 4);
    for v in &p.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io)?;
    w.flush().map_err(io)
}

/// Reads the magic, version and JSON header common to this crate's containers.
pub(crate) fn read_framed_header<R: Read, H: for<'de> Deserialize<'de>>(r: &mut R, magic: &[u8; 8], version: u32, what: &str) -> Result<H> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(|_| Error::format(format!("{what} is too short")))?;
    if &m != magic {
        return Err(Error::format(format!("not a {what} (bad magic)")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| Error::format(format!("{what} is too short")))?;
    let v = u32::from_le_bytes(b4);
    if v != version {
        return Err(Error::format(format!("{what} version {v}, expected {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| Error::format(format!("{what} is too short")))?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| Error::format(format!("{what} header truncated")))?;
    serde_json::from_slice(&json).map_err(|e| Error::format(format!("{what} header: {e}")))
}

pub fn read_header<R: Read>(mut r: R) -> Result<CompactHeader> {
    read_framed_header(&mut r, MAGIC, VERSION, "compact dataset")
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let h: CompactHeader = read_framed_header(&mut r, MAGIC, VERSION, "compact dataset")?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::format(format!("reading payload: {e}")))?;
    if bytes.len() != h.total_values * 4 {
        return Err(Error::format(format!("payload has {} bytes, header promises {}", bytes.len(), h.total_values * 4)));
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut fields = h.fields.iter();
    let mut next = |name: &str, rows: usize, cols: usize| -> Result<&[f32]> {
        let f = fields.next().ok_or_else(|| Error::format(format!("missing field '{name}'")))?;
        if f.name != name || f.rows != rows || f.cols != cols || f.offset + rows * cols > values.len() {
            return Err(Error::format(format!("field '{}' does not match expected '{name}' ({rows}x{cols})", f.name)));
        }
        Ok(&values[f.offset..f.offset + rows * cols])
    };
    let mut objects = Vec::with_capacity(h.objects.len());
    for (i, e) in h.objects.iter().enumerate() {
        let n = e.splats;
        let centers = next(&format!("objects/{i}/centers"), n, 3)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let scales = next(&format!("objects/{i}/scales"), n, 3)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let rotations = next(&format!("objects/{i}/rotations"), n, 4)?.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        let opacity = next(&format!("objects/{i}/opacity"), n, 1)?.to_vec();
        let color = next(&format!("objects/{i}/color"), n, e.color_dim)?.to_vec();
        let gaussian = GaussianObject::new(e.id.clone(), e.category.clone(), centers, scales, rotations, opacity, color, e.color_dim)?;
        let mut masks = Vec::with_capacity(e.affordances.len());
        for a in &e.affordances {
            let m = next(&format!("objects/{i}/mask/{a}"), n, 1)?;
            masks.push(AffordanceMask::new(m.iter().map(|&s| s as f64).collect()));
        }
        objects.push(ObjectRecord { gaussian, affordances: e.affordances.clone(), masks });
    }
    let mut point_clouds = Vec::with_capacity(h.point_clouds.len());
    for (i, e) in h.point_clouds.iter().enumerate() {
        let points = next(&format!("point_clouds/{i}/points"), e.points, 3)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let scores = next(&format!("point_clouds/{i}/scores"), e.points, 1)?.to_vec();
        let pc = PointCloudObject { id: e.id.clone(), category: e.category.clone(), affordance: e.affordance.clone(), points, scores };
        pc.validate()?;
        point_clouds.push(pc);
    }
    for s in &h.samples {
        if s.object >= objects.len() {
            return Err(Error::format(format!("sample '{}' points at missing object {}", s.id, s.object)));
        }
    }
    Ok(Dataset { config: h.config, objects, point_clouds, samples: h.samples })
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(BufWriter::new(f), ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(f))
}
