//! 3DGS PLY files: `x y z`, `f_dc_*`, `f_rest_*`, `opacity`, `scale_*`,
//! `rot_*` on a single `vertex` element, in ascii or binary little-endian.
//!
//! Object id and category travel in `comment` lines written by this crate;
//! foreign files get the file stem as id and an empty category.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use affordsplat_core::gscore::GaussianObject;

use crate::error::{Error, Result};

const ID_COMMENT: &str = "affordsplat-id";
const CATEGORY_COMMENT: &str = "affordsplat-category";
/// Degree-0 spherical-harmonic constant, used only to tint previews.
const SH_C0: f64 = 0.282_094_791_773_878_14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f32 {
        match self {
            Scalar::I8 => b[0] as i8 as f32,
            Scalar::U8 => b[0] as f32,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f32,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f32,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f32,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f32,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()) as f32,
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
    id: Option<String>,
    category: Option<String>,
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    let n = r.read_line(&mut line).map_err(|e| Error::format(format!("reading PLY header: {e}")))?;
    if n == 0 {
        return Err(Error::format("PLY header ends before end_header"));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

fn parse_header<R: BufRead>(r: &mut R) -> Result<Header> {
    if read_line(r)? != "ply" {
        return Err(Error::format("not a PLY file (missing 'ply' magic)"));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    let (mut id, mut category) = (None, None);
    loop {
        let line = read_line(r)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                encoding = Some(match *fmt {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    other => return Err(Error::format(format!("unsupported PLY encoding '{other}'"))),
                })
            }
            ["comment", key, rest @ ..] if *key == ID_COMMENT => id = Some(rest.join(" ")),
            ["comment", key, rest @ ..] if *key == CATEGORY_COMMENT => category = Some(rest.join(" ")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| Error::format(format!("bad element count in '{line}'")))?;
                elements.push(Element { name: name.to_string(), count, props: Vec::new() });
            }
            ["property", "list", ..] => {
                let el = elements.last().map_or("", |e| e.name.as_str());
                if el == "vertex" {
                    return Err(Error::format("list properties on the vertex element are not supported"));
                }
                // Lists after the vertex block are never read; before it they
                // cannot be skipped without parsing, so reject them later.
                if let Some(e) = elements.last_mut() {
                    e.props.push(("<list>".into(), Scalar::U8));
                }
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| Error::format(format!("unknown PLY property type '{ty}'")))?;
                let e = elements.last_mut().ok_or_else(|| Error::format("property before any element"))?;
                e.props.push((name.to_string(), ty));
            }
            _ => return Err(Error::format(format!("unrecognized PLY header line '{line}'"))),
        }
    }
    let encoding = encoding.ok_or_else(|| Error::format("PLY header has no format line"))?;
    Ok(Header { encoding, elements, id, category })
}

/// Raw vertex rows as `f32`, one `Vec` per property in header order.
fn read_vertex_columns<R: BufRead>(r: &mut R, h: &Header) -> Result<(Vec<String>, Vec<Vec<f32>>)> {
    for e in &h.elements {
        let is_vertex = e.name == "vertex";
        if !is_vertex && e.props.iter().any(|(n, _)| n == "<list>") {
            return Err(Error::format(format!("cannot skip list element '{}' before the vertices", e.name)));
        }
        let mut cols: Vec<Vec<f32>> = vec![Vec::with_capacity(if is_vertex { e.count } else { 0 }); e.props.len()];
        match h.encoding {
            PlyEncoding::BinaryLittleEndian => {
                let stride: usize = e.props.iter().map(|(_, t)| t.size()).sum();
                let mut row = vec![0u8; stride];
                for i in 0..e.count {
                    r.read_exact(&mut row)
                        .map_err(|_| Error::format(format!("PLY element '{}' truncated at row {i}", e.name)))?;
                    if is_vertex {
                        let mut off = 0;
                        for (c, (_, t)) in e.props.iter().enumerate() {
                            cols[c].push(t.decode(&row[off..]));
                            off += t.size();
                        }
                    }
                }
            }
            PlyEncoding::Ascii => {
                let mut line = String::new();
                for i in 0..e.count {
                    line.clear();
                    if r.read_line(&mut line).map_err(|e| Error::format(e.to_string()))? == 0 {
                        return Err(Error::format(format!("PLY element '{}' truncated at row {i}", e.name)));
                    }
                    if is_vertex {
                        let vals: Vec<&str> = line.split_whitespace().collect();
                        if vals.len() != e.props.len() {
                            return Err(Error::format(format!(
                                "vertex row {i} has {} values for {} properties",
                                vals.len(),
                                e.props.len()
                            )));
                        }
                        for (c, v) in vals.iter().enumerate() {
                            let x: f32 = v.parse().map_err(|_| Error::format(format!("bad number '{v}' in vertex row {i}")))?;
                            cols[c].push(x);
                        }
                    }
                }
            }
        }
        if is_vertex {
            return Ok((e.props.iter().map(|(n, _)| n.clone()).collect(), cols));
        }
    }
    Err(Error::format("PLY file has no vertex element"))
}

/// Parses a 3DGS PLY stream. `fallback_id` names objects without an id comment.
pub fn read_gaussian_ply<R: BufRead>(mut r: R, fallback_id: &str) -> Result<GaussianObject> {
    let header = parse_header(&mut r)?;
    let (names, cols) = read_vertex_columns(&mut r, &header)?;
    let col = |name: &str| -> Result<&Vec<f32>> {
        names
            .iter()
            .position(|n| n == name)
            .map(|i| &cols[i])
            .ok_or_else(|| Error::format(format!("missing attribute '{name}'")))
    };
    let xyz = [col("x")?, col("y")?, col("z")?];
    let sc = [col("scale_0")?, col("scale_1")?, col("scale_2")?];
    let rot = [col("rot_0")?, col("rot_1")?, col("rot_2")?, col("rot_3")?];
    let opacity = col("opacity")?.clone();
    let mut sh = vec![col("f_dc_0")?, col("f_dc_1")?, col("f_dc_2")?];
    let n_rest = names.iter().filter(|n| n.starts_with("f_rest_")).count();
    for i in 0..n_rest {
        sh.push(col(&format!("f_rest_{i}"))?);
    }
    let n = opacity.len();
    let mut color = Vec::with_capacity(n * sh.len());
    for i in 0..n {
        color.extend(sh.iter().map(|c| c[i]));
    }
    let mut g = GaussianObject::new(
        header.id.unwrap_or_else(|| fallback_id.to_string()),
        header.category.unwrap_or_default(),
        (0..n).map(|i| [xyz[0][i], xyz[1][i], xyz[2][i]]).collect(),
        (0..n).map(|i| [sc[0][i], sc[1][i], sc[2][i]]).collect(),
        (0..n).map(|i| [rot[0][i], rot[1][i], rot[2][i], rot[3][i]]).collect(),
        opacity,
        color,
        sh.len(),
    )?;
    g.canonicalize_rotations();
    Ok(g)
}

pub fn load_gaussian_ply(path: impl AsRef<Path>) -> Result<GaussianObject> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_gaussian_ply(BufReader::new(f), &stem)
}

fn property_names(g: &GaussianObject) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"].map(String::from).to_vec();
    names.extend((0..g.color_dim - 3).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend(["scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"].map(String::from));
    names
}

fn row_values(g: &GaussianObject, i: usize, out: &mut Vec<f32>) {
    out.clear();
    out.extend_from_slice(&g.centers[i]);
    out.extend_from_slice(g.color_row(i));
    out.push(g.opacity[i]);
    out.extend_from_slice(&g.scales[i]);
    out.extend_from_slice(&g.rotations[i]);
}

fn write_header<W: Write>(w: &mut W, encoding: PlyEncoding, g: &GaussianObject, props: &[(String, &str)]) -> std::io::Result<()> {
    let fmt = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply\nformat {fmt} 1.0")?;
    writeln!(w, "comment {ID_COMMENT} {}", g.id)?;
    if !g.category.is_empty() {
        writeln!(w, "comment {CATEGORY_COMMENT} {}", g.category)?;
    }
    writeln!(w, "element vertex {}", g.len())?;
    for (name, ty) in props {
        writeln!(w, "property {ty} {name}")?;
    }
    writeln!(w, "end_header")
}

pub fn write_gaussian_ply<W: Write>(mut w: W, g: &GaussianObject, encoding: PlyEncoding) -> Result<()> {
    g.validate()?;
    let props: Vec<(String, &str)> = property_names(g).into_iter().map(|n| (n, "float")).collect();
    let io = |e: std::io::Error| Error::format(format!("writing PLY: {e}"));
    write_header(&mut w, encoding, g, &props).map_err(io)?;
    let mut row = Vec::with_capacity(props.len());
    for i in 0..g.len() {
        row_values(g, i, &mut row);
        match encoding {
            PlyEncoding::BinaryLittleEndian => {
                for v in &row {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
            PlyEncoding::Ascii => {
                // `Display` for f32 prints the shortest string that parses back
                // to the same bits.
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", line.join(" ")).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn save_gaussian_ply(path: impl AsRef<Path>, g: &GaussianObject, encoding: PlyEncoding) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_gaussian_ply(BufWriter::new(f), g, encoding)
}

/// Point preview of a prediction: splat centers colored by their base color,
/// blended towards red by score, with the score as an extra property.
pub fn write_colored_ply<W: Write>(mut w: W, g: &GaussianObject, scores: &[f32]) -> Result<()> {
    if scores.len() != g.len() {
        return Err(Error::format(format!("{} scores for {} splats", scores.len(), g.len())));
    }
    let props: Vec<(String, &str)> = vec![
        ("x".into(), "float"),
        ("y".into(), "float"),
        ("z".into(), "float"),
        ("red".into(), "uchar"),
        ("green".into(), "uchar"),
        ("blue".into(), "uchar"),
        ("affordance".into(), "float"),
    ];
    let io = |e: std::io::Error| Error::format(format!("writing PLY: {e}"));
    write_header(&mut w, PlyEncoding::BinaryLittleEndian, g, &props).map_err(io)?;
    for (i, &s) in scores.iter().enumerate() {
        let t = s.clamp(0.0, 1.0) as f64;
        let dc = g.color_row(i);
        let base = |c: usize| (0.5 + SH_C0 * dc[c] as f64).clamp(0.0, 1.0) * 0.6 + 0.2;
        let rgb = [base(0) * (1.0 - t) + t, base(1) * (1.0 - t) + 0.1 * t, base(2) * (1.0 - t) + 0.1 * t];
        for v in &g.centers[i] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&rgb.map(|c| (c * 255.0).round() as u8)).map_err(io)?;
        w.write_all(&s.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}
