//! Parametric surfaces for the synthetic categories and the geometric region
//! that defines each affordance.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gscore::Point;

/// Stand-in for an unbounded side of a region (JSON has no infinity).
pub const FAR: f64 = 1e3;

/// A region of object space. Near a part, membership is what labels a
/// Gaussian or point with an affordance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Aabb { min: Point, max: Point },
    Ball { center: Point, radius: f64 },
    /// Cylindrical shell around the z axis.
    RadialBand { r_min: f64, r_max: f64, z_min: f64, z_max: f64 },
}

impl Region {
    pub fn contains(&self, p: &Point) -> bool {
        match self {
            Region::Aabb { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
            Region::Ball { center, radius } => crate::gscore::sq_dist(p, center) <= radius * radius,
            Region::RadialBand { r_min, r_max, z_min, z_max } => {
                let r = libm::sqrt(p[0] * p[0] + p[1] * p[1]);
                r >= *r_min && r <= *r_max && p[2] >= *z_min && p[2] <= *z_max
            }
        }
    }
}

fn aabb(min: Point, max: Point) -> Region {
    Region::Aabb { min, max }
}

/// Surface patches that can be sampled uniformly (tori approximately).
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Side of a cylinder along `axis` (0, 1 or 2).
    CylinderSide { axis: usize, center: Point, radius: f64, start: f64, end: f64 },
    /// Annulus (or disk when `r_in == 0`) perpendicular to `axis` at `center`.
    Annulus { axis: usize, center: Point, r_in: f64, r_out: f64 },
    /// One planar face of an axis-aligned box: `axis` is the face normal.
    BoxFace { axis: usize, at: f64, min: Point, max: Point },
    Sphere { center: Point, radius: f64 },
    /// Tube of radius `minor` around an arc of radius `major` in the plane
    /// spanned by axes `u` and `v`, for angles `phi0..phi1` measured from `u`.
    TorusArc { center: Point, u: usize, v: usize, major: f64, minor: f64, phi0: f64, phi1: f64 },
}

fn others(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match *self {
            Primitive::CylinderSide { radius, start, end, .. } => 2.0 * PI * radius * (end - start),
            Primitive::Annulus { r_in, r_out, .. } => PI * (r_out * r_out - r_in * r_in),
            Primitive::BoxFace { axis, min, max, .. } => {
                let (a, b) = others(axis);
                (max[a] - min[a]) * (max[b] - min[b])
            }
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Primitive::TorusArc { major, minor, phi0, phi1, .. } => (phi1 - phi0) * major * 2.0 * PI * minor,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Point {
        match *self {
            Primitive::CylinderSide { axis, center, radius, start, end } => {
                let (a, b) = others(axis);
                let t = rng.random_range(0.0..2.0 * PI);
                let mut p = center;
                p[axis] = rng.random_range(start..end);
                p[a] += radius * libm::cos(t);
                p[b] += radius * libm::sin(t);
                p
            }
            Primitive::Annulus { axis, center, r_in, r_out } => {
                let (a, b) = others(axis);
                let t = rng.random_range(0.0..2.0 * PI);
                let r = libm::sqrt(rng.random_range(r_in * r_in..r_out * r_out));
                let mut p = center;
                p[a] += r * libm::cos(t);
                p[b] += r * libm::sin(t);
                p
            }
            Primitive::BoxFace { axis, at, min, max } => {
                let (a, b) = others(axis);
                let mut p = [0.0; 3];
                p[axis] = at;
                p[a] = rng.random_range(min[a]..max[a]);
                p[b] = rng.random_range(min[b]..max[b]);
                p
            }
            Primitive::Sphere { center, radius } => {
                // Rejection-sample a direction from the unit ball.
                let mut d = [0.0; 3];
                loop {
                    for x in &mut d {
                        *x = rng.random_range(-1.0..1.0);
                    }
                    let n2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    if n2 > 1e-6 && n2 <= 1.0 {
                        let n = libm::sqrt(n2);
                        return [center[0] + radius * d[0] / n, center[1] + radius * d[1] / n, center[2] + radius * d[2] / n];
                    }
                }
            }
            Primitive::TorusArc { center, u, v, major, minor, phi0, phi1 } => {
                let w = 3 - u - v;
                let phi = rng.random_range(phi0..phi1);
                let theta = rng.random_range(0.0..2.0 * PI);
                let (cp, sp) = (libm::cos(phi), libm::sin(phi));
                let ring = major + minor * libm::cos(theta);
                let mut p = center;
                p[u] += ring * cp;
                p[v] += ring * sp;
                p[w] += minor * libm::sin(theta);
                p
            }
        }
    }
}

/// The five closed faces of an axis-aligned box (all six when `closed_top`).
fn box_faces(min: Point, max: Point, closed_top: bool) -> Vec<Primitive> {
    let mut faces = Vec::new();
    for axis in 0..3 {
        faces.push(Primitive::BoxFace { axis, at: min[axis], min, max });
        if axis < 2 || closed_top {
            faces.push(Primitive::BoxFace { axis, at: max[axis], min, max });
        }
    }
    faces
}

#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub name: &'static str,
    pub color: [f32; 3],
    pub primitives: Vec<Primitive>,
}

impl Part {
    pub fn area(&self) -> f64 {
        self.primitives.iter().map(Primitive::area).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub parts: Vec<Part>,
    /// `(affordance, region)`, one region per affordance.
    pub regions: Vec<(String, Region)>,
}

pub const CATEGORIES: [&str; 8] = ["mug", "bag", "knife", "door", "chair", "bottle", "hat", "table"];

/// Affordances offered by each category, in generation order.
pub fn affordances_of(category: &str) -> Option<&'static [&'static str]> {
    Some(match category {
        "mug" => &["grasp", "pour"],
        "bag" => &["lift", "contain"],
        "knife" => &["grasp", "cut", "stab"],
        "door" => &["open", "push"],
        "chair" => &["sit", "support", "move"],
        "bottle" => &["grasp", "open", "pour"],
        "hat" => &["wear", "grasp"],
        "table" => &["support", "move"],
        _ => return None,
    })
}

fn part(name: &'static str, color: [f32; 3], primitives: Vec<Primitive>) -> Part {
    Part { name, color, primitives }
}

fn regions(list: Vec<(&str, Region)>) -> Vec<(String, Region)> {
    list.into_iter().map(|(a, r)| (a.into(), r)).collect()
}

const BODY: [f32; 3] = [0.55, 0.55, 0.6];
const ACCENT: [f32; 3] = [0.3, 0.35, 0.7];
const METAL: [f32; 3] = [0.8, 0.8, 0.85];
const WOOD: [f32; 3] = [0.6, 0.45, 0.3];

fn cyl_z(center: Point, radius: f64, z0: f64, z1: f64) -> Primitive {
    Primitive::CylinderSide { axis: 2, center, radius, start: z0, end: z1 }
}

fn disk_z(x: f64, y: f64, z: f64, r_in: f64, r_out: f64) -> Primitive {
    Primitive::Annulus { axis: 2, center: [x, y, z], r_in, r_out }
}

fn leg(x: f64, y: f64, r: f64, top: f64) -> Primitive {
    cyl_z([x, y, 0.0], r, 0.0, top)
}

/// Draws instance proportions for `category` and builds its surface.
pub fn build_shape<R: Rng>(category: &str, rng: &mut R) -> Option<Shape> {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let shape = match category {
        "mug" => {
            let (r, h) = (u(0.30, 0.38), u(0.75, 0.95));
            let (rh, rt) = (u(0.15, 0.19), u(0.05, 0.065));
            Shape {
                parts: vec![
                    part("body", BODY, vec![cyl_z([0.0; 3], r, 0.0, h), disk_z(0.0, 0.0, 0.0, 0.0, r)]),
                    part(
                        "handle",
                        ACCENT,
                        vec![Primitive::TorusArc {
                            center: [r, 0.0, h / 2.0],
                            u: 0,
                            v: 2,
                            major: rh,
                            minor: rt,
                            phi0: -PI / 2.0,
                            phi1: PI / 2.0,
                        }],
                    ),
                ],
                regions: regions(vec![
                    ("grasp", aabb([r + 0.02, -FAR, -FAR], [FAR; 3])),
                    ("pour", aabb([-FAR, -FAR, h - 0.1], [r + 0.02, FAR, FAR])),
                ]),
            }
        }
        "bag" => {
            let (w, d, h) = (u(0.7, 0.9), u(0.25, 0.35), u(0.6, 0.8));
            let (rh, rt) = (u(0.2, 0.28), u(0.03, 0.04));
            Shape {
                parts: vec![
                    part("body", WOOD, box_faces([-w / 2.0, -d / 2.0, 0.0], [w / 2.0, d / 2.0, h], false)),
                    part(
                        "handle",
                        ACCENT,
                        vec![Primitive::TorusArc { center: [0.0, 0.0, h], u: 0, v: 2, major: rh, minor: rt, phi0: 0.0, phi1: PI }],
                    ),
                ],
                regions: regions(vec![
                    ("lift", aabb([-FAR, -FAR, h + 0.03], [FAR; 3])),
                    ("contain", aabb([-FAR, -FAR, h - 0.15], [FAR, FAR, h + 0.03])),
                ]),
            }
        }
        "knife" => {
            let (lb, hb, lh, rh) = (u(0.6, 0.8), u(0.06, 0.09), u(0.3, 0.4), u(0.04, 0.05));
            Shape {
                parts: vec![
                    part("blade", METAL, box_faces([0.0, -0.01, -hb], [lb, 0.01, hb], true)),
                    part(
                        "handle",
                        WOOD,
                        vec![
                            Primitive::CylinderSide { axis: 0, center: [0.0; 3], radius: rh, start: -lh, end: 0.0 },
                            Primitive::Annulus { axis: 0, center: [-lh, 0.0, 0.0], r_in: 0.0, r_out: rh },
                        ],
                    ),
                ],
                regions: regions(vec![
                    ("grasp", aabb([-FAR; 3], [-0.01, FAR, FAR])),
                    ("cut", aabb([0.0, -FAR, -FAR], [FAR, FAR, 0.0])),
                    ("stab", aabb([0.8 * lb, -FAR, -FAR], [FAR; 3])),
                ]),
            }
        }
        "door" => {
            let (w, h, t) = (u(0.45, 0.55), u(0.9, 1.1), 0.04);
            let rk = u(0.035, 0.045);
            let knob = [w / 2.0 - 0.08, -(rk + 0.01), h / 2.0];
            Shape {
                parts: vec![
                    part("panel", WOOD, box_faces([-w / 2.0, 0.0, 0.0], [w / 2.0, t, h], true)),
                    part("knob", METAL, vec![Primitive::Sphere { center: knob, radius: rk }]),
                ],
                regions: regions(vec![
                    ("open", Region::Ball { center: knob, radius: rk + 0.02 }),
                    ("push", aabb([-FAR, -FAR, 0.4 * h], [w / 2.0 - 0.2, FAR, 0.8 * h])),
                ]),
            }
        }
        "chair" => {
            let (s, zs, hb) = (u(0.45, 0.55), u(0.42, 0.5), u(0.4, 0.5));
            let o = s / 2.0 - 0.04;
            Shape {
                parts: vec![
                    part("seat", WOOD, box_faces([-s / 2.0, -s / 2.0, zs], [s / 2.0, s / 2.0, zs + 0.05], true)),
                    part(
                        "back",
                        WOOD,
                        box_faces([-s / 2.0, -s / 2.0, zs + 0.05], [s / 2.0, -s / 2.0 + 0.05, zs + 0.05 + hb], true),
                    ),
                    part("legs", BODY, vec![leg(o, o, 0.025, zs), leg(-o, o, 0.025, zs), leg(o, -o, 0.025, zs), leg(-o, -o, 0.025, zs)]),
                ],
                regions: regions(vec![
                    ("sit", aabb([-FAR, -s / 2.0 + 0.06, zs + 0.025], [FAR, FAR, zs + 0.09])),
                    ("support", aabb([-FAR, -FAR, zs + 0.09], [FAR, -s / 2.0 + 0.06, FAR])),
                    ("move", aabb([-FAR; 3], [FAR, FAR, zs - 0.02])),
                ]),
            }
        }
        "bottle" => {
            let (r, hb, rn, hn) = (u(0.15, 0.2), u(0.5, 0.65), u(0.05, 0.07), u(0.15, 0.2));
            let rc = rn + 0.01;
            let top = hb + hn;
            Shape {
                parts: vec![
                    part(
                        "body",
                        ACCENT,
                        vec![cyl_z([0.0; 3], r, 0.0, hb), disk_z(0.0, 0.0, 0.0, 0.0, r), disk_z(0.0, 0.0, hb, rn, r)],
                    ),
                    part("neck", ACCENT, vec![cyl_z([0.0; 3], rn, hb, top)]),
                    part("cap", METAL, vec![cyl_z([0.0; 3], rc, top, top + 0.06), disk_z(0.0, 0.0, top + 0.06, 0.0, rc)]),
                ],
                regions: regions(vec![
                    ("grasp", aabb([-FAR, -FAR, 0.2 * hb], [FAR, FAR, 0.8 * hb])),
                    ("open", aabb([-FAR, -FAR, top + 0.01], [FAR; 3])),
                    ("pour", aabb([-FAR, -FAR, hb + 0.02], [FAR, FAR, top - 0.01])),
                ]),
            }
        }
        "hat" => {
            let (rc, rb, hc) = (u(0.25, 0.3), u(0.45, 0.55), u(0.25, 0.35));
            Shape {
                parts: vec![
                    part("brim", BODY, vec![disk_z(0.0, 0.0, 0.0, rc, rb)]),
                    part("crown", ACCENT, vec![cyl_z([0.0; 3], rc, 0.0, hc), disk_z(0.0, 0.0, hc, 0.0, rc)]),
                ],
                regions: regions(vec![
                    ("wear", aabb([-FAR, -FAR, 0.04], [FAR; 3])),
                    ("grasp", Region::RadialBand { r_min: rc + 0.04, r_max: FAR, z_min: -FAR, z_max: 0.03 }),
                ]),
            }
        }
        "table" => {
            let (a, b, ht) = (u(0.9, 1.1), u(0.55, 0.7), u(0.65, 0.75));
            let (ox, oy) = (a / 2.0 - 0.06, b / 2.0 - 0.06);
            Shape {
                parts: vec![
                    part("top", WOOD, box_faces([-a / 2.0, -b / 2.0, ht - 0.05], [a / 2.0, b / 2.0, ht], true)),
                    part(
                        "legs",
                        WOOD,
                        vec![leg(ox, oy, 0.03, ht - 0.05), leg(-ox, oy, 0.03, ht - 0.05), leg(ox, -oy, 0.03, ht - 0.05), leg(-ox, -oy, 0.03, ht - 0.05)],
                    ),
                ],
                regions: regions(vec![
                    ("support", aabb([-FAR, -FAR, ht - 0.02], [FAR; 3])),
                    ("move", aabb([-FAR; 3], [FAR, FAR, ht - 0.1])),
                ]),
            }
        }
        _ => return None,
    };
    Some(shape)
}
