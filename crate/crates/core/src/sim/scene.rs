//! Analytic scenes: planes, patches and convex solids, a spinning multi-beam
//! LiDAR model and a driven route.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Ground-truth class of a surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellClass {
    Road,
    Curb,
    Irrelevant,
}

impl CellClass {
    pub fn code(self) -> u8 {
        match self {
            CellClass::Road => 0,
            CellClass::Curb => 1,
            CellClass::Irrelevant => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CellClass::Road),
            1 => Some(CellClass::Curb),
            2 => Some(CellClass::Irrelevant),
            _ => None,
        }
    }
}

fn road() -> CellClass {
    CellClass::Road
}

fn irrelevant() -> CellClass {
    CellClass::Irrelevant
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum RampAxis {
    #[serde(rename = "+x")]
    PosX,
    #[serde(rename = "-x")]
    NegX,
    #[serde(rename = "+y")]
    PosY,
    #[serde(rename = "-y")]
    NegY,
}

/// Scene building blocks. Solids are axis-aligned; ramps are wedges whose top
/// goes from `z_start` to `z_end` moving in the `along` direction.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Primitive {
    /// Infinite horizontal plane.
    Plane {
        z: f64,
        #[serde(default = "road")]
        class: CellClass,
    },
    /// Horizontal rectangle of zero thickness.
    Patch {
        z: f64,
        min: [f64; 2],
        max: [f64; 2],
        #[serde(default = "road")]
        class: CellClass,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        #[serde(default = "irrelevant")]
        class: CellClass,
    },
    Wall {
        min: [f64; 3],
        max: [f64; 3],
    },
    /// Raised kerb block: the vertical faces are curb, the top (the raised
    /// sidewalk) is `top`.
    Curb {
        min: [f64; 3],
        max: [f64; 3],
        #[serde(default = "irrelevant")]
        top: CellClass,
    },
    /// Slab whose top is drivable; its sides and underside are not.
    Deck {
        min: [f64; 3],
        max: [f64; 3],
    },
    Ramp {
        min: [f64; 2],
        max: [f64; 2],
        z_start: f64,
        z_end: f64,
        along: RampAxis,
        /// Bottom of the wedge; defaults to the lower end.
        #[serde(default)]
        base: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HalfSpace {
    n: [f64; 3],
    d: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Plane {
        z: f64,
        bounds: Option<([f64; 2], [f64; 2])>,
    },
    Convex {
        faces: Vec<HalfSpace>,
        top: usize,
    },
}

/// A primitive ready for ray casting.
#[derive(Debug, Clone, PartialEq)]
pub struct Solid {
    shape: Shape,
    top_class: CellClass,
    other_class: CellClass,
}

fn aabb_faces(min: [f64; 3], max: [f64; 3]) -> Vec<HalfSpace> {
    vec![
        HalfSpace {
            n: [-1.0, 0.0, 0.0],
            d: -min[0],
        },
        HalfSpace {
            n: [1.0, 0.0, 0.0],
            d: max[0],
        },
        HalfSpace {
            n: [0.0, -1.0, 0.0],
            d: -min[1],
        },
        HalfSpace {
            n: [0.0, 1.0, 0.0],
            d: max[1],
        },
        HalfSpace {
            n: [0.0, 0.0, -1.0],
            d: -min[2],
        },
        HalfSpace {
            n: [0.0, 0.0, 1.0],
            d: max[2],
        },
    ]
}

const AABB_TOP: usize = 5;

fn check_box(min: [f64; 3], max: [f64; 3]) -> Result<()> {
    if (0..3).all(|i| min[i].is_finite() && max[i].is_finite() && min[i] < max[i]) {
        Ok(())
    } else {
        Err(Error::Config(format!("degenerate box {min:?}..{max:?}")))
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Primitive {
    pub fn compile(&self) -> Result<Solid> {
        let boxed = |min: [f64; 3], max: [f64; 3], top: CellClass, other: CellClass| -> Result<Solid> {
            check_box(min, max)?;
            Ok(Solid {
                shape: Shape::Convex {
                    faces: aabb_faces(min, max),
                    top: AABB_TOP,
                },
                top_class: top,
                other_class: other,
            })
        };
        match *self {
            Primitive::Plane { z, class } => {
                if !z.is_finite() {
                    return Err(Error::Config("plane height is not finite".into()));
                }
                Ok(Solid {
                    shape: Shape::Plane { z, bounds: None },
                    top_class: class,
                    other_class: class,
                })
            }
            Primitive::Patch { z, min, max, class } => {
                check_box([min[0], min[1], z], [max[0], max[1], z + 1.0])?;
                Ok(Solid {
                    shape: Shape::Plane {
                        z,
                        bounds: Some((min, max)),
                    },
                    top_class: class,
                    other_class: class,
                })
            }
            Primitive::Box { min, max, class } => boxed(min, max, class, class),
            Primitive::Wall { min, max } => boxed(min, max, CellClass::Irrelevant, CellClass::Irrelevant),
            Primitive::Curb { min, max, top } => boxed(min, max, top, CellClass::Curb),
            Primitive::Deck { min, max } => boxed(min, max, CellClass::Road, CellClass::Irrelevant),
            Primitive::Ramp {
                min,
                max,
                z_start,
                z_end,
                along,
                base,
            } => {
                let base = base.unwrap_or(z_start.min(z_end));
                let top_low = z_start.min(z_end);
                check_box([min[0], min[1], base], [max[0], max[1], base + 1.0])?;
                if !(z_start.is_finite() && z_end.is_finite()) || top_low < base {
                    return Err(Error::Config(format!("ramp top below its base {base}")));
                }
                // Top face: z <= z_start + slope * (s - s0) along the rise axis.
                let (axis, s0, s1) = match along {
                    RampAxis::PosX => (0, min[0], max[0]),
                    RampAxis::NegX => (0, max[0], min[0]),
                    RampAxis::PosY => (1, min[1], max[1]),
                    RampAxis::NegY => (1, max[1], min[1]),
                };
                let slope = (z_end - z_start) / (s1 - s0);
                let mut n = [0.0, 0.0, 1.0];
                n[axis] = -slope;
                let mut faces = aabb_faces([min[0], min[1], base], [max[0], max[1], z_start.max(z_end)]);
                faces[AABB_TOP] = HalfSpace {
                    n,
                    d: z_start - slope * s0,
                };
                Ok(Solid {
                    shape: Shape::Convex { faces, top: AABB_TOP },
                    top_class: CellClass::Road,
                    other_class: CellClass::Irrelevant,
                })
            }
        }
    }
}

impl Solid {
    /// Nearest entry along `o + t d` with `t > t_min`, and the class of the
    /// surface struck. Rays starting inside a solid do not see it.
    pub fn intersect(&self, o: &[f64; 3], d: &[f64; 3], t_min: f64) -> Option<(f64, CellClass)> {
        match &self.shape {
            Shape::Plane { z, bounds } => {
                if d[2] == 0.0 {
                    return None;
                }
                let t = (z - o[2]) / d[2];
                if t <= t_min {
                    return None;
                }
                if let Some((lo, hi)) = bounds {
                    let (x, y) = (o[0] + t * d[0], o[1] + t * d[1]);
                    if x < lo[0] || x >= hi[0] || y < lo[1] || y >= hi[1] {
                        return None;
                    }
                }
                Some((t, self.top_class))
            }
            Shape::Convex { faces, top } => {
                let (mut t_in, mut t_out, mut face) = (f64::NEG_INFINITY, f64::INFINITY, usize::MAX);
                for (i, f) in faces.iter().enumerate() {
                    let denom = dot(&f.n, d);
                    let num = f.d - dot(&f.n, o);
                    if denom == 0.0 {
                        if num < 0.0 {
                            return None;
                        }
                    } else if denom < 0.0 {
                        let t = num / denom;
                        if t > t_in {
                            t_in = t;
                            face = i;
                        }
                    } else {
                        t_out = t_out.min(num / denom);
                    }
                }
                if t_in > t_out || t_in <= t_min || face == usize::MAX {
                    return None;
                }
                let class = if face == *top { self.top_class } else { self.other_class };
                Some((t_in, class))
            }
        }
    }

    /// Altitude of the drivable top surface above (x, y), if any.
    pub fn top_at(&self, x: f64, y: f64) -> Option<f64> {
        if self.top_class != CellClass::Road {
            return None;
        }
        match &self.shape {
            Shape::Plane { z, bounds } => match bounds {
                Some((lo, hi)) if x < lo[0] || x >= hi[0] || y < lo[1] || y >= hi[1] => None,
                _ => Some(*z),
            },
            Shape::Convex { faces, top } => {
                let inside = faces
                    .iter()
                    .enumerate()
                    .filter(|(i, f)| *i != *top && f.n[2] == 0.0)
                    .all(|(_, f)| f.n[0] * x + f.n[1] * y <= f.d);
                if !inside {
                    return None;
                }
                let f = &faces[*top];
                Some((f.d - f.n[0] * x - f.n[1] * y) / f.n[2])
            }
        }
    }
}

/// A primitive that exists for frames in `[frames[0], frames[1])`, moving
/// `velocity` meters per frame from its listed placement at `frames[0]`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Actor {
    pub frames: [usize; 2],
    #[serde(default)]
    pub velocity: [f64; 3],
    pub shape: Primitive,
}

impl Actor {
    pub fn placement(&self, frame_index: usize) -> Option<Primitive> {
        if !(self.frames[0]..self.frames[1]).contains(&frame_index) {
            return None;
        }
        let k = (frame_index - self.frames[0]) as f64;
        let v = self.velocity;
        let sh3 = |p: [f64; 3]| [p[0] + k * v[0], p[1] + k * v[1], p[2] + k * v[2]];
        let sh2 = |p: [f64; 2]| [p[0] + k * v[0], p[1] + k * v[1]];
        Some(match self.shape.clone() {
            Primitive::Plane { z, class } => Primitive::Plane { z: z + k * v[2], class },
            Primitive::Patch { z, min, max, class } => Primitive::Patch {
                z: z + k * v[2],
                min: sh2(min),
                max: sh2(max),
                class,
            },
            Primitive::Box { min, max, class } => Primitive::Box {
                min: sh3(min),
                max: sh3(max),
                class,
            },
            Primitive::Wall { min, max } => Primitive::Wall {
                min: sh3(min),
                max: sh3(max),
            },
            Primitive::Curb { min, max, top } => Primitive::Curb {
                min: sh3(min),
                max: sh3(max),
                top,
            },
            Primitive::Deck { min, max } => Primitive::Deck {
                min: sh3(min),
                max: sh3(max),
            },
            Primitive::Ramp {
                min,
                max,
                z_start,
                z_end,
                along,
                base,
            } => Primitive::Ramp {
                min: sh2(min),
                max: sh2(max),
                z_start: z_start + k * v[2],
                z_end: z_end + k * v[2],
                along,
                base: base.map(|b| b + k * v[2]),
            },
        })
    }
}

/// Beam layout of a spinning LiDAR.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LidarModel {
    /// Named layout: "hdl64" (64 beams, -24.8 to 2.0 deg), "hdl64-sub4"
    /// (every fourth of those) or "vlp16". Ignored when `elevations_deg` is set.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub elevations_deg: Option<Vec<f64>>,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_max_range")]
    pub max_range: f64,
    #[serde(default = "default_min_range")]
    pub min_range: f64,
    /// Standard deviation of range noise, meters; 0 disables noise.
    #[serde(default)]
    pub range_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_width() -> usize {
    1800
}

fn default_max_range() -> f64 {
    120.0
}

fn default_min_range() -> f64 {
    0.5
}

impl Default for LidarModel {
    fn default() -> Self {
        LidarModel {
            preset: Some("hdl64-sub4".into()),
            elevations_deg: None,
            width: default_width(),
            max_range: default_max_range(),
            min_range: default_min_range(),
            range_noise: 0.0,
            seed: 0,
        }
    }
}

pub fn hdl64_elevations_deg() -> Vec<f64> {
    (0..64).map(|i| -24.8 + 26.8 * i as f64 / 63.0).collect()
}

impl LidarModel {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: LidarModel = toml::from_str(text).map_err(|e| Error::Config(format!("lidar: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    /// Self-contained description: the preset is expanded into explicit elevations.
    pub fn to_toml(&self) -> Result<String> {
        let explicit = LidarModel {
            preset: None,
            elevations_deg: Some(self.elevations_deg()?),
            ..self.clone()
        };
        toml::to_string(&explicit).map_err(|e| Error::Config(format!("lidar: {e}")))
    }

    pub fn elevations_deg(&self) -> Result<Vec<f64>> {
        if let Some(e) = &self.elevations_deg {
            return Ok(e.clone());
        }
        match self.preset.as_deref().unwrap_or("hdl64-sub4") {
            "hdl64" => Ok(hdl64_elevations_deg()),
            "hdl64-sub4" => Ok(hdl64_elevations_deg().into_iter().step_by(4).collect()),
            "vlp16" => Ok((0..16).map(|i| -15.0 + 2.0 * i as f64).collect()),
            other => Err(Error::Config(format!("unknown lidar preset {other:?}"))),
        }
    }

    /// Elevation table in radians, ascending.
    pub fn elevations(&self) -> Result<Vec<f64>> {
        Ok(self.elevations_deg()?.into_iter().map(f64::to_radians).collect())
    }

    pub fn channels(&self) -> Result<usize> {
        Ok(self.elevations_deg()?.len())
    }

    /// Keeps every `stride`-th beam, starting with the lowest.
    pub fn subsample(&self, stride: usize) -> Result<LidarModel> {
        let e = self.elevations_deg()?;
        Ok(LidarModel {
            elevations_deg: Some(e.into_iter().step_by(stride.max(1)).collect()),
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.elevations_deg()?;
        if e.is_empty() || e.len() > u16::MAX as usize {
            return Err(Error::Config("lidar needs at least one beam".into()));
        }
        if e.iter().any(|a| !a.is_finite() || a.abs() >= 90.0) {
            return Err(Error::Config(
                "beam elevations must be finite and within (-90, 90) deg".into(),
            ));
        }
        if e.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("beam elevations must be strictly increasing".into()));
        }
        if self.width == 0 {
            return Err(Error::Config("lidar width must be positive".into()));
        }
        if !(self.min_range >= 0.0 && self.max_range > self.min_range) {
            return Err(Error::Config(format!(
                "lidar range [{}, {}] is empty",
                self.min_range, self.max_range
            )));
        }
        if !(self.range_noise >= 0.0 && self.range_noise.is_finite()) {
            return Err(Error::Config("range noise must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Polyline route on the ground; poses sit `sensor_height` above it, facing
/// along the current segment.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Route {
    /// Ground points (x, y, z).
    pub waypoints: Vec<[f64; 3]>,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    #[serde(default = "default_sensor_height")]
    pub sensor_height: f64,
    /// Caps the frame count; a single-waypoint route repeats that pose.
    #[serde(default)]
    pub frames: Option<usize>,
    /// Heading for a single-waypoint route, degrees.
    #[serde(default)]
    pub yaw_deg: f64,
}

fn default_spacing() -> f64 {
    1.0
}

fn default_sensor_height() -> f64 {
    1.8
}

impl Route {
    pub fn poses(&self) -> Result<Vec<Pose>> {
        let w = &self.waypoints;
        if w.is_empty() {
            return Err(Error::Config("route has no waypoints".into()));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::Config("route spacing must be positive".into()));
        }
        let h = self.sensor_height;
        if w.len() == 1 {
            let n = self.frames.unwrap_or(1);
            let p = Pose::from_xyz_yaw(w[0][0], w[0][1], w[0][2] + h, self.yaw_deg.to_radians());
            return Ok(vec![p; n]);
        }
        let mut out = Vec::new();
        let mut carry = 0.0;
        for (k, seg) in w.windows(2).enumerate() {
            let (a, b) = (seg[0], seg[1]);
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            if len == 0.0 {
                continue;
            }
            let yaw = (b[1] - a[1]).atan2(b[0] - a[0]);
            let mut s = carry;
            while s < len || (k == w.len() - 2 && (s - len).abs() < 1e-9) {
                let f = s / len;
                out.push(Pose::from_xyz_yaw(
                    a[0] + f * (b[0] - a[0]),
                    a[1] + f * (b[1] - a[1]),
                    a[2] + f * (b[2] - a[2]) + h,
                    yaw,
                ));
                s += self.spacing;
            }
            carry = s - len;
        }
        if let Some(n) = self.frames {
            out.truncate(n);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub lidar: LidarModel,
    #[serde(default, rename = "primitive")]
    pub primitives: Vec<Primitive>,
    #[serde(default, rename = "actor")]
    pub actors: Vec<Actor>,
    #[serde(default)]
    pub route: Option<Route>,
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::Config(format!("scene: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.lidar.validate()?;
        for p in &self.primitives {
            p.compile()?;
        }
        for a in &self.actors {
            if a.frames[0] >= a.frames[1] {
                return Err(Error::Config(format!("actor frame range {:?} is empty", a.frames)));
            }
            a.shape.compile()?;
        }
        Ok(())
    }

    /// Static primitives plus the actors present at `frame_index`.
    pub fn solids_at(&self, frame_index: usize) -> Result<Vec<Solid>> {
        self.primitives
            .iter()
            .cloned()
            .chain(self.actors.iter().filter_map(|a| a.placement(frame_index)))
            .map(|p| p.compile())
            .collect()
    }

    /// Drivable surface altitudes above (x, y), ascending, duplicates merged.
    pub fn surface_altitudes(&self, x: f64, y: f64, frame_index: usize) -> Result<Vec<f64>> {
        let mut z: Vec<f64> = self
            .solids_at(frame_index)?
            .iter()
            .filter_map(|s| s.top_at(x, y))
            .collect();
        z.sort_by(f64::total_cmp);
        z.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        Ok(z)
    }

    pub fn route_poses(&self) -> Result<Vec<Pose>> {
        self.route
            .as_ref()
            .ok_or_else(|| Error::Config(format!("scene {} has no route", self.name)))?
            .poses()
    }
}
