//! CAD primitives, their segment approximations, and the geometric
//! vertex/edge features fed to the network.
//!
//! All coordinates and lengths are in millimeters. Angles are radians with
//! +y pointing up. Lengths and offsets handed to the network are divided by
//! [`LENGTH_SCALE_MM`] so features stay near unit magnitude.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Millimeters per feature unit: lengths/offsets are divided by this before
/// entering the network.
pub const LENGTH_SCALE_MM: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("degenerate primitive: {0}")]
    DegeneratePrimitive(String),
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// 2D point (doubles as a 2D vector).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    pub fn add(self, other: Point) -> Point {
        Point::new(self.x + other.x, self.y + other.y)
    }

    pub fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the cross product of two 2D vectors.
    pub fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point) -> f64 {
        self.sub(other).norm()
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }
}

/// Axis-aligned bounding box in millimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Point,
    pub max: Point,
}

impl BoundingBox {
    pub fn empty() -> Self {
        BoundingBox {
            min: Point::new(f64::INFINITY, f64::INFINITY),
            max: Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    pub fn include(&mut self, p: Point) {
        self.min.x = self.min.x.min(p.x);
        self.min.y = self.min.y.min(p.y);
        self.max.x = self.max.x.max(p.x);
        self.max.y = self.max.y.max(p.y);
    }

    pub fn from_points<I: IntoIterator<Item = Point>>(points: I) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.include(p);
        }
        b
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn width(&self) -> f64 {
        (self.max.x - self.min.x).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.max.y - self.min.y).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Intersection-over-union of two boxes; 0 when either is empty.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.max.x.min(other.max.x) - self.min.x.max(other.min.x)).max(0.0);
        let iy = (self.max.y.min(other.max.y) - self.min.y.max(other.min.y)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Primitive kind, in one-hot order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Segment,
    Arc,
    Circle,
    Ellipse,
}

impl PrimitiveKind {
    pub fn one_hot_index(self) -> usize {
        match self {
            PrimitiveKind::Segment => 0,
            PrimitiveKind::Arc => 1,
            PrimitiveKind::Circle => 2,
            PrimitiveKind::Ellipse => 3,
        }
    }
}

/// Kind-specific geometry of a primitive, millimeters and radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveGeometry {
    Segment {
        p: Point,
        q: Point,
    },
    Arc {
        center: Point,
        radius: f64,
        start_angle: f64,
        end_angle: f64,
    },
    Circle {
        center: Point,
        radius: f64,
    },
    Ellipse {
        center: Point,
        semi_major: f64,
        semi_minor: f64,
        rotation: f64,
    },
}

/// One raw CAD graphic element with its panoptic ground truth.
///
/// `instance_id` is -1 for stuff and background primitives and a
/// non-negative per-drawing id for members of a thing instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub geometry: PrimitiveGeometry,
    pub semantic_label: usize,
    pub instance_id: i64,
}

impl Primitive {
    pub fn segment(p: Point, q: Point, semantic_label: usize, instance_id: i64) -> Self {
        Primitive {
            geometry: PrimitiveGeometry::Segment { p, q },
            semantic_label,
            instance_id,
        }
    }

    pub fn arc(
        center: Point,
        radius: f64,
        start_angle: f64,
        end_angle: f64,
        semantic_label: usize,
        instance_id: i64,
    ) -> Self {
        Primitive {
            geometry: PrimitiveGeometry::Arc {
                center,
                radius,
                start_angle,
                end_angle,
            },
            semantic_label,
            instance_id,
        }
    }

    pub fn circle(center: Point, radius: f64, semantic_label: usize, instance_id: i64) -> Self {
        Primitive {
            geometry: PrimitiveGeometry::Circle { center, radius },
            semantic_label,
            instance_id,
        }
    }

    pub fn ellipse(
        center: Point,
        semi_major: f64,
        semi_minor: f64,
        rotation: f64,
        semantic_label: usize,
        instance_id: i64,
    ) -> Self {
        Primitive {
            geometry: PrimitiveGeometry::Ellipse {
                center,
                semi_major,
                semi_minor,
                rotation,
            },
            semantic_label,
            instance_id,
        }
    }

    pub fn kind(&self) -> PrimitiveKind {
        match self.geometry {
            PrimitiveGeometry::Segment { .. } => PrimitiveKind::Segment,
            PrimitiveGeometry::Arc { .. } => PrimitiveKind::Arc,
            PrimitiveGeometry::Circle { .. } => PrimitiveKind::Circle,
            PrimitiveGeometry::Ellipse { .. } => PrimitiveKind::Ellipse,
        }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        match &self.geometry {
            PrimitiveGeometry::Segment { p, q } => {
                if p == q {
                    return Err(GeomError::InvalidPrimitive(
                        "segment endpoints must be distinct".into(),
                    ));
                }
            }
            PrimitiveGeometry::Arc { radius, .. } | PrimitiveGeometry::Circle { radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(GeomError::InvalidPrimitive("radius must be > 0".into()));
                }
            }
            PrimitiveGeometry::Ellipse {
                semi_major,
                semi_minor,
                ..
            } => {
                if !(*semi_major > 0.0 && *semi_minor > 0.0) {
                    return Err(GeomError::InvalidPrimitive(
                        "ellipse semi-axes must be > 0".into(),
                    ));
                }
            }
        }
        if !self.geometry_is_finite() {
            return Err(GeomError::InvalidPrimitive(
                "non-finite coordinate in primitive".into(),
            ));
        }
        Ok(())
    }

    fn geometry_is_finite(&self) -> bool {
        let finite = |p: &Point| p.x.is_finite() && p.y.is_finite();
        match &self.geometry {
            PrimitiveGeometry::Segment { p, q } => finite(p) && finite(q),
            PrimitiveGeometry::Arc {
                center,
                radius,
                start_angle,
                end_angle,
            } => finite(center) && radius.is_finite() && start_angle.is_finite() && end_angle.is_finite(),
            PrimitiveGeometry::Circle { center, radius } => finite(center) && radius.is_finite(),
            PrimitiveGeometry::Ellipse {
                center,
                semi_major,
                semi_minor,
                rotation,
            } => finite(center) && semi_major.is_finite() && semi_minor.is_finite() && rotation.is_finite(),
        }
    }
}

/// Segment stand-in for a primitive: segments map to themselves, arcs to
/// their chord, circles to the horizontal diameter, ellipses to the major
/// axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxSegment {
    pub p: Point,
    pub q: Point,
    pub source_kind: PrimitiveKind,
}

impl ApproxSegment {
    pub fn new(p: Point, q: Point, source_kind: PrimitiveKind) -> Self {
        ApproxSegment { p, q, source_kind }
    }

    pub fn length(&self) -> f64 {
        self.p.distance(self.q)
    }

    pub fn midpoint(&self) -> Point {
        self.p.midpoint(self.q)
    }

    pub fn direction(&self) -> Point {
        let d = self.q.sub(self.p);
        let n = d.norm();
        Point::new(d.x / n, d.y / n)
    }

    /// Undirected line angle in [0, pi).
    pub fn line_angle(&self) -> f64 {
        let d = self.q.sub(self.p);
        let mut a = d.y.atan2(d.x);
        if a < 0.0 {
            a += std::f64::consts::PI;
        }
        if a >= std::f64::consts::PI {
            a -= std::f64::consts::PI;
        }
        a
    }
}

/// Compute the segment approximation of a primitive.
pub fn approximate_segment(primitive: &Primitive) -> Result<ApproxSegment, GeomError> {
    primitive.validate()?;
    let kind = primitive.kind();
    match &primitive.geometry {
        PrimitiveGeometry::Segment { p, q } => Ok(ApproxSegment::new(*p, *q, kind)),
        PrimitiveGeometry::Arc {
            center,
            radius,
            start_angle,
            end_angle,
        } => {
            let sweep = (end_angle - start_angle).rem_euclid(2.0 * std::f64::consts::PI);
            if sweep.abs() < 1e-12 {
                return Err(GeomError::DegeneratePrimitive(
                    "arc start and end angles coincide".into(),
                ));
            }
            let at = |a: f64| {
                Point::new(center.x + radius * a.cos(), center.y + radius * a.sin())
            };
            let p = at(*start_angle);
            let q = at(*end_angle);
            if p.distance(q) < 1e-9 {
                // Sweep of a full turn approximates to a zero-length chord.
                return Err(GeomError::DegeneratePrimitive(
                    "arc chord has zero length".into(),
                ));
            }
            Ok(ApproxSegment::new(p, q, kind))
        }
        PrimitiveGeometry::Circle { center, radius } => Ok(ApproxSegment::new(
            Point::new(center.x - radius, center.y),
            Point::new(center.x + radius, center.y),
            kind,
        )),
        PrimitiveGeometry::Ellipse {
            center,
            semi_major,
            semi_minor,
            rotation,
        } => {
            // Major axis; if the named axes are swapped, the longer one wins.
            let (len, angle) = if semi_major >= semi_minor {
                (*semi_major, *rotation)
            } else {
                (*semi_minor, rotation + std::f64::consts::FRAC_PI_2)
            };
            let axis = Point::new(len * angle.cos(), len * angle.sin());
            Ok(ApproxSegment::new(
                center.sub(axis),
                center.add(axis),
                kind,
            ))
        }
    }
}

/// Per-vertex input features: direction doubled-angle encoding, normalized
/// length, and the primitive-kind one-hot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VertexFeature {
    pub cos2a: f64,
    pub sin2a: f64,
    pub len: f64,
    pub type_onehot: [f64; 4],
}

impl VertexFeature {
    pub const DIM: usize = 7;

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.cos2a,
            self.sin2a,
            self.len,
            self.type_onehot[0],
            self.type_onehot[1],
            self.type_onehot[2],
            self.type_onehot[3],
        ]
    }
}

/// Compute the vertex feature of an approximated segment.
///
/// The doubled angle makes the encoding continuous where the undirected
/// line angle wraps between 0 and pi, and symmetric under endpoint swap.
pub fn vertex_feature(segment: &ApproxSegment) -> VertexFeature {
    let alpha = segment.line_angle();
    let mut onehot = [0.0; 4];
    onehot[segment.source_kind.one_hot_index()] = 1.0;
    VertexFeature {
        cos2a: (2.0 * alpha).cos(),
        sin2a: (2.0 * alpha).sin(),
        len: segment.length() / LENGTH_SCALE_MM,
        type_onehot: onehot,
    }
}

/// Thresholds for the binary regularity indicators of an edge feature.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularityConfig {
    /// Parallel/orthogonal tolerance, degrees.
    pub angle_tol_deg: f64,
    /// Shared-endpoint tolerance, millimeters.
    pub endpoint_tol_mm: f64,
}

impl Default for RegularityConfig {
    fn default() -> Self {
        RegularityConfig {
            angle_tol_deg: 5.0,
            endpoint_tol_mm: 100.0,
        }
    }
}

impl RegularityConfig {
    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.angle_tol_deg >= 0.0 && self.angle_tol_deg < 45.0) {
            return Err(GeomError::InvalidConfig(
                "regularity angle tolerance must be in [0, 45) degrees".into(),
            ));
        }
        if !(self.endpoint_tol_mm >= 0.0) {
            return Err(GeomError::InvalidConfig(
                "endpoint tolerance must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-edge input features for an ordered vertex pair (i, j).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeFeature {
    /// Midpoint offset m_j - m_i, normalized by [`LENGTH_SCALE_MM`].
    pub delta: [f64; 2],
    /// Acute angle between the two lines, radians in [0, pi/2].
    pub angle: f64,
    /// Length ratio l_i / (l_i + l_j), in (0, 1).
    pub ratio: f64,
    /// Binary indicators: parallel, orthogonal, shared endpoint.
    pub regularity: [f64; 3],
}

impl EdgeFeature {
    pub const DIM: usize = 7;

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.delta[0],
            self.delta[1],
            self.angle,
            self.ratio,
            self.regularity[0],
            self.regularity[1],
            self.regularity[2],
        ]
    }
}

/// Acute angle between the undirected lines of two segments, in [0, pi/2].
pub fn acute_angle(a: &ApproxSegment, b: &ApproxSegment) -> f64 {
    let u = a.direction();
    let v = b.direction();
    // atan2 keeps precision for near-parallel and near-orthogonal pairs.
    u.cross(v).abs().atan2(u.dot(v).abs())
}

/// Compute the ordered edge feature for the pair (i, j).
pub fn edge_feature(si: &ApproxSegment, sj: &ApproxSegment, cfg: &RegularityConfig) -> EdgeFeature {
    let mi = si.midpoint();
    let mj = sj.midpoint();
    let angle = acute_angle(si, sj);
    let li = si.length();
    let lj = sj.length();

    let tol = cfg.angle_tol_deg.to_radians();
    let parallel = angle <= tol;
    let orthogonal = (std::f64::consts::FRAC_PI_2 - angle) <= tol;
    let shared = shared_endpoint(si, sj, cfg.endpoint_tol_mm);

    EdgeFeature {
        delta: [
            (mj.x - mi.x) / LENGTH_SCALE_MM,
            (mj.y - mi.y) / LENGTH_SCALE_MM,
        ],
        angle,
        ratio: li / (li + lj),
        regularity: [
            if parallel { 1.0 } else { 0.0 },
            if orthogonal { 1.0 } else { 0.0 },
            if shared { 1.0 } else { 0.0 },
        ],
    }
}

fn shared_endpoint(a: &ApproxSegment, b: &ApproxSegment, tol_mm: f64) -> bool {
    [a.p, a.q]
        .iter()
        .any(|pa| [b.p, b.q].iter().any(|pb| pa.distance(*pb) <= tol_mm))
}
