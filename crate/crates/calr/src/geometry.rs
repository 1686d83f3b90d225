//! Nested smooth closed interface geometry (Γ_i = ∂D inside Γ_e = ∂Ω) and its
//! quadrature-ready discretization.
//!
//! All supported curve kinds are analytic 2π-periodic parametrizations with
//! counterclockwise orientation; the outward normal is the unit tangent
//! rotated by −π/2. Equispaced parameter nodes with the periodic trapezoidal
//! rule give spectral accuracy on these curves.

use nalgebra::{Point2, Vector2};
use thiserror::Error;

pub type Point = Point2<f64>;
pub type Vec2 = Vector2<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("curve parameter must be positive: {0}")]
    NonPositiveParameter(String),
    #[error("perturbed circle violates simplicity bound: eps*(1+k) = {0} >= 1")]
    PerturbationTooLarge(f64),
    #[error("node count must be even and >= 16, got {0}")]
    BadNodeCount(usize),
    #[error("inner curve is not nested inside the outer curve with clearance {required:.3e} (worst {worst:.3e})")]
    NotNested { required: f64, worst: f64 },
    #[error("point lies on the boundary within tolerance")]
    OnBoundary,
}

/// Supported interface shapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurveKind {
    Circle {
        center: Point,
        radius: f64,
    },
    Ellipse {
        center: Point,
        a: f64,
        b: f64,
    },
    PerturbedCircle {
        center: Point,
        r0: f64,
        eps: f64,
        k: u32,
    },
}

/// A smooth closed curve with analytic evaluators for position, tangent,
/// outward normal and curvature at any parameter t ∈ [0, 2π).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryCurve {
    kind: CurveKind,
}

/// Where a point sits relative to a closed curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Inside,
    Outside,
    Boundary,
}

pub fn make_curve(kind: CurveKind) -> Result<BoundaryCurve, GeometryError> {
    match kind {
        CurveKind::Circle { radius, .. } => {
            if radius <= 0.0 {
                return Err(GeometryError::NonPositiveParameter(format!(
                    "radius {radius}"
                )));
            }
        }
        CurveKind::Ellipse { a, b, .. } => {
            if a <= 0.0 || b <= 0.0 {
                return Err(GeometryError::NonPositiveParameter(format!(
                    "semi-axes {a}, {b}"
                )));
            }
        }
        CurveKind::PerturbedCircle { r0, eps, k, .. } => {
            if r0 <= 0.0 {
                return Err(GeometryError::NonPositiveParameter(format!(
                    "base radius {r0}"
                )));
            }
            if eps < 0.0 {
                return Err(GeometryError::NonPositiveParameter(format!(
                    "amplitude {eps}"
                )));
            }
            let bound = eps * (1.0 + k as f64);
            if bound >= 1.0 {
                return Err(GeometryError::PerturbationTooLarge(bound));
            }
        }
    }
    Ok(BoundaryCurve { kind })
}

impl BoundaryCurve {
    pub fn circle(center: Point, radius: f64) -> Result<Self, GeometryError> {
        make_curve(CurveKind::Circle { center, radius })
    }

    pub fn ellipse(center: Point, a: f64, b: f64) -> Result<Self, GeometryError> {
        make_curve(CurveKind::Ellipse { center, a, b })
    }

    pub fn perturbed_circle(
        center: Point,
        r0: f64,
        eps: f64,
        k: u32,
    ) -> Result<Self, GeometryError> {
        make_curve(CurveKind::PerturbedCircle { center, r0, eps, k })
    }

    pub fn kind(&self) -> CurveKind {
        self.kind
    }

    pub fn center(&self) -> Point {
        match self.kind {
            CurveKind::Circle { center, .. }
            | CurveKind::Ellipse { center, .. }
            | CurveKind::PerturbedCircle { center, .. } => center,
        }
    }

    pub fn position(&self, t: f64) -> Point {
        let (c, x, y) = match self.kind {
            CurveKind::Circle { center, radius } => (center, radius * t.cos(), radius * t.sin()),
            CurveKind::Ellipse { center, a, b } => (center, a * t.cos(), b * t.sin()),
            CurveKind::PerturbedCircle { center, r0, eps, k } => {
                let r = r0 * (1.0 + eps * (k as f64 * t).cos());
                (center, r * t.cos(), r * t.sin())
            }
        };
        Point::new(c.x + x, c.y + y)
    }

    /// dx/dt.
    pub fn derivative(&self, t: f64) -> Vec2 {
        match self.kind {
            CurveKind::Circle { radius, .. } => Vec2::new(-radius * t.sin(), radius * t.cos()),
            CurveKind::Ellipse { a, b, .. } => Vec2::new(-a * t.sin(), b * t.cos()),
            CurveKind::PerturbedCircle { r0, eps, k, .. } => {
                let kf = k as f64;
                let r = r0 * (1.0 + eps * (kf * t).cos());
                let dr = -r0 * eps * kf * (kf * t).sin();
                Vec2::new(dr * t.cos() - r * t.sin(), dr * t.sin() + r * t.cos())
            }
        }
    }

    /// d²x/dt².
    pub fn second_derivative(&self, t: f64) -> Vec2 {
        match self.kind {
            CurveKind::Circle { radius, .. } => Vec2::new(-radius * t.cos(), -radius * t.sin()),
            CurveKind::Ellipse { a, b, .. } => Vec2::new(-a * t.cos(), -b * t.sin()),
            CurveKind::PerturbedCircle { r0, eps, k, .. } => {
                let kf = k as f64;
                let r = r0 * (1.0 + eps * (kf * t).cos());
                let dr = -r0 * eps * kf * (kf * t).sin();
                let ddr = -r0 * eps * kf * kf * (kf * t).cos();
                Vec2::new(
                    (ddr - r) * t.cos() - 2.0 * dr * t.sin(),
                    (ddr - r) * t.sin() + 2.0 * dr * t.cos(),
                )
            }
        }
    }

    pub fn speed(&self, t: f64) -> f64 {
        self.derivative(t).norm()
    }

    pub fn unit_tangent(&self, t: f64) -> Vec2 {
        let d = self.derivative(t);
        d / d.norm()
    }

    /// Outward unit normal: the unit tangent rotated by −π/2.
    pub fn outward_normal(&self, t: f64) -> Vec2 {
        let tv = self.unit_tangent(t);
        Vec2::new(tv.y, -tv.x)
    }

    /// Signed curvature (positive for counterclockwise convex arcs).
    pub fn curvature(&self, t: f64) -> f64 {
        let d1 = self.derivative(t);
        let d2 = self.second_derivative(t);
        let cross = d1.x * d2.y - d1.y * d2.x;
        cross / d1.norm().powi(3)
    }

    /// Cheap upper bound used to scale exclusion zones and clearances.
    pub fn diameter(&self) -> f64 {
        match self.kind {
            CurveKind::Circle { radius, .. } => 2.0 * radius,
            CurveKind::Ellipse { a, b, .. } => 2.0 * a.max(b),
            CurveKind::PerturbedCircle { r0, eps, .. } => 2.0 * r0 * (1.0 + eps),
        }
    }

    /// Winding number of the curve around `p` by adaptive periodic trapezoid.
    pub fn winding_number(&self, p: Point) -> f64 {
        let mut n = 64usize;
        let mut prev = f64::INFINITY;
        loop {
            let mut acc = 0.0;
            for j in 0..n {
                let t = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                let x = self.position(t);
                let d = x - p;
                let dp = self.derivative(t);
                acc += (d.x * dp.y - d.y * dp.x) / d.norm_squared();
            }
            let w = acc / n as f64; // (1/2π)·(2π/n)·Σ
            if (w - prev).abs() < 1e-10 || n >= 1 << 15 {
                return w;
            }
            prev = w;
            n *= 2;
        }
    }

    /// Euclidean distance from `p` to the curve (coarse scan + Newton polish).
    pub fn nearest_distance(&self, p: Point) -> f64 {
        let scan = 256;
        let mut best_t = 0.0;
        let mut best_d2 = f64::INFINITY;
        for j in 0..scan {
            let t = 2.0 * std::f64::consts::PI * j as f64 / scan as f64;
            let d2 = (self.position(t) - p).norm_squared();
            if d2 < best_d2 {
                best_d2 = d2;
                best_t = t;
            }
        }
        let mut t = best_t;
        for _ in 0..12 {
            let x = self.position(t) - p;
            let d1 = self.derivative(t);
            let d2 = self.second_derivative(t);
            let g = x.dot(&d1);
            let h = d1.norm_squared() + x.dot(&d2);
            if h.abs() < 1e-30 {
                break;
            }
            let step = g / h;
            t -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        (self.position(t) - p).norm().min(best_d2.sqrt())
    }

    /// Classifies `p` against the curve; `Boundary` within 1e-12 × diameter.
    pub fn locate(&self, p: Point) -> Location {
        if self.nearest_distance(p) <= 1e-12 * self.diameter() {
            return Location::Boundary;
        }
        if self.winding_number(p).round() as i64 != 0 {
            Location::Inside
        } else {
            Location::Outside
        }
    }
}

/// True iff `p` is strictly inside the curve (winding-number test).
pub fn contains(curve: &BoundaryCurve, p: Point) -> bool {
    curve.locate(p) == Location::Inside
}

/// Equispaced-parameter quadrature data for one curve.
///
/// Weights are the periodic trapezoidal rule pulled back to arclength:
/// w_j = |x'(t_j)| · 2π/N.
#[derive(Debug, Clone)]
pub struct DiscreteBoundary {
    pub curve: BoundaryCurve,
    pub n: usize,
    pub params: Vec<f64>,
    pub nodes: Vec<Point>,
    pub tangents: Vec<Vec2>,
    pub normals: Vec<Vec2>,
    pub speeds: Vec<f64>,
    pub weights: Vec<f64>,
    pub curvatures: Vec<f64>,
}

pub fn discretize(curve: &BoundaryCurve, n: usize) -> Result<DiscreteBoundary, GeometryError> {
    if n < 16 || !n.is_multiple_of(2) {
        return Err(GeometryError::BadNodeCount(n));
    }
    let h = 2.0 * std::f64::consts::PI / n as f64;
    let mut params = Vec::with_capacity(n);
    let mut nodes = Vec::with_capacity(n);
    let mut tangents = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut speeds = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut curvatures = Vec::with_capacity(n);
    for j in 0..n {
        let t = h * j as f64;
        params.push(t);
        nodes.push(curve.position(t));
        let tv = curve.unit_tangent(t);
        tangents.push(tv);
        normals.push(Vec2::new(tv.y, -tv.x));
        let s = curve.speed(t);
        speeds.push(s);
        weights.push(s * h);
        curvatures.push(curve.curvature(t));
    }
    Ok(DiscreteBoundary {
        curve: *curve,
        n,
        params,
        nodes,
        tangents,
        normals,
        speeds,
        weights,
        curvatures,
    })
}

impl DiscreteBoundary {
    pub fn perimeter(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn max_speed(&self) -> f64 {
        self.speeds.iter().cloned().fold(0.0, f64::max)
    }

    pub fn diameter(&self) -> f64 {
        self.curve.diameter()
    }
}

/// The core–shell pair: Γ_i strictly inside Γ_e, each with its quadrature.
#[derive(Debug, Clone)]
pub struct ProblemGeometry {
    pub inner_curve: BoundaryCurve,
    pub outer_curve: BoundaryCurve,
    pub inner: DiscreteBoundary,
    pub outer: DiscreteBoundary,
}

impl ProblemGeometry {
    pub fn new(
        inner: BoundaryCurve,
        outer: BoundaryCurve,
        n_inner: usize,
        n_outer: usize,
    ) -> Result<Self, GeometryError> {
        let di = discretize(&inner, n_inner)?;
        let de = discretize(&outer, n_outer)?;
        let required = 1e-6 * outer.diameter();
        let mut worst = f64::INFINITY;
        for node in &di.nodes {
            if !contains(&outer, *node) {
                return Err(GeometryError::NotNested {
                    required,
                    worst: -1.0,
                });
            }
            worst = worst.min(outer.nearest_distance(*node));
        }
        if worst < required {
            return Err(GeometryError::NotNested { required, worst });
        }
        Ok(Self {
            inner_curve: inner,
            outer_curve: outer,
            inner: di,
            outer: de,
        })
    }

    /// Concentric disks centered at the origin.
    pub fn annulus(r_i: f64, r_e: f64, n: usize) -> Result<Self, GeometryError> {
        let inner = BoundaryCurve::circle(Point::origin(), r_i)?;
        let outer = BoundaryCurve::circle(Point::origin(), r_e)?;
        Self::new(inner, outer, n, n)
    }

    pub fn outer_diameter(&self) -> f64 {
        self.outer_curve.diameter()
    }
}
