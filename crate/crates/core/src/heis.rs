//! Closed-form Heisenberg group H¹: group law, dilations, the left-invariant
//! frame, the Korányi gauge, sub-Riemannian metrics on the horizontal bundle
//! and the step-2 Popp volume.
//!
//! Coordinates are exponential: `(x, y, z)` with
//! `(x, y, z)·(x', y', z') = (x + x', y + y', z + z' + (x y' - y x') / 2)`.
//! The frame `X1 = ∂x - y/2 ∂z`, `X2 = ∂y + x/2 ∂z`, `X3 = ∂z` is left-invariant
//! and satisfies `[X1, X2] = X3`.

use nalgebra::{Matrix2, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{QlabError, Result};

/// Homogeneous dimension of H¹.
pub const HOMOGENEOUS_DIM: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Point::new(v[0], v[1], v[2])
    }

    /// Group product `self · q`.
    pub fn mul(self, q: Point) -> Point {
        group_mul(self, q)
    }

    pub fn inverse(self) -> Point {
        Point::new(-self.x, -self.y, -self.z)
    }
}

pub fn group_mul(p: Point, q: Point) -> Point {
    Point::new(
        p.x + q.x,
        p.y + q.y,
        p.z + q.z + 0.5 * (p.x * q.y - p.y * q.x),
    )
}

/// Anisotropic dilation `(λx, λy, λ²z)`, a group automorphism.
pub fn dilate(lambda: f64, p: Point) -> Result<Point> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(QlabError::NonPositiveDilation(lambda));
    }
    Ok(dilate_unchecked(lambda, p))
}

#[inline]
pub(crate) fn dilate_unchecked(lambda: f64, p: Point) -> Point {
    Point::new(lambda * p.x, lambda * p.y, lambda * lambda * p.z)
}

/// Korányi gauge `((x²+y²)² + 16 z²)^{1/4}`.
pub fn koranyi_gauge(p: Point) -> f64 {
    let r2 = p.x * p.x + p.y * p.y;
    (r2 * r2 + 16.0 * p.z * p.z).sqrt().sqrt()
}

/// Gauge distance `N(p⁻¹ q)`.
pub fn gauge_distance(p: Point, q: Point) -> f64 {
    koranyi_gauge(p.inverse().mul(q))
}

/// Coefficients of `X1`, `X2` and `ε X3` in the coordinate basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameVectors {
    pub v1: [f64; 3],
    pub v2: [f64; 3],
    pub v3: [f64; 3],
}

pub fn frame_at(p: Point, eps: f64) -> FrameVectors {
    FrameVectors {
        v1: [1.0, 0.0, -0.5 * p.y],
        v2: [0.0, 1.0, 0.5 * p.x],
        v3: [0.0, 0.0, eps],
    }
}

/// Components of a tangent vector `v` (coordinate basis) at `p` in the frame
/// `(X1, X2, X3)`.
pub fn frame_components(p: Point, v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2] + 0.5 * p.y * v[0] - 0.5 * p.x * v[1])
}

/// Differential of the left translation `q ↦ g·q` (independent of `q`).
pub fn left_translation_differential(g: Point) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -0.5 * g.y, 0.5 * g.x, 1.0)
}

/// A polynomial in `(x, y, z)` stored as `(coefficient, px, py, pz)` terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial(pub Vec<(f64, u32, u32, u32)>);

impl Polynomial {
    pub fn constant(c: f64) -> Self {
        Polynomial(vec![(c, 0, 0, 0)])
    }

    pub fn zero() -> Self {
        Polynomial(Vec::new())
    }

    pub fn eval(&self, p: Point) -> f64 {
        self.0
            .iter()
            .map(|&(c, px, py, pz)| c * p.x.powi(px as i32) * p.y.powi(py as i32) * p.z.powi(pz as i32))
            .sum()
    }
}

/// A sub-Riemannian metric on `span(X1, X2)` given by polynomial coefficients
/// `g_ij = g(X_i, X_j)`, together with a volume density `ω` relative to Lebesgue
/// measure. The coefficients may be evaluated in left-translated coordinates:
/// `metric.g(q)` reads the polynomials at `origin · q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubRiemannianMetric {
    pub g11: Polynomial,
    pub g12: Polynomial,
    pub g22: Polynomial,
    pub omega: Polynomial,
    #[serde(default)]
    pub origin: Point,
}

impl SubRiemannianMetric {
    /// The left-invariant metric making `X1, X2` orthonormal, with Lebesgue (= Popp) volume.
    pub fn standard() -> Self {
        SubRiemannianMetric {
            g11: Polynomial::constant(1.0),
            g12: Polynomial::zero(),
            g22: Polynomial::constant(1.0),
            omega: Polynomial::constant(1.0),
            origin: Point::ORIGIN,
        }
    }

    pub fn diagonal(g11: Polynomial, g22: Polynomial) -> Self {
        SubRiemannianMetric {
            g11,
            g12: Polynomial::zero(),
            g22,
            ..Self::standard()
        }
    }

    /// `diag(1 + x²/4, 1)` with Lebesgue volume, the standard perturbed test metric.
    pub fn perturbed_example() -> Self {
        Self::diagonal(
            Polynomial(vec![(1.0, 0, 0, 0), (0.25, 2, 0, 0)]),
            Polynomial::constant(1.0),
        )
    }

    pub fn with_omega(mut self, omega: Polynomial) -> Self {
        self.omega = omega;
        self
    }

    /// The same metric read in coordinates left-translated by `g`.
    pub fn translated(&self, g: Point) -> Self {
        let mut m = self.clone();
        m.origin = self.origin.mul(g);
        m
    }

    pub fn is_standard(&self) -> bool {
        let s = Self::standard();
        self.g11 == s.g11 && self.g12 == s.g12 && self.g22 == s.g22 && self.omega == s.omega
    }

    fn ambient(&self, p: Point) -> Point {
        self.origin.mul(p)
    }

    pub fn g(&self, p: Point) -> Matrix2<f64> {
        let q = self.ambient(p);
        let off = self.g12.eval(q);
        Matrix2::new(self.g11.eval(q), off, off, self.g22.eval(q))
    }

    pub fn omega(&self, p: Point) -> f64 {
        self.omega.eval(self.ambient(p))
    }

    /// Inverse metric `g^{ij}` at `p`, checking positive definiteness.
    pub fn g_inverse(&self, p: Point) -> Result<Matrix2<f64>> {
        let g = self.g(p);
        let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
        if !(g[(0, 0)] > 0.0 && det > 0.0) || !det.is_finite() {
            return Err(degenerate(p));
        }
        Ok(Matrix2::new(g[(1, 1)], -g[(0, 1)], -g[(1, 0)], g[(0, 0)]) / det)
    }
}

fn degenerate(p: Point) -> QlabError {
    QlabError::MetricDegenerate { x: p.x, y: p.y, z: p.z }
}

/// Lower-triangular `a` with positive diagonal such that `a g aᵀ = I`, i.e.
/// `Y_i = a_i^j X_j` is `g`-orthonormal. Computed as the inverse Cholesky factor.
pub fn orthonormalize_matrix(g: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let l11 = g[(0, 0)].sqrt();
    if !(g[(0, 0)] > 0.0) {
        return None;
    }
    let l21 = g[(1, 0)] / l11;
    let d = g[(1, 1)] - l21 * l21;
    if !(d > 0.0) {
        return None;
    }
    let l22 = d.sqrt();
    Some(Matrix2::new(1.0 / l11, 0.0, -l21 / (l11 * l22), 1.0 / l22))
}

pub fn orthonormalize(metric: &SubRiemannianMetric, p: Point) -> Result<Matrix2<f64>> {
    orthonormalize_matrix(&metric.g(p)).ok_or_else(|| degenerate(p))
}

/// Popp data of the step-2 structure `span(X1,X2) ⊕ span(X3)` at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoppData {
    /// `max |ad − bc|` over pairs in the unit ball of `g1`; `[B,B] = [-m, m]·X3`.
    pub m: f64,
    /// `g2(X3, X3)`, chosen so that `m X3` is a unit vector.
    pub g2: f64,
    /// Riemannian volume of `g1 ⊕ g2` relative to Lebesgue measure.
    pub density: f64,
}

pub fn popp_step2(g1: &Matrix2<f64>) -> Result<PoppData> {
    let det = g1[(0, 0)] * g1[(1, 1)] - g1[(0, 1)] * g1[(1, 0)];
    if !(g1[(0, 0)] > 0.0 && det > 0.0) || (g1[(0, 1)] - g1[(1, 0)]).abs() > 1e-12 * g1.norm() {
        return Err(QlabError::MetricDegenerate { x: f64::NAN, y: f64::NAN, z: f64::NAN });
    }
    // With g1 = L Lᵀ the unit ball is L⁻ᵀ(disc), so det[v, w] ≤ |det L⁻ᵀ| = det(g1)^{-1/2}.
    let m = 1.0 / det.sqrt();
    let g2 = 1.0 / (m * m);
    // The frame (X1, X2, X3) has unit determinant in coordinates; volume = sqrt(det g1 · g2).
    let density = (det * g2).sqrt();
    Ok(PoppData { m, g2, density })
}

/// Popp density of a (possibly non-invariant) metric at `p`, relative to Lebesgue.
pub fn popp_density(metric: &SubRiemannianMetric, p: Point) -> Result<f64> {
    popp_step2(&metric.g(p)).map(|d| d.density).map_err(|_| degenerate(p))
}
