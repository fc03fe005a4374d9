//! Approximate Carnot–Carathéodory distances through the Riemannian metrics
//! `g_ε` (frame `X1, X2, εX3` orthonormal) and pointwise metric distortion of maps.
//!
//! [`dist_eps`] runs Dijkstra on the 26-neighbour graph of a [`Grid`]. Distortion
//! ratios need many accurate distances at small `ε`, so [`pointwise_distortion`]
//! uses a reduced table instead: `g_ε` is invariant under rotations about the
//! z-axis, hence `d_ε(0, q)` depends on `(ρ, z)` only and equals the distance from
//! the origin in the quotient metric `dU²/(2U) + dV²/(2U + 4ε²)`, `U = ρ²/2`,
//! `V = 2z`. That 2-D metric is solved once by Dijkstra on a fine `(U, V)` grid
//! with edges integrated exactly along straight segments.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QlabError, Result};
use crate::grid::Grid;
use crate::heis::Point;

#[derive(Clone, Copy, PartialEq, PartialOrd)]
struct Key(f64);

impl Eq for Key {}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// `g_ε`-length of the straight segment from `a` to `b` (midpoint rule).
fn segment_cost(a: Point, b: Point, eps: f64) -> f64 {
    let (dx, dy, dz) = (b.x - a.x, b.y - a.y, b.z - a.z);
    let (mx, my) = (0.5 * (a.x + b.x), 0.5 * (a.y + b.y));
    let theta = (dz - 0.5 * (mx * dy - my * dx)) / eps;
    (dx * dx + dy * dy + theta * theta).sqrt()
}

fn nearest_node(grid: &Grid, p: Point) -> Result<usize> {
    if !grid.contains(p) {
        return Err(QlabError::OutOfDomain(format!("{p:?} is outside the grid box")));
    }
    let h = grid.h();
    let c = [(p.x - grid.lo.x) / h[0], (p.y - grid.lo.y) / h[1], (p.z - grid.lo.z) / h[2]];
    let ijk: Vec<usize> = (0..3).map(|a| (c[a].round() as usize).min(grid.n[a] - 1)).collect();
    Ok(grid.index(ijk[0], ijk[1], ijk[2]))
}

/// Shortest-path distance between the nodes nearest to `p` and `q` on the
/// 26-neighbour graph of `grid`, edges weighted by their `g_ε` length.
pub fn dist_eps(p: Point, q: Point, eps: f64, grid: &Grid) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(QlabError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let src = nearest_node(grid, p)?;
    let dst = nearest_node(grid, q)?;
    if src == dst {
        return Ok(0.0);
    }
    let mut dist = vec![f64::INFINITY; grid.len()];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Reverse((Key(0.0), src)));
    while let Some(Reverse((Key(d), i))) = heap.pop() {
        if i == dst {
            return Ok(d);
        }
        if d > dist[i] {
            continue;
        }
        let c = grid.ijk(i);
        let pi = grid.point(i);
        for dk in -1i64..=1 {
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    if di == 0 && dj == 0 && dk == 0 {
                        continue;
                    }
                    let (a, b, e) = (c[0] as i64 + di, c[1] as i64 + dj, c[2] as i64 + dk);
                    if a < 0 || b < 0 || e < 0 || a >= grid.n[0] as i64 || b >= grid.n[1] as i64 || e >= grid.n[2] as i64 {
                        continue;
                    }
                    let j = grid.index(a as usize, b as usize, e as usize);
                    let nd = d + segment_cost(pi, grid.point(j), eps);
                    if nd < dist[j] {
                        dist[j] = nd;
                        heap.push(Reverse((Key(nd), j)));
                    }
                }
            }
        }
    }
    Err(QlabError::OutOfDomain("target unreachable".into()))
}

/// `ε/r` used by the distortion probe: distances at scale `r` use `g_{κ r}`.
pub const PROBE_KAPPA: f64 = 0.01;

const TABLE_U_MAX: f64 = 8.0;
const TABLE_V_MAX: f64 = 4.0;
const TABLE_H: f64 = 0.01;
const STENCIL_REACH: i64 = 4;

// 6-point Gauss–Legendre rule on [-1, 1].
const GL_X: [f64; 6] = [
    -0.932_469_514_203_152,
    -0.661_209_386_466_264_5,
    -0.238_619_186_083_196_9,
    0.238_619_186_083_196_9,
    0.661_209_386_466_264_5,
    0.932_469_514_203_152,
];
const GL_W: [f64; 6] = [
    0.171_324_492_379_170_3,
    0.360_761_573_048_138_6,
    0.467_913_934_572_691,
    0.467_913_934_572_691,
    0.360_761_573_048_138_6,
    0.171_324_492_379_170_3,
];

/// Length of the straight `(U, V)` segment in the quotient metric. With
/// `U = s²` the integrand `√2 √(1 + m² s²/(s² + 2κ²))`, `m = ΔV/ΔU`, is smooth.
fn reduced_cost(u0: f64, du: f64, dv: f64, kappa: f64) -> f64 {
    if du == 0.0 {
        return dv.abs() / (2.0 * u0 + 4.0 * kappa * kappa).sqrt();
    }
    let m2 = (dv / du).powi(2);
    let (s0, s1) = (u0.max(0.0).sqrt(), (u0 + du).max(0.0).sqrt());
    let (mid, half) = (0.5 * (s0 + s1), 0.5 * (s1 - s0).abs());
    let k2 = 2.0 * kappa * kappa;
    let mut acc = 0.0;
    for (x, w) in GL_X.iter().zip(GL_W) {
        let s = mid + half * x;
        acc += w * (1.0 + m2 * s * s / (s * s + k2)).sqrt();
    }
    std::f64::consts::SQRT_2 * half * acc
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// `d_κ(0, ·)` tabulated on the `(U, V)` plane.
pub struct DistanceTable {
    kappa: f64,
    nu: usize,
    nv: usize,
    values: Vec<f64>,
}

impl DistanceTable {
    pub fn build(kappa: f64) -> Self {
        let nu = (TABLE_U_MAX / TABLE_H).round() as usize + 1;
        let nv = (TABLE_V_MAX / TABLE_H).round() as usize + 1;
        let mut offsets = Vec::new();
        for a in -STENCIL_REACH..=STENCIL_REACH {
            for b in -STENCIL_REACH..=STENCIL_REACH {
                if (a, b) != (0, 0) && gcd(a, b) == 1 {
                    offsets.push((a, b));
                }
            }
        }
        let costs: Vec<f64> = (0..nu)
            .into_par_iter()
            .flat_map_iter(|i| {
                let u0 = i as f64 * TABLE_H;
                offsets.iter().map(move |&(a, b)| {
                    if i as i64 + a < 0 {
                        f64::INFINITY
                    } else {
                        reduced_cost(u0, a as f64 * TABLE_H, b as f64 * TABLE_H, kappa)
                    }
                })
            })
            .collect();
        let no = offsets.len();
        let mut dist = vec![f64::INFINITY; nu * nv];
        let mut done = vec![false; nu * nv];
        let mut heap = BinaryHeap::new();
        dist[0] = 0.0;
        heap.push(Reverse((Key(0.0), 0usize)));
        while let Some(Reverse((Key(d), idx))) = heap.pop() {
            if done[idx] {
                continue;
            }
            done[idx] = true;
            let (i, j) = ((idx % nu) as i64, (idx / nu) as i64);
            for (o, &(a, b)) in offsets.iter().enumerate() {
                let (ni, nj) = (i + a, (j + b).abs());
                if ni < 0 || ni >= nu as i64 || nj >= nv as i64 {
                    continue;
                }
                let nidx = ni as usize + nu * nj as usize;
                let nd = d + costs[i as usize * no + o];
                if nd < dist[nidx] {
                    dist[nidx] = nd;
                    heap.push(Reverse((Key(nd), nidx)));
                }
            }
        }
        DistanceTable { kappa, nu, nv, values: dist }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// `d_κ(0, g)` by bilinear interpolation, `None` outside the table.
    pub fn lookup(&self, g: Point) -> Option<f64> {
        let u = 0.5 * (g.x * g.x + g.y * g.y) / TABLE_H;
        let v = (2.0 * g.z).abs() / TABLE_H;
        if !(u <= (self.nu - 2) as f64 && v <= (self.nv - 2) as f64) {
            return None;
        }
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        let (s, t) = (u - i as f64, v - j as f64);
        let at = |a: usize, b: usize| self.values[a + self.nu * b];
        Some(
            (1.0 - s) * (1.0 - t) * at(i, j)
                + s * (1.0 - t) * at(i + 1, j)
                + (1.0 - s) * t * at(i, j + 1)
                + s * t * at(i + 1, j + 1),
        )
    }
}

/// Process-wide table at [`PROBE_KAPPA`].
pub fn probe_table() -> &'static DistanceTable {
    static TABLE: OnceLock<DistanceTable> = OnceLock::new();
    TABLE.get_or_init(|| DistanceTable::build(PROBE_KAPPA))
}

/// `d_ε(p, q)` for `ε = κ·scale` via the reduced table:
/// `d_ε(p, q) = λ d_κ(δ_{1/λ}(p⁻¹q))`, `λ = scale`.
pub fn probe_distance(p: Point, q: Point, scale: f64) -> Option<f64> {
    let g = p.inverse().mul(q);
    let s = 1.0 / scale;
    let g = Point::new(g.x * s, g.y * s, g.z * s * s);
    probe_table().lookup(g).map(|d| d * scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    /// Extrapolated `H_f(p)`: sup over the ball `B_r` against inf outside it.
    pub h: f64,
    /// Extrapolated `H^=_f(p)`: sup against inf on the sphere `S_r`.
    pub h_eq: f64,
    /// Extrapolated `L_f(p)`.
    pub lip_upper: f64,
    /// Extrapolated `ℓ_f(p)`.
    pub lip_lower: f64,
    pub radii: Vec<f64>,
    pub samples_per_shell: usize,
    /// Per-radius values `(H, H^=, L, ℓ)` before extrapolation.
    pub ladder: Vec<[f64; 4]>,
}

const SHELL_LAT: usize = 11;
const SHELL_LON: usize = 16;
const MIN_SAMPLES: usize = SHELL_LAT * SHELL_LON / 2;

/// Unit directions: points of the gauge sphere rescaled onto `{d_κ(0, σ) = 1}`.
fn unit_sphere() -> &'static Vec<Point> {
    static SPHERE: OnceLock<Vec<Point>> = OnceLock::new();
    SPHERE.get_or_init(|| {
        let table = probe_table();
        let mut out = Vec::with_capacity(SHELL_LAT * SHELL_LON);
        for a in 0..SHELL_LAT {
            let alpha = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * (a as f64 + 0.5) / SHELL_LAT as f64;
            let rho = alpha.cos().sqrt();
            let z = alpha.sin() / 4.0;
            for b in 0..SHELL_LON {
                let phi = 2.0 * std::f64::consts::PI * b as f64 / SHELL_LON as f64;
                let dir = Point::new(rho * phi.cos(), rho * phi.sin(), z);
                let at = |s: f64| table.lookup(Point::new(s * dir.x, s * dir.y, s * s * dir.z)).unwrap_or(f64::INFINITY);
                let (mut lo, mut hi) = (0.0, 1.0);
                while at(hi) < 1.0 {
                    hi *= 2.0;
                }
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if at(mid) < 1.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let s = 0.5 * (lo + hi);
                out.push(Point::new(s * dir.x, s * dir.y, s * s * dir.z));
            }
        }
        out
    })
}

/// Image distances `d(f(p), f(p·δ_ρ σ))` over the unit sphere at radius `ρ`;
/// samples falling outside the table are dropped.
fn shell_image_distances(f: &(dyn Fn(Point) -> Point + Sync), p: Point, rho: f64, scale: f64) -> Vec<f64> {
    let fp = f(p);
    unit_sphere()
        .par_iter()
        .filter_map(|s| {
            let q = p.mul(Point::new(rho * s.x, rho * s.y, rho * rho * s.z));
            probe_distance(fp, f(q), scale)
        })
        .collect()
}

/// Value at `r = 0` of the least-squares line through `(r_k, v_k)`.
fn extrapolate(r: &[f64], v: &[f64]) -> f64 {
    let n = r.len() as f64;
    if r.len() < 2 {
        return v[0];
    }
    let (mr, mv) = (r.iter().sum::<f64>() / n, v.iter().sum::<f64>() / n);
    let sxx: f64 = r.iter().map(|x| (x - mr).powi(2)).sum();
    let sxy: f64 = r.iter().zip(v).map(|(x, y)| (x - mr) * (y - mv)).sum();
    if sxx == 0.0 {
        return mv;
    }
    mv - sxy / sxx * mr
}

/// Metric distortion of `f` at `p` over a decreasing radius ladder, extrapolated
/// linearly to `r → 0`.
pub fn pointwise_distortion(f: &(dyn Fn(Point) -> Point + Sync), p: Point, radii: &[f64]) -> Result<DistortionReport> {
    if radii.is_empty() || radii.iter().any(|&r| !(r > 0.0)) || radii.windows(2).any(|w| w[1] >= w[0]) {
        return Err(QlabError::InvalidArgument("radii must be positive and strictly decreasing".into()));
    }
    let inner = [0.25, 0.5, 0.75, 1.0];
    let outer = [1.0, 1.25, 1.5];
    let mut ladder = Vec::with_capacity(radii.len());
    for &r in radii {
        // Rescale so that image distances land near unit size in the table.
        let first = shell_image_distances(f, p, r, r);
        if first.len() < MIN_SAMPLES {
            return Err(QlabError::ProbeUnderflow { got: first.len(), needed: MIN_SAMPLES });
        }
        let scale = first.iter().sum::<f64>() / first.len() as f64;
        if !(scale > 0.0) {
            return Err(QlabError::ProbeUnderflow { got: 0, needed: MIN_SAMPLES });
        }
        let mut sup_ball = 0.0f64;
        let mut inf_out = f64::INFINITY;
        let (mut sup_s, mut inf_s) = (0.0f64, f64::INFINITY);
        for &beta in inner.iter().chain(&outer[1..]) {
            let d = shell_image_distances(f, p, beta * r, scale);
            if d.len() < MIN_SAMPLES {
                return Err(QlabError::ProbeUnderflow { got: d.len(), needed: MIN_SAMPLES });
            }
            let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
            if beta <= 1.0 {
                sup_ball = sup_ball.max(hi);
            }
            if beta >= 1.0 {
                inf_out = inf_out.min(lo);
            }
            if beta == 1.0 {
                sup_s = hi;
                inf_s = lo;
            }
        }
        if !(inf_out > 0.0) {
            return Err(QlabError::ProbeUnderflow { got: 0, needed: MIN_SAMPLES });
        }
        ladder.push([sup_ball / inf_out, sup_s / inf_s, sup_ball / r, inf_out / r]);
    }
    let col = |c: usize| ladder.iter().map(|v| v[c]).collect::<Vec<_>>();
    Ok(DistortionReport {
        h: extrapolate(radii, &col(0)).max(1.0),
        h_eq: extrapolate(radii, &col(1)).max(1.0),
        lip_upper: extrapolate(radii, &col(2)),
        lip_lower: extrapolate(radii, &col(3)),
        radii: radii.to_vec(),
        samples_per_shell: unit_sphere().len(),
        ladder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact Carnot–Carathéodory distance from the origin: geodesics project to
    /// circular arcs, `ρ = 2a sin(φ/2)`, `z = a²(φ − sin φ)/2`, length `aφ`.
    fn cc_distance(q: Point) -> f64 {
        let rho = (q.x * q.x + q.y * q.y).sqrt();
        let z = q.z.abs();
        if z == 0.0 {
            return rho;
        }
        if rho == 0.0 {
            return (4.0 * std::f64::consts::PI * z).sqrt();
        }
        let target = z / (rho * rho);
        let ratio = |phi: f64| (phi - phi.sin()) / (8.0 * (0.5 * phi).sin().powi(2));
        let (mut lo, mut hi) = (1e-9, 2.0 * std::f64::consts::PI - 1e-12);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ratio(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let phi = 0.5 * (lo + hi);
        rho / (2.0 * (0.5 * phi).sin()) * phi
    }

    #[test]
    fn table_matches_cc_distance() {
        let t = probe_table();
        for &(x, y, z) in &[(1.0, 0.0, 0.0), (0.0, 0.0, 0.1), (0.6, -0.3, 0.12), (0.2, 0.1, -0.2), (1.3, 0.4, 0.5)] {
            let q = Point::new(x, y, z);
            let (d, exact) = (t.lookup(q).unwrap(), cc_distance(q));
            assert!((d - exact).abs() < 0.03 * exact, "{q:?}: {d} vs {exact}");
        }
    }

    #[test]
    fn probe_distance_is_left_invariant_and_homogeneous() {
        let p = Point::new(0.3, -0.2, 0.05);
        let q = Point::new(0.45, -0.1, 0.02);
        let d = probe_distance(p, q, 0.2).unwrap();
        let g = Point::new(-1.0, 2.0, 0.7);
        let dg = probe_distance(g.mul(p), g.mul(q), 0.2).unwrap();
        assert!((d - dg).abs() < 1e-9 * d);
        let dil = |a: Point| Point::new(2.0 * a.x, 2.0 * a.y, 4.0 * a.z);
        let d2 = probe_distance(dil(p), dil(q), 0.4).unwrap();
        assert!((d2 - 2.0 * d).abs() < 1e-9 * d);
    }

    #[test]
    fn graph_distance_examples() {
        let g = Grid::new(Point::new(-0.2, -0.5, -0.3), Point::new(1.2, 0.5, 0.3), [15, 11, 13]).unwrap();
        assert_eq!(dist_eps(Point::ORIGIN, Point::ORIGIN, 0.5, &g).unwrap(), 0.0);
        let d = dist_eps(Point::ORIGIN, Point::new(1.0, 0.0, 0.0), 0.1, &g).unwrap();
        assert!((d - 1.0).abs() < 0.05);
        assert!(dist_eps(Point::ORIGIN, Point::new(3.0, 0.0, 0.0), 0.1, &g).is_err());
        let pairs = [(Point::new(0.1, 0.2, -0.1), Point::new(0.9, -0.3, 0.2)), (Point::new(1.0, 0.4, 0.25), Point::ORIGIN)];
        for (p, q) in pairs {
            let a = dist_eps(p, q, 0.05, &g).unwrap();
            let b = dist_eps(p, q, 0.2, &g).unwrap();
            assert!(a >= b);
            assert!((dist_eps(q, p, 0.2, &g).unwrap() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_and_dilation_distortion() {
        let radii = [0.2, 0.1, 0.05];
        let id = pointwise_distortion(&|q| q, Point::new(0.3, 0.1, -0.2), &radii).unwrap();
        assert!((id.h - 1.0).abs() < 0.03 && (id.h_eq - 1.0).abs() < 0.03);
        assert!((id.lip_upper - 1.0).abs() < 0.03 && (id.lip_lower - 1.0).abs() < 0.03, "{id:?}");
        let dil = pointwise_distortion(&|q: Point| Point::new(2.0 * q.x, 2.0 * q.y, 4.0 * q.z), Point::new(0.1, 0.0, 0.0), &radii).unwrap();
        assert!((dil.lip_upper - 2.0).abs() < 0.1 && (dil.lip_lower - 2.0).abs() < 0.1, "{dil:?}");
        assert!((dil.h - 1.0).abs() < 0.05);
    }

    #[test]
    fn shear_distortion() {
        let radii = [0.2, 0.1, 0.05];
        let shear = |q: Point| Point::new(2.0 * q.x, q.y, 2.0 * q.z);
        let r = pointwise_distortion(&shear, Point::ORIGIN, &radii).unwrap();
        assert!((r.h - 2.0).abs() < 0.2 && (r.h_eq - 2.0).abs() < 0.2, "{r:?}");
        let inv = |q: Point| Point::new(0.5 * q.x, q.y, 0.5 * q.z);
        let ri = pointwise_distortion(&inv, Point::ORIGIN, &radii).unwrap();
        assert!((r.lip_lower * ri.lip_upper - 1.0).abs() < 0.05);
    }

    #[test]
    fn out_of_table_is_underflow() {
        let huge = |q: Point| Point::new(100.0 * q.x, 100.0 * q.y, 1e4 * q.z);
        assert!(matches!(pointwise_distortion(&huge, Point::ORIGIN, &[0.2, 0.1]), Err(QlabError::ProbeUnderflow { .. })));
    }
}
