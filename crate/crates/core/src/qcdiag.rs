//! Quasiconformality diagnostics for explicit maps of H¹: horizontal
//! differentials, Popp Jacobians, the battery of equivalent 1-quasiconformality
//! conditions, the morphism property, condenser capacity and ring modulus.

use std::str::FromStr;

use nalgebra::{Matrix2, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::coords::lift_vertical;
use crate::energy::{Discretization, OperatorParams, Quadrature};
use crate::error::{QlabError, Result};
use crate::grid::{gauge_ball_mask, BallShape, Grid, Mask, ScalarField};
use crate::heis::{frame_components, frame_at, koranyi_gauge, left_translation_differential, orthonormalize, popp_density, Point, SubRiemannianMetric, HOMOGENEOUS_DIM};
use crate::probe::pointwise_distortion;
use crate::solver::{solve_plaplacian_pinned, SolverOptions};

/// Explicit contact maps of H¹. `Compose` applies its members in listed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapSpec {
    Identity,
    LeftTranslation { g: Point },
    Dilation { lambda: f64 },
    Rotation { theta: f64 },
    /// `(x, y, z) ↦ (ax, by, abz)`
    Shear { a: f64, b: f64 },
    Compose { maps: Vec<MapSpec> },
}

impl MapSpec {
    pub fn apply(&self, p: Point) -> Point {
        match self {
            MapSpec::Identity => p,
            MapSpec::LeftTranslation { g } => g.mul(p),
            MapSpec::Dilation { lambda } => Point::new(lambda * p.x, lambda * p.y, lambda * lambda * p.z),
            MapSpec::Rotation { theta } => {
                let (s, c) = theta.sin_cos();
                Point::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z)
            }
            MapSpec::Shear { a, b } => Point::new(a * p.x, b * p.y, a * b * p.z),
            MapSpec::Compose { maps } => maps.iter().fold(p, |q, m| m.apply(q)),
        }
    }

    pub fn inverse(&self) -> MapSpec {
        match self {
            MapSpec::Identity => MapSpec::Identity,
            MapSpec::LeftTranslation { g } => MapSpec::LeftTranslation { g: g.inverse() },
            MapSpec::Dilation { lambda } => MapSpec::Dilation { lambda: 1.0 / lambda },
            MapSpec::Rotation { theta } => MapSpec::Rotation { theta: -theta },
            MapSpec::Shear { a, b } => MapSpec::Shear { a: 1.0 / a, b: 1.0 / b },
            MapSpec::Compose { maps } => MapSpec::Compose { maps: maps.iter().rev().map(MapSpec::inverse).collect() },
        }
    }

    /// Closed-form Jacobian matrix `Df(p)` in the coordinates `(x, y, z)`.
    pub fn differential(&self, p: Point) -> Matrix3<f64> {
        match self {
            MapSpec::Identity => Matrix3::identity(),
            MapSpec::LeftTranslation { g } => left_translation_differential(*g),
            MapSpec::Dilation { lambda } => Matrix3::from_diagonal(&Vector3::new(*lambda, *lambda, lambda * lambda)),
            MapSpec::Rotation { theta } => {
                let (s, c) = theta.sin_cos();
                Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
            }
            MapSpec::Shear { a, b } => Matrix3::from_diagonal(&Vector3::new(*a, *b, a * b)),
            MapSpec::Compose { maps } => {
                let mut q = p;
                let mut d = Matrix3::identity();
                for m in maps {
                    d = m.differential(q) * d;
                    q = m.apply(q);
                }
                d
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MapSpec::Dilation { lambda } if !(*lambda > 0.0) => Err(QlabError::NonPositiveDilation(*lambda)),
            MapSpec::Shear { a, b } if !(a.abs() > 0.0 && b.abs() > 0.0) || !(a * b).is_finite() => {
                Err(QlabError::InvalidArgument("shear factors must be nonzero".into()))
            }
            MapSpec::Compose { maps } => maps.iter().try_for_each(MapSpec::validate),
            _ => Ok(()),
        }?;
        for p in [Point::ORIGIN, Point::new(0.7, -0.4, 0.3), Point::new(-1.2, 0.9, -0.5)] {
            frame_push_forward(self, p)?;
        }
        Ok(())
    }
}

impl FromStr for MapSpec {
    type Err = QlabError;

    /// Parses `identity`, `translate:x,y,z`, `dilation:λ`, `rotation:θ`,
    /// `shear:a,b` and compositions joined by `+`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('+').map(str::trim).collect();
        if parts.len() > 1 {
            let maps = parts.iter().map(|p| p.parse()).collect::<Result<Vec<MapSpec>>>()?;
            return Ok(MapSpec::Compose { maps });
        }
        let (kind, args) = s.split_once(':').unwrap_or((s, ""));
        let nums: Vec<f64> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| a.trim().parse::<f64>().map_err(|_| QlabError::InvalidArgument(format!("bad number `{a}` in map `{s}`"))))
                .collect::<Result<_>>()?
        };
        let want = |n: usize| {
            if nums.len() == n {
                Ok(())
            } else {
                Err(QlabError::InvalidArgument(format!("map `{kind}` takes {n} argument(s)")))
            }
        };
        let m = match kind.trim() {
            "identity" => {
                want(0)?;
                MapSpec::Identity
            }
            "translate" | "left_translation" => {
                want(3)?;
                MapSpec::LeftTranslation { g: Point::new(nums[0], nums[1], nums[2]) }
            }
            "dilation" => {
                want(1)?;
                MapSpec::Dilation { lambda: nums[0] }
            }
            "rotation" => {
                want(1)?;
                MapSpec::Rotation { theta: nums[0] }
            }
            "shear" => {
                want(2)?;
                MapSpec::Shear { a: nums[0], b: nums[1] }
            }
            other => return Err(QlabError::InvalidArgument(format!("unknown map kind `{other}`"))),
        };
        m.validate()?;
        Ok(m)
    }
}

/// Frame components of `Df(p) X_j(p)` in the frame at `f(p)`, columns `j = 1, 2`;
/// fails if a push-forward leaves the horizontal plane.
fn frame_push_forward(map: &MapSpec, p: Point) -> Result<Matrix2<f64>> {
    push_forward_block(&map.differential(p), p, map.apply(p))
}

fn push_forward_block(d: &Matrix3<f64>, p: Point, fp: Point) -> Result<Matrix2<f64>> {
    let fr = frame_at(p, 1.0);
    let mut out = Matrix2::zeros();
    for (j, v) in [fr.v1, fr.v2].iter().enumerate() {
        let c = frame_components(fp, &(d * Vector3::from(*v)));
        let scale = c.norm().max(1.0);
        if c[2].abs() > 1e-8 * scale {
            return Err(QlabError::ContactViolation(c[2]));
        }
        out[(0, j)] = c[0];
        out[(1, j)] = c[1];
    }
    Ok(out)
}

/// `(d_H f)_p` in `g`-orthonormal frames at `p` and `f(p)`.
pub fn horizontal_differential(map: &MapSpec, p: Point, metric: &SubRiemannianMetric) -> Result<Matrix2<f64>> {
    let push = frame_push_forward(map, p)?;
    let a_p = orthonormalize(metric, p)?;
    let a_fp = orthonormalize(metric, map.apply(p))?;
    let inv = a_fp.try_inverse().ok_or(QlabError::MetricDegenerate { x: p.x, y: p.y, z: p.z })?;
    Ok(inv.transpose() * push * a_p.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub is_similarity: bool,
    /// `|det m|^{1/2}`.
    pub factor: f64,
    /// `σ_max / σ_min`.
    pub ratio: f64,
}

/// Whether `mᵀm` is a multiple of the identity: `σ_max/σ_min ≤ 1 + tol`.
pub fn similarity_test(m: &Matrix2<f64>, tol: f64) -> Similarity {
    let sv = m.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    let ratio = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    Similarity { is_similarity: ratio - 1.0 <= tol, factor: m.determinant().abs().sqrt(), ratio }
}

/// `|det Df(p)| · popp(f(p)) / popp(p)`.
pub fn jacobian_popp(map: &MapSpec, p: Point, metric: &SubRiemannianMetric) -> Result<f64> {
    let fp = map.apply(p);
    Ok(map.differential(p).determinant().abs() * popp_density(metric, fp)? / popp_density(metric, p)?)
}

/// One line of a [`ConditionBatteryReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub name: String,
    pub value: f64,
    pub reference: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionBatteryReport {
    pub map: MapSpec,
    pub samples: Vec<Point>,
    /// Similarity factor of `d_H f` at each sample.
    pub factor: Vec<f64>,
    pub conditions: Vec<ConditionRecord>,
    pub all_pass: bool,
}

impl ConditionBatteryReport {
    pub fn get(&self, name: &str) -> Option<&ConditionRecord> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

const PROBE_RADII: [f64; 3] = [0.2, 0.1, 0.05];

fn rel_err(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

fn region_shape(region: &Mask) -> Result<BallShape> {
    region.shape.ok_or_else(|| QlabError::InvalidArgument("region must be a gauge ball mask".into()))
}

/// Grid covering `map(region)`: the bounding box of the mapped interior and shell nodes, padded by three cells.
/// Interior nodes are those whose preimage lies in the region's gauge ball.
pub fn image_region(map: &MapSpec, region: &Mask) -> Result<Mask> {
    image_region_refined(map, region, 1)
}

/// [`image_region`] with node spacing divided by `refine`.
pub fn image_region_refined(map: &MapSpec, region: &Mask, refine: usize) -> Result<Mask> {
    if refine == 0 {
        return Err(QlabError::InvalidArgument("refine must be positive".into()));
    }
    let shape = region_shape(region)?;
    let g = &region.grid;
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for i in (0..g.len()).filter(|&i| region.interior[i] || region.boundary[i]) {
        let q = map.apply(g.point(i));
        for (a, v) in [q.x, q.y, q.z].into_iter().enumerate() {
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    if !lo[0].is_finite() {
        return Err(QlabError::EmptyMask);
    }
    // Node counts: at least the region's, and fine enough that an image cell pulls
    // back into at most one region cell along every axis.
    let m = map.inverse().differential(map.apply(shape.center));
    let h = g.h();
    let href: Vec<f64> = (0..3).map(|a| (0..3).map(|b| h[b] / m[(b, a)].abs()).fold(f64::INFINITY, f64::min)).collect();
    let mut n = g.n;
    for a in 0..3 {
        let w = (hi[a] - lo[a]).max(1e-9);
        n[a] = n[a].max((w / href[a]).ceil() as usize + 7);
        n[a] = refine * (n[a] - 1) + 1;
    }
    let pad: Vec<f64> = (0..3).map(|a| 3.0 * (hi[a] - lo[a]).max(1e-9) / (n[a] as f64 - 7.0)).collect();
    let grid = Grid::new(
        Point::new(lo[0] - pad[0], lo[1] - pad[1], lo[2] - pad[2]),
        Point::new(hi[0] + pad[0], hi[1] + pad[1], hi[2] + pad[2]),
        n,
    )?;
    let inv = map.inverse();
    let interior: Vec<bool> = (0..grid.len()).map(|i| !grid.on_face(i) && shape.contains(inv.apply(grid.point(i)))).collect();
    if !interior.iter().any(|&b| b) {
        return Err(QlabError::EmptyMask);
    }
    let mut m = Mask::from_interior(&grid, interior);
    m.shape = None;
    Ok(m)
}

/// Smooth cutoff `(1 − N⁴/r⁴)³₊` of the gauge ball; `N⁴` is a polynomial.
fn bump(shape: &BallShape, p: Point) -> f64 {
    let q = shape.center.inverse().mul(p);
    let n4 = (q.x * q.x + q.y * q.y).powi(2) + 16.0 * q.z * q.z;
    (1.0 - n4 / shape.radius.powi(4)).max(0.0).powi(3)
}

/// Fixed smooth test fields used by the (EP) and (LP) checks.
pub fn test_field(k: usize, p: Point) -> f64 {
    match k % 3 {
        0 => p.x + 0.3 * p.y * p.y,
        1 => p.x.sin() * p.y.cos() + p.z,
        _ => (0.4 * p.x).exp() + 0.5 * p.x * p.y,
    }
}

/// Test field `k` cut off on `map(region)`, as a field on the image grid and as
/// its exact pull-back on the region grid.
fn test_pair(map: &MapSpec, shape: &BallShape, k: usize, region: &Mask, image: &Mask) -> (ScalarField, ScalarField) {
    let inv = map.inverse();
    let target = ScalarField::from_fn(&image.grid, |y| bump(shape, inv.apply(y)) * test_field(k, y));
    let source = ScalarField::from_fn(&region.grid, |x| bump(shape, x) * test_field(k, map.apply(x)));
    (target, source)
}

/// Sample points: the region centre and `c · δ_{r/2}(±e_x)`.
fn battery_samples(shape: &BallShape) -> Vec<Point> {
    let h = 0.5 * shape.radius;
    vec![shape.center, shape.center.mul(Point::new(h, 0.0, 0.0)), shape.center.mul(Point::new(-h, 0.0, 0.0))]
}

/// Runs the equivalent 1-quasiconformality conditions on `map` over `region`.
pub fn condition_battery(
    map: &MapSpec,
    region: &Mask,
    params: &OperatorParams,
    metric: &SubRiemannianMetric,
    tol: f64,
) -> Result<ConditionBatteryReport> {
    params.validate()?;
    map.validate()?;
    let shape = region_shape(region)?;
    let samples = battery_samples(&shape);
    let f = |q: Point| map.apply(q);
    let mut h = 0.0f64;
    let mut h_eq = 0.0f64;
    let mut lip = 0.0f64;
    let mut sim_ratio = 1.0f64;
    let mut jp_err = 0.0f64;
    let (mut jp_value, mut jp_ref) = (f64::NAN, f64::NAN);
    let mut factor = Vec::with_capacity(samples.len());
    for &p in &samples {
        let d = pointwise_distortion(&f, p, &PROBE_RADII)?;
        h = h.max(d.h);
        h_eq = h_eq.max(d.h_eq);
        lip = lip.max(d.lip_upper / d.lip_lower);
        let m = horizontal_differential(map, p, metric)?;
        let sim = similarity_test(&m, tol);
        sim_ratio = sim_ratio.max(sim.ratio);
        factor.push(sim.factor);
        let j = jacobian_popp(map, p, metric)?;
        let big_l = m.singular_values().max().powf(HOMOGENEOUS_DIM);
        let e = (j - big_l).abs() / j;
        if !(e <= jp_err) || jp_value.is_nan() {
            jp_err = e;
            jp_value = j;
            jp_ref = big_l;
        }
    }

    let image = image_region(map, region)?;
    let mut ep = 0.0f64;
    let mut lp = 0.0f64;
    let fields: Vec<_> = (0..3).map(|k| test_pair(map, &shape, k, region, &image)).collect();
    let disc_t = Discretization::new(&image, metric)?;
    let disc_s = Discretization::new(region, metric)?;
    for k in 0..3 {
        let (vt, vs) = &fields[k];
        let (wt, ws) = &fields[(k + 1) % 3];
        ep = ep.max(rel_err(disc_t.energy(&vt.values, params)?, disc_s.energy(&vs.values, params)?));
        lp = lp.max(rel_err(disc_t.pairing(&vt.values, &wt.values, params)?, disc_s.pairing(&vs.values, &ws.values, params)?));
    }

    let rec = |name: &str, value: f64, reference: f64, pass: bool| ConditionRecord { name: name.into(), value, reference, tol, pass };
    let sim_pass = sim_ratio - 1.0 <= tol;
    let conditions = vec![
        rec("H", h, 1.0, h - 1.0 <= tol),
        rec("H=", h_eq, 1.0, h_eq - 1.0 <= tol),
        rec("HS", sim_ratio, 1.0, sim_pass),
        rec("S", sim_ratio, 1.0, sim_pass),
        rec("L", lip, 1.0, lip - 1.0 <= tol),
        rec("JP", jp_value, jp_ref, jp_err <= tol),
        rec("EP", ep, 0.0, ep <= tol),
        rec("LP", lp, 0.0, lp <= tol),
    ];
    let all_pass = conditions.iter().all(|c| c.pass);
    Ok(ConditionBatteryReport { map: map.clone(), samples, factor, conditions, all_pass })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorphismCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub rel_err: f64,
}

/// Compares `I_Q(v, φ)` over `map(region)` with `I_Q(v∘f, φ∘f)` over `region`.
/// `v` and `φ` share a grid covering the image; the pull-backs sample them
/// trilinearly at the mapped nodes.
pub fn morphism_check(
    map: &MapSpec,
    v: &ScalarField,
    phi: &ScalarField,
    region: &Mask,
    params: &OperatorParams,
    metric: &SubRiemannianMetric,
) -> Result<MorphismCheck> {
    params.validate()?;
    if v.grid != phi.grid {
        return Err(QlabError::GridMismatch("v and phi live on different grids".into()));
    }
    let shape = region_shape(region)?;
    let grid = &v.grid;
    let inv = map.inverse();
    let interior: Vec<bool> = (0..grid.len()).map(|i| !grid.on_face(i) && shape.contains(inv.apply(grid.point(i)))).collect();
    if !interior.iter().any(|&b| b) {
        return Err(QlabError::EmptyMask);
    }
    let image = Mask::from_interior(grid, interior);
    let lhs = Discretization::new(&image, metric)?.pairing(&v.values, &phi.values, params)?;
    let rg = &region.grid;
    let pull = |w: &ScalarField| -> Result<ScalarField> {
        let mut vals = vec![0.0; rg.len()];
        for i in (0..rg.len()).filter(|&i| region.interior[i] || region.boundary[i]) {
            let q = map.apply(rg.point(i));
            vals[i] = w.sample(q).ok_or_else(|| QlabError::OutOfDomain(format!("image point {q:?} outside the field grid")))?;
        }
        ScalarField::new(rg.clone(), vals)
    };
    let rhs = Discretization::new(region, metric)?.pairing(&pull(v)?.values, &pull(phi)?.values, params)?;
    Ok(MorphismCheck { lhs, rhs, rel_err: rel_err(lhs, rhs) })
}

/// The fixed test field `k`, cut off to `map(region)`, on the grid of
/// [`image_region_refined`].
pub fn image_test_field(map: &MapSpec, region: &Mask, k: usize, refine: usize) -> Result<ScalarField> {
    let shape = region_shape(region)?;
    let image = image_region_refined(map, region, refine)?;
    Ok(test_pair(map, &shape, k, region, &image).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub capacity: f64,
    pub iterations: usize,
    pub final_residual: f64,
    pub min_value: f64,
    pub max_value: f64,
    /// Potential stays in `[0, 1]` up to `1e-6`.
    pub within_bounds: bool,
}

/// Minimal discrete Q-energy over potentials equal to 1 on `e`, 0 on `f` and on
/// the shell of `domain`. Returns the minimiser with the report.
pub fn capacity_with(
    e: &Mask,
    f: &Mask,
    domain: &Mask,
    params: &OperatorParams,
    metric: &SubRiemannianMetric,
    opts: &SolverOptions,
) -> Result<(ScalarField, CapacityReport)> {
    let grid = &domain.grid;
    if e.grid != *grid || f.grid != *grid {
        return Err(QlabError::GridMismatch("condenser masks live on different grids".into()));
    }
    if e.count() == 0 || f.count() == 0 {
        return Err(QlabError::EmptyMask);
    }
    if (0..grid.len()).any(|i| e.interior[i] && f.interior[i]) {
        return Err(QlabError::MasksOverlap);
    }
    if e.interior_nodes().any(|i| grid.neighbors6(i).any(|j| f.interior[j])) {
        return Err(QlabError::DegenerateCondenser);
    }
    let boundary = ScalarField::new(grid.clone(), e.interior.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?;
    let pinned: Vec<bool> = (0..grid.len()).map(|i| e.interior[i] || f.interior[i]).collect();
    let (u, rep) = solve_plaplacian_pinned(domain, &boundary, Some(&pinned), params, metric, opts)?;
    let (lo, hi) = domain.interior_nodes().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), i| (a.min(u.values[i]), b.max(u.values[i])));
    let report = CapacityReport {
        capacity: rep.final_energy,
        iterations: rep.iterations,
        final_residual: rep.final_residual,
        min_value: lo,
        max_value: hi,
        within_bounds: lo >= -1e-6 && hi <= 1.0 + 1e-6,
    };
    Ok((u, report))
}

/// Solver settings for condenser problems: cell quadrature, residual `1e-8`.
pub fn capacity_options() -> SolverOptions {
    SolverOptions { tol: 1e-8, quadrature: Quadrature::Cell, ..SolverOptions::default() }
}

/// Q-capacity of the condenser `(e, f)` inside `domain`.
pub fn capacity(e: &Mask, f: &Mask, domain: &Mask, params: &OperatorParams, metric: &SubRiemannianMetric) -> Result<f64> {
    let opts = capacity_options();
    Ok(capacity_with(e, f, domain, params, metric, &opts)?.1.capacity)
}

/// Korányi ring condenser around `center`: `E ≈ {N < r}`, `F ≈ {R ≤ N < 1.15R}`
/// inside the domain ball of radius `1.15R`, on a grid of `n` nodes per axis.
/// The plates take the nodes lying within half a grid step (along some axis) of
/// the continuous sets, so that the staircase boundaries are not biased inwards.
/// Fails with `DegenerateCondenser` when the plates share a node.
pub fn ring_condenser(center: Point, r: f64, big_r: f64, n: usize) -> Result<(Mask, Mask, Mask)> {
    if !(r > 0.0 && big_r > r) {
        return Err(QlabError::InvalidArgument(format!("ring needs 0 < r < R, got r = {r}, R = {big_r}")));
    }
    let outer = 1.15 * big_r;
    let grid = ball_grid(center, outer, n)?;
    let domain = gauge_ball_mask(center, outer, &grid)?;
    let inv = center.inverse();
    let h = grid.h();
    let near = |p: Point, inside: &dyn Fn(f64) -> bool| {
        if inside(koranyi_gauge(inv.mul(p))) {
            return true;
        }
        (0..3).any(|a| {
            [-0.5, 0.5].iter().any(|s| {
                let mut q = [p.x, p.y, p.z];
                q[a] += s * h[a];
                inside(koranyi_gauge(inv.mul(Point::new(q[0], q[1], q[2]))))
            })
        })
    };
    let e_int: Vec<bool> = (0..grid.len()).map(|i| domain.interior[i] && near(grid.point(i), &|nv| nv < r)).collect();
    let f_int: Vec<bool> = (0..grid.len()).map(|i| domain.interior[i] && near(grid.point(i), &|nv| nv >= big_r)).collect();
    // Plates meeting at this resolution leave no gap to carry the potential.
    if e_int.iter().zip(&f_int).any(|(a, b)| *a && *b) {
        return Err(QlabError::DegenerateCondenser);
    }
    let mut e = Mask::from_interior(&grid, e_int);
    e.shape = Some(BallShape { center, radius: r });
    let f = Mask::from_interior(&grid, f_int);
    Ok((e, f, domain))
}

/// Box around the bounding box of a gauge ball, widened so that the ball keeps a
/// two-node margin with `n` nodes per axis.
pub fn ball_grid(center: Point, radius: f64, n: usize) -> Result<Grid> {
    if n < 8 {
        return Err(QlabError::InvalidArgument("grid needs at least 8 nodes per axis".into()));
    }
    let (lo, hi) = BallShape { center, radius }.bounding_box();
    let s = 1.01 / (1.0 - 4.0 / (n as f64 - 1.0));
    let mid = [0.5 * (lo.x + hi.x), 0.5 * (lo.y + hi.y), 0.5 * (lo.z + hi.z)];
    let half = [0.5 * (hi.x - lo.x) * s, 0.5 * (hi.y - lo.y) * s, 0.5 * (hi.z - lo.z) * s];
    Grid::cube(
        Point::new(mid[0] - half[0], mid[1] - half[1], mid[2] - half[2]),
        Point::new(mid[0] + half[0], mid[1] + half[1], mid[2] + half[2]),
        n,
    )
}

/// Grid resolution used by [`modulus_ring`].
pub const MODULUS_GRID: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulusReport {
    pub r: f64,
    #[serde(rename = "R")]
    pub big_r: f64,
    pub n: usize,
    pub modulus: f64,
    pub capacity: CapacityReport,
    /// `min ∫_γ ρ ds` over the sampled horizontal curves from `E` to `F`.
    pub certificate_min: f64,
    pub curves: usize,
    pub admissible: bool,
}

/// Horizontal curves leaving the inner plate: planar lines in 8 directions at
/// offsets `{0, 0.3r}` from the centre and heights `{0, ±0.1r²}`, lifted, and
/// followed until the gauge reaches `1.1R`.
fn certificate_curves(center: Point, r: f64, big_r: f64) -> Vec<Vec<Point>> {
    let stop = 1.1 * big_r;
    let ds = big_r / 400.0;
    let mut out = Vec::new();
    for k in 0..8 {
        let phi = 0.1 + k as f64 * std::f64::consts::FRAC_PI_4;
        let (s, c) = phi.sin_cos();
        for b in [0.0, 0.3 * r] {
            for z0 in [-0.1 * r * r, 0.0, 0.1 * r * r] {
                let start = (-b * s, b * c);
                let mut curve = vec![Point::new(start.0, start.1, z0)];
                let mut t = 0.0;
                while koranyi_gauge(*curve.last().expect("nonempty")) < stop && t < 4.0 * big_r {
                    let prev = *curve.last().expect("nonempty");
                    t += ds;
                    let next = (start.0 + t * c, start.1 + t * s);
                    curve.push(lift_vertical(&[(prev.x, prev.y), next], prev.z)[1]);
                }
                out.push(curve.into_iter().map(|q| center.mul(q)).collect());
            }
        }
    }
    out
}

/// Modulus of the Korányi ring curve family through the condenser capacity, with
/// the admissibility of `ρ = |∇_H u|` checked on sampled horizontal curves.
pub fn modulus_ring_report(r: f64, big_r: f64, params: &OperatorParams, metric: &SubRiemannianMetric, n: usize) -> Result<ModulusReport> {
    let (e, f, domain) = ring_condenser(Point::ORIGIN, r, big_r, n)?;
    let (u, cap) = capacity_with(&e, &f, &domain, params, metric, &capacity_options())?;
    let nodal = Discretization::new(&domain, metric)?;
    let sq = nodal.grad_sq(&u.values, 0.0);
    let mut rho = ScalarField::zeros(&domain.grid);
    for (k, &i) in nodal.nodes().iter().enumerate() {
        rho.values[i] = sq[k].sqrt();
    }
    let curves = certificate_curves(Point::ORIGIN, r, big_r);
    let mut cert = f64::INFINITY;
    for c in &curves {
        let mut acc = 0.0;
        for w in c.windows(2) {
            let (a, b) = (w[0], w[1]);
            let mid = Point::new(0.5 * (a.x + b.x), 0.5 * (a.y + b.y), 0.5 * (a.z + b.z));
            let g = metric.g(mid);
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let ds = (g[(0, 0)] * dx * dx + 2.0 * g[(0, 1)] * dx * dy + g[(1, 1)] * dy * dy).max(0.0).sqrt();
            let ra = rho.sample(a).ok_or_else(|| QlabError::OutOfDomain("certificate curve leaves the grid".into()))?;
            let rb = rho.sample(b).ok_or_else(|| QlabError::OutOfDomain("certificate curve leaves the grid".into()))?;
            acc += 0.5 * (ra + rb) * ds;
        }
        cert = cert.min(acc);
    }
    Ok(ModulusReport {
        r,
        big_r,
        n,
        modulus: cap.capacity,
        capacity: cap,
        certificate_min: cert,
        curves: curves.len(),
        admissible: cert >= 0.95,
    })
}

/// Modulus of the ring `{r < N < R}`; fails with `Inadmissible` when the extremal
/// density does not pass the curve certificate.
pub fn modulus_ring(r: f64, big_r: f64, params: &OperatorParams, metric: &SubRiemannianMetric) -> Result<f64> {
    let rep = modulus_ring_report(r, big_r, params, metric, MODULUS_GRID)?;
    if !rep.admissible {
        return Err(QlabError::Inadmissible(rep.certificate_min));
    }
    Ok(rep.modulus)
}
