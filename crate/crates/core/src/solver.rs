//! Dirichlet solvers for the sublaplacian (preconditioned conjugate gradients) and
//! the regularized p-Laplacian (limited-memory BFGS on the discrete energy), with
//! regularity monitors and (ε, δ) continuation.

use serde::{Deserialize, Serialize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::energy::{Discretization, OperatorParams, Quadrature};
use crate::error::{QlabError, Result};
use crate::grid::{apply_horizontal_derivative, BallShape, Mask, Neumaier, ScalarField};
use crate::heis::{gauge_distance, koranyi_gauge, Point, SubRiemannianMetric};

/// Regularization used when `p > 2` and `δ = 0` is requested.
pub const DELTA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Free nodes start from the values of the boundary field.
    Boundary,
    /// Free nodes start from uniform noise within the boundary data range.
    Random(u64),
    /// Free nodes start from the given field (warm start).
    Field(ScalarField),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Stopping threshold on the measure-weighted RMS of the weak residual.
    pub tol: f64,
    pub max_iter: usize,
    pub memory: usize,
    pub init: Init,
    /// Start nonlinear solves from the linear (p = 2) solution.
    pub linear_warm_start: bool,
    /// Quadrature of the p-Laplacian energy; monitors always use nodal quadrature.
    pub quadrature: Quadrature,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-9, max_iter: 20_000, memory: 10, init: Init::Boundary, linear_warm_start: true, quadrature: Quadrature::Nodal }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub final_energy: f64,
    pub lip_ratio: f64,
    pub caccioppoli_ratio: f64,
    pub holder_seminorm: f64,
    pub p_exp: f64,
    pub eps: f64,
    pub delta_requested: f64,
    pub delta_used: f64,
}

fn prepare(mask: &Mask, boundary: &ScalarField, metric: &SubRiemannianMetric, quadrature: Quadrature) -> Result<Discretization> {
    if boundary.grid != mask.grid {
        return Err(QlabError::GridMismatch("boundary data and mask live on different grids".into()));
    }
    if mask.count() == 0 {
        return Err(QlabError::EmptyMask);
    }
    let disc = Discretization::with_quadrature(mask, metric, quadrature)?;
    if !disc.free().iter().any(|&f| f) {
        return Err(QlabError::InvalidArgument("mask has no free nodes at this grid resolution".into()));
    }
    Ok(disc)
}

fn initial_values(disc: &Discretization, mask: &Mask, boundary: &ScalarField, init: &Init) -> Result<Vec<f64>> {
    let mut u = boundary.values.clone();
    match init {
        Init::Boundary => {}
        Init::Random(seed) => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (i, &v) in boundary.values.iter().enumerate() {
                if !disc.free()[i] && (mask.interior[i] || mask.boundary[i]) {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if !(hi > lo) {
                hi = lo + 1.0;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for (i, v) in u.iter_mut().enumerate() {
                if disc.free()[i] {
                    *v = rng.gen_range(lo..hi);
                }
            }
        }
        Init::Field(f) => {
            if f.grid != boundary.grid {
                return Err(QlabError::GridMismatch("initial field grid".into()));
            }
            for (i, v) in u.iter_mut().enumerate() {
                if disc.free()[i] {
                    *v = f.values[i];
                }
            }
        }
    }
    Ok(u)
}

fn dot_free(free: &[bool], a: &[f64], b: &[f64]) -> f64 {
    let mut acc = Neumaier::default();
    for i in 0..a.len() {
        if free[i] {
            acc.add(a[i] * b[i]);
        }
    }
    acc.sum()
}

/// Jacobi-preconditioned CG on the free nodes for the linear (p = 2) operator.
fn conjugate_gradient(disc: &Discretization, u: &mut [f64], eps: f64, (rel, abs): (f64, f64), max_iter: usize) -> Result<(usize, f64)> {
    let lin = OperatorParams { p_exp: 2.0, delta: 0.0, eps };
    let free = disc.free().to_vec();
    let n = u.len();
    let scaled = |g: &[f64]| -> f64 {
        let r: Vec<f64> = (0..n).map(|i| if free[i] { g[i] / disc.node_measure(i) } else { 0.0 }).collect();
        disc.residual_norm(&r)
    };
    let diag = disc.hessian_diagonal(u, &lin)?;
    let grad = disc.gradient(u, &lin)?;
    let mut r: Vec<f64> = (0..n).map(|i| if free[i] { -grad[i] } else { 0.0 }).collect();
    let res0 = scaled(&r);
    let target = (rel * res0).min(abs).max(1e-14);
    let mut res = res0;
    if res <= target {
        return Ok((0, res));
    }
    let precond = |r: &[f64]| -> Vec<f64> { (0..n).map(|i| if free[i] { r[i] / diag[i] } else { 0.0 }).collect() };
    let mut z = precond(&r);
    let mut d = z.clone();
    let mut rz = dot_free(&free, &r, &z);
    for it in 1..=max_iter {
        let kd = disc.gradient(&d, &lin)?;
        let dkd = dot_free(&free, &d, &kd);
        if !(dkd > 0.0) {
            return Err(QlabError::NonConvergence { iterations: it, residual: res });
        }
        let alpha = rz / dkd;
        for i in 0..n {
            if free[i] {
                u[i] += alpha * d[i];
                r[i] -= alpha * kd[i];
            }
        }
        res = scaled(&r);
        if res <= target {
            // Report the true residual, not the recursively updated one.
            let g = disc.gradient(u, &lin)?;
            return Ok((it, scaled(&g)));
        }
        z = precond(&r);
        let rz_new = dot_free(&free, &r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            d[i] = if free[i] { z[i] + beta * d[i] } else { 0.0 };
        }
    }
    Err(QlabError::NonConvergence { iterations: max_iter, residual: res })
}

/// Solves `Σ X_i^{h,*} ω g^{ij} X_j^h u = 0` on the free nodes with the values of
/// `boundary` prescribed elsewhere, until the weak residual drops below `1e-10`
/// (absolute and relative to the initial one).
pub fn solve_sublaplacian(mask: &Mask, boundary: &ScalarField, metric: &SubRiemannianMetric) -> Result<ScalarField> {
    solve_sublaplacian_with(mask, boundary, metric, 0.0, 1e-10, &Init::Boundary).map(|(u, _, _)| u)
}

/// As [`solve_sublaplacian`] for the `g_ε` operator with threshold `tol`;
/// returns `(u, iterations, residual)`.
pub fn solve_sublaplacian_with(
    mask: &Mask,
    boundary: &ScalarField,
    metric: &SubRiemannianMetric,
    eps: f64,
    tol: f64,
    init: &Init,
) -> Result<(ScalarField, usize, f64)> {
    let disc = prepare(mask, boundary, metric, Quadrature::Nodal)?;
    let mut u = initial_values(&disc, mask, boundary, init)?;
    let cap = 50 * (disc.nodes().len() as f64).cbrt() as usize + 2000;
    let (it, res) = conjugate_gradient(&disc, &mut u, eps, (tol, tol), cap)?;
    Ok((ScalarField { grid: boundary.grid.clone(), values: u }, it, res))
}

struct LineSearch {
    t: f64,
    evals: usize,
}

/// Finds `t` with `|φ'(t)| ≤ ½|φ'(0)|` and `φ(t) ≤ φ(0)`, using that `φ` is convex.
fn line_search(
    disc: &Discretization,
    params: &OperatorParams,
    u: &[f64],
    d: &[f64],
    phi0: f64,
    dphi0: f64,
    trial: &mut Vec<f64>,
) -> Option<LineSearch> {
    let free = disc.free();
    let eval = |t: f64, trial: &mut Vec<f64>| -> Option<(f64, f64)> {
        for i in 0..u.len() {
            trial[i] = if free[i] { u[i] + t * d[i] } else { u[i] };
        }
        let g = disc.gradient(trial, params).ok()?;
        let e = disc.energy(trial, params).ok()? / params.p_exp;
        Some((e, dot_free(free, &g, d)))
    };
    let (mut lo, mut hi) = ((0.0, dphi0), None::<(f64, f64)>);
    let mut t = 1.0;
    for evals in 1..=60 {
        let (phi, dphi) = eval(t, trial)?;
        if dphi.abs() <= 0.5 * dphi0.abs() && (dphi <= 0.0 || phi <= phi0) {
            return Some(LineSearch { t, evals });
        }
        if dphi < 0.0 {
            lo = (t, dphi);
        } else {
            hi = Some((t, dphi));
        }
        t = match hi {
            None => 2.0 * t,
            Some((th, dh)) => {
                let (tl, dl) = lo;
                let secant = tl - dl * (th - tl) / (dh - dl);
                let w = th - tl;
                if w <= 1e-14 * th.max(1e-300) {
                    return None;
                }
                secant.clamp(tl + 0.1 * w, th - 0.1 * w)
            }
        };
    }
    None
}

/// L-BFGS on the free nodes. Returns `(iterations, residual)`.
fn lbfgs(disc: &Discretization, u: &mut [f64], params: &OperatorParams, opts: &SolverOptions) -> Result<(usize, f64)> {
    let n = u.len();
    let free = disc.free().to_vec();
    let residual_of = |g: &[f64]| -> f64 {
        let r: Vec<f64> = (0..n).map(|i| if free[i] { g[i] / disc.node_measure(i) } else { 0.0 }).collect();
        disc.residual_norm(&r)
    };
    let mut g = disc.gradient(u, params)?;
    let mut res = residual_of(&g);
    let mut phi = disc.energy(u, params)? / params.p_exp;
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut trial = u.to_vec();
    let mut d = vec![0.0; n];
    for it in 0..opts.max_iter {
        if res <= opts.tol {
            return Ok((it, res));
        }
        let diag = disc.hessian_diagonal(u, params)?;
        let dmax = (0..n).filter(|&i| free[i]).fold(0.0f64, |m, i| m.max(diag[i]));
        let floor = 1e-12 * dmax.max(1e-300);
        // Two-loop recursion with a Jacobi initial inverse Hessian.
        let mut q: Vec<f64> = (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot_free(&free, s, &q);
            for i in 0..n {
                q[i] -= a * y[i];
            }
            alphas.push(a);
        }
        for i in 0..n {
            d[i] = if free[i] { q[i] / diag[i].max(floor) } else { 0.0 };
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot_free(&free, y, &d);
            for i in 0..n {
                d[i] += (a - b) * s[i];
            }
        }
        let mut dphi0 = dot_free(&free, &g, &d);
        if !(dphi0 < 0.0) {
            hist.clear();
            for i in 0..n {
                d[i] = if free[i] { -g[i] / diag[i].max(floor) } else { 0.0 };
            }
            dphi0 = dot_free(&free, &g, &d);
            if !(dphi0 < 0.0) {
                return Err(QlabError::LineSearchStall { iteration: it });
            }
        }
        let Some(ls) = line_search(disc, params, u, &d, phi, dphi0, &mut trial) else {
            if !hist.is_empty() {
                hist.clear();
                continue;
            }
            return Err(QlabError::LineSearchStall { iteration: it });
        };
        let _ = ls.evals;
        let g_new = disc.gradient(&trial, params)?;
        let s: Vec<f64> = (0..n).map(|i| if free[i] { ls.t * d[i] } else { 0.0 }).collect();
        let y: Vec<f64> = (0..n).map(|i| if free[i] { g_new[i] - g[i] } else { 0.0 }).collect();
        let sy = dot_free(&free, &s, &y);
        if sy > 1e-300 {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        u.copy_from_slice(&trial);
        g = g_new;
        phi = disc.energy(u, params)? / params.p_exp;
        res = residual_of(&g);
    }
    if res <= opts.tol {
        return Ok((opts.max_iter, res));
    }
    Err(QlabError::NonConvergence { iterations: opts.max_iter, residual: res })
}

fn effective(params: &OperatorParams) -> OperatorParams {
    let mut p = *params;
    if p.p_exp > 2.0 && p.delta == 0.0 {
        p.delta = DELTA_FLOOR;
    }
    p
}

/// Minimizes the discrete energy with the values of `boundary` prescribed off the
/// free nodes.
pub fn solve_plaplacian(
    mask: &Mask,
    boundary: &ScalarField,
    params: &OperatorParams,
    metric: &SubRiemannianMetric,
) -> Result<(ScalarField, SolveReport)> {
    solve_plaplacian_with(mask, boundary, params, metric, &SolverOptions::default())
}

pub fn solve_plaplacian_with(
    mask: &Mask,
    boundary: &ScalarField,
    params: &OperatorParams,
    metric: &SubRiemannianMetric,
    opts: &SolverOptions,
) -> Result<(ScalarField, SolveReport)> {
    solve_plaplacian_pinned(mask, boundary, None, params, metric, opts)
}

/// As [`solve_plaplacian_with`], additionally prescribing the boundary values on
/// the `pinned` nodes.
pub fn solve_plaplacian_pinned(
    mask: &Mask,
    boundary: &ScalarField,
    pinned: Option<&[bool]>,
    params: &OperatorParams,
    metric: &SubRiemannianMetric,
    opts: &SolverOptions,
) -> Result<(ScalarField, SolveReport)> {
    params.validate()?;
    let mut disc = prepare(mask, boundary, metric, opts.quadrature)?;
    if let Some(p) = pinned {
        if p.len() != boundary.grid.len() {
            return Err(QlabError::GridMismatch("pinned node set".into()));
        }
        disc.pin(p);
        if !disc.free().iter().any(|&f| f) {
            return Err(QlabError::InvalidArgument("no free nodes left after pinning".into()));
        }
    }
    let used = effective(params);
    let mut u = initial_values(&disc, mask, boundary, &opts.init)?;
    let mut iterations = 0;
    let cap = 50 * (disc.nodes().len() as f64).cbrt() as usize + 2000;
    if opts.linear_warm_start && used.p_exp > 2.0 && opts.init == Init::Boundary {
        iterations += conjugate_gradient(&disc, &mut u, used.eps, (1e-8, 1e-6), cap)?.0;
    }
    let (it, residual) = if used.p_exp == 2.0 {
        conjugate_gradient(&disc, &mut u, used.eps, (1e-12, opts.tol), cap)?
    } else {
        lbfgs(&disc, &mut u, &used, opts)?
    };
    iterations += it;
    let field = ScalarField { grid: boundary.grid.clone(), values: u };
    let energy = disc.energy(&field.values, &used)?;
    let mon = match opts.quadrature {
        Quadrature::Nodal => monitors(&field, mask, &used, &disc)?,
        Quadrature::Cell => monitors(&field, mask, &used, &Discretization::new(mask, metric)?)?,
    };
    Ok((
        field,
        SolveReport {
            iterations,
            final_residual: residual,
            final_energy: energy,
            lip_ratio: mon.lip_ratio,
            caccioppoli_ratio: mon.caccioppoli_ratio,
            holder_seminorm: mon.holder_seminorm,
            p_exp: used.p_exp,
            eps: used.eps,
            delta_requested: params.delta,
            delta_used: used.delta,
        },
    ))
}

/// Solves along a schedule of `(ε, δ)` pairs, warm-starting each stage from the
/// previous solution.
pub fn continuation_sweep(
    mask: &Mask,
    boundary: &ScalarField,
    schedule: &[(f64, f64)],
    params: &OperatorParams,
    metric: &SubRiemannianMetric,
    opts: &SolverOptions,
) -> Result<(ScalarField, Vec<SolveReport>)> {
    if schedule.is_empty() {
        return Err(QlabError::InvalidArgument("schedule must be nonempty".into()));
    }
    if schedule.windows(2).any(|w| w[1].0 > w[0].0 || w[1].1 > w[0].1) {
        return Err(QlabError::InvalidArgument("schedule must be monotone decreasing in eps and delta".into()));
    }
    let mut reports = Vec::with_capacity(schedule.len());
    let mut stage_opts = opts.clone();
    let mut last = None;
    for &(eps, delta) in schedule {
        let p = OperatorParams { eps, delta, ..*params };
        let (u, rep) = solve_plaplacian_with(mask, boundary, &p, metric, &stage_opts)?;
        reports.push(rep);
        stage_opts.init = Init::Field(u.clone());
        last = Some(u);
    }
    Ok((last.expect("nonempty schedule"), reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Monitors {
    pub lip_ratio: f64,
    pub caccioppoli_ratio: f64,
    pub holder_seminorm: f64,
}

fn ball_of(mask: &Mask) -> BallShape {
    if let Some(s) = mask.shape {
        return s;
    }
    let g = &mask.grid;
    let (mut c, mut k) = ([0.0; 3], 0.0);
    for i in mask.interior_nodes() {
        let p = g.point(i);
        c[0] += p.x;
        c[1] += p.y;
        c[2] += p.z;
        k += 1.0;
    }
    let center = Point::new(c[0] / k, c[1] / k, c[2] / k);
    let radius = mask
        .interior_nodes()
        .map(|i| gauge_distance(center, g.point(i)))
        .fold(0.0, f64::max);
    BallShape { center, radius }
}

/// Regularity monitors of a solution on the ball `B_R` underlying `mask`:
///
/// * `lip_ratio = sup_{B_{R/2}} (δ+|∇u|²)^{1/2} / (avg_{B_R} (δ+|∇u|²)^{p/2})^{1/p}`
/// * `caccioppoli_ratio = ∫ (δ+|∇u|²)^{(p−2)/2} Σ|X_iX_j u|² η² /
///   ((1 + ‖∇η‖²_∞ + ‖X3 η‖_∞) ∫_{supp η} (δ+|∇u|²)^{p/2})` with `η` a gauge cutoff,
///   1 on `B_{R/2}` and 0 outside `B_{3R/4}`
/// * `holder_seminorm = max |∇u(a) − ∇u(b)| / d(a,b)^{1/2}` over node pairs in `B_{R/2}`.
pub fn monitors(u: &ScalarField, mask: &Mask, params: &OperatorParams, disc: &Discretization) -> Result<Monitors> {
    let g = &u.grid;
    let ball = ball_of(mask);
    let r = ball.radius;
    let rho: Vec<f64> = disc
        .nodes()
        .iter()
        .map(|&i| koranyi_gauge(ball.center.inverse().mul(g.point(i))) / r)
        .collect();
    let s: Vec<f64> = disc.grad_sq(&u.values, params.eps).iter().map(|v| params.delta + v).collect();
    let w = disc.weights();
    let pe = params.p_exp;

    let (mut num, mut den) = (Neumaier::default(), Neumaier::default());
    let mut sup = 0.0f64;
    for k in 0..s.len() {
        num.add(w[k] * s[k].powf(0.5 * pe));
        den.add(w[k]);
        if rho[k] < 0.5 {
            sup = sup.max(s[k].sqrt());
        }
    }
    let avg = (num.sum() / den.sum()).powf(1.0 / pe);
    let lip_ratio = if avg > 0.0 { sup / avg } else { 0.0 };

    let eta = |t: f64| ((0.75 - t) / 0.25).clamp(0.0, 1.0);
    let eta_field = ScalarField::from_fn(g, |p| eta(koranyi_gauge(ball.center.inverse().mul(p)) / r));
    let mut d_eta = [0.0f64; 2];
    let de: Vec<ScalarField> = (1..=3).map(|i| apply_horizontal_derivative(&eta_field, i, 1.0)).collect::<Result<_>>()?;
    for (k, &i) in disc.nodes().iter().enumerate() {
        if rho[k] < 0.8 {
            let h2 = de[0].values[i].powi(2) + de[1].values[i].powi(2) + (params.eps * de[2].values[i]).powi(2);
            d_eta[0] = d_eta[0].max(h2);
            d_eta[1] = d_eta[1].max(de[2].values[i].abs());
        }
    }
    let first: Vec<ScalarField> = (1..=3).map(|i| apply_horizontal_derivative(u, i, params.eps)).collect::<Result<_>>()?;
    let mut second = Vec::with_capacity(9);
    for f in &first {
        for i in 1..=3 {
            second.push(apply_horizontal_derivative(f, i, params.eps)?);
        }
    }
    let (mut lhs, mut rhs) = (Neumaier::default(), Neumaier::default());
    for (k, &i) in disc.nodes().iter().enumerate() {
        let e = eta(rho[k]);
        if e > 0.0 {
            let hess: f64 = second.iter().map(|f| f.values[i].powi(2)).sum();
            lhs.add(w[k] * s[k].powf(0.5 * (pe - 2.0)) * hess * e * e);
            rhs.add(w[k] * s[k].powf(0.5 * pe));
        }
    }
    let rhs = (1.0 + d_eta[0] + d_eta[1]) * rhs.sum();
    let caccioppoli_ratio = if rhs > 0.0 { lhs.sum() / rhs } else { 0.0 };

    let grads = disc.orthonormal_gradients(&u.values, params.eps);
    let inner: Vec<usize> = (0..rho.len()).filter(|&k| rho[k] < 0.5).collect();
    let stride = inner.len().div_ceil(1500).max(1);
    let pick: Vec<usize> = inner.iter().copied().step_by(stride).collect();
    let mut holder = 0.0f64;
    for (a, &ka) in pick.iter().enumerate() {
        let pa = g.point(disc.nodes()[ka]);
        for &kb in &pick[a + 1..] {
            let d = gauge_distance(pa, g.point(disc.nodes()[kb]));
            let diff = (0..3).map(|c| (grads[ka][c] - grads[kb][c]).powi(2)).sum::<f64>().sqrt();
            holder = holder.max(diff / d.sqrt());
        }
    }
    Ok(Monitors { lip_ratio, caccioppoli_ratio, holder_seminorm: holder })
}
