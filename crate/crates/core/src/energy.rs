//! Discrete Q-energy, the pairing `I_Q`, the regularized flux `A^{ε,δ}` and a
//! numerical check of its structure conditions.
//!
//! The discrete operator is the gradient of `J(u) = E(u)/p`, so critical points of
//! the energy are exactly the discrete weak solutions.

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QlabError, Result};
use crate::grid::{for_each_axis_entry, Grid, Mask, Neumaier, ScalarField};
use crate::heis::{Point, SubRiemannianMetric, HOMOGENEOUS_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorParams {
    pub p_exp: f64,
    pub delta: f64,
    pub eps: f64,
}

impl Default for OperatorParams {
    fn default() -> Self {
        OperatorParams { p_exp: HOMOGENEOUS_DIM, delta: 0.0, eps: 0.0 }
    }
}

impl OperatorParams {
    pub fn new(p_exp: f64, delta: f64, eps: f64) -> Result<Self> {
        let p = OperatorParams { p_exp, delta, eps };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_exp >= 2.0) || !self.p_exp.is_finite() {
            return Err(QlabError::InvalidArgument(format!("p_exp must be >= 2, got {}", self.p_exp)));
        }
        if !(self.delta >= 0.0) || !(self.eps >= 0.0) || !self.delta.is_finite() || !self.eps.is_finite() {
            return Err(QlabError::InvalidArgument("delta and eps must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// `s^e` with the conventions `s^0 = 1` and `0^e = 0` for `e > 0`.
#[inline]
fn spow(s: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else if s <= 0.0 {
        0.0
    } else if e == 1.0 {
        s
    } else {
        s.powf(e)
    }
}

#[inline]
fn packed(gi: &Matrix2<f64>) -> [f64; 3] {
    [gi[(0, 0)], gi[(0, 1)], gi[(1, 1)]]
}

/// `(g̃^{-1} ξ, ξᵀ g̃^{-1} ξ)` where the third frame direction is unit.
#[inline]
fn raise(gi: &[f64; 3], xi: [f64; 3]) -> ([f64; 3], f64) {
    let v = [gi[0] * xi[0] + gi[1] * xi[1], gi[1] * xi[0] + gi[2] * xi[1], xi[2]];
    (v, v[0] * xi[0] + v[1] * xi[1] + v[2] * xi[2])
}

fn omega_at(metric: &SubRiemannianMetric, x: Point) -> Result<f64> {
    let w = metric.omega(x);
    if w > 0.0 && w.is_finite() {
        Ok(w)
    } else {
        Err(QlabError::MeasureDegenerate)
    }
}

/// `A(x, ξ) = ω (δ + |ξ|²_{g_ε})^{(p−2)/2} g_ε^{-1} ξ` in frame components
/// `(X1, X2, εX3)`; with `ε = 0` the third component of `ξ` is ignored.
pub fn flux_a(x: Point, xi: &Vector3<f64>, params: &OperatorParams, metric: &SubRiemannianMetric) -> Result<Vector3<f64>> {
    let gi = packed(&metric.g_inverse(x)?);
    let w = omega_at(metric, x)?;
    let x3 = if params.eps > 0.0 { xi[2] } else { 0.0 };
    let (v, s) = raise(&gi, [xi[0], xi[1], x3]);
    let f = w * spow(params.delta + s, 0.5 * (params.p_exp - 2.0));
    Ok(Vector3::new(f * v[0], f * v[1], f * v[2]))
}

/// Estimated ellipticity and growth constants of the flux.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureCheck {
    /// `min ∂_ξA χ·χ / ((δ+|ξ|²)^{(p−2)/2}|χ|²)` over samples.
    pub lambda_est: f64,
    /// `max` of the same ratio.
    #[serde(rename = "Lambda_est")]
    pub upper_est: f64,
    /// `max |∂_x A| / (δ+|ξ|²)^{(p−1)/2}`.
    pub x_derivative_est: f64,
    pub pass: bool,
}

/// Samples `x ∈ [−1,1]³`, `ξ ∈ [−3,3]³` (plus `ξ = 0`) and estimates the structure
/// constants of [`flux_a`] by central differences.
pub fn structure_bounds_check(
    params: &OperatorParams,
    metric: &SubRiemannianMetric,
    samples: usize,
    seed: u64,
) -> Result<StructureCheck> {
    params.validate()?;
    if samples == 0 {
        return Err(QlabError::InvalidArgument("samples must be >= 1".into()));
    }
    let dims = if params.eps > 0.0 { 3 } else { 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lo, mut hi, mut dx) = (f64::INFINITY, 0.0f64, 0.0f64);
    for k in 0..samples {
        let x = Point::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let mut xi = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        if k == 0 && params.delta > 0.0 {
            xi = Vector3::zeros();
        }
        if dims == 2 {
            xi[2] = 0.0;
        }
        let gi = packed(&metric.g_inverse(x)?);
        let (_, s) = raise(&gi, [xi[0], xi[1], xi[2]]);
        let s = params.delta + s;
        if s <= 0.0 {
            continue;
        }
        let step = 1e-5 * (1.0 + xi.norm());
        let mut jac = Matrix3::zeros();
        for j in 0..dims {
            let mut e = Vector3::zeros();
            e[j] = step;
            let d = (flux_a(x, &(xi + e), params, metric)? - flux_a(x, &(xi - e), params, metric)?) / (2.0 * step);
            jac.set_column(j, &d);
        }
        let sym = (jac + jac.transpose()) * 0.5;
        let block = sym.view((0, 0), (dims, dims)).clone_owned();
        let eig = SymmetricEigen::new(block).eigenvalues;
        let norm = spow(s, 0.5 * (params.p_exp - 2.0));
        for &ev in eig.iter() {
            lo = lo.min(ev / norm);
            hi = hi.max(ev / norm);
        }
        let hx = 1e-5;
        let mut dxa = Matrix3::zeros();
        for j in 0..3 {
            let mut e = Vector3::zeros();
            e[j] = hx;
            let xp = Point::from_vector(&(x.to_vector() + e));
            let xm = Point::from_vector(&(x.to_vector() - e));
            let d = (flux_a(xp, &xi, params, metric)? - flux_a(xm, &xi, params, metric)?) / (2.0 * hx);
            dxa.set_column(j, &d);
        }
        dx = dx.max(dxa.norm() / spow(s, 0.5 * (params.p_exp - 1.0)));
    }
    let pass = lo.is_finite() && lo > 0.0 && hi >= lo && dx.is_finite();
    Ok(StructureCheck { lambda_est: lo, upper_est: hi, x_derivative_est: dx, pass })
}

/// Where the energy density is sampled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// Interior grid nodes with centred differences.
    #[default]
    Nodal,
    /// 2×2×2 Gauss points of every cell touching the interior, with the gradient
    /// of the trilinear interpolant. Free of the odd/even decoupling of centred
    /// differences, at eight times the cost.
    Cell,
}

#[derive(Debug, Clone)]
enum Stencils {
    Nodal { start: Vec<usize>, entries: Vec<(usize, u8, f64)> },
    /// Base corner of the cell and Gauss point index per quadrature point.
    Cell { base: Vec<usize>, gp: Vec<u8>, corner: [usize; 8], coef: Box<[[[f64; 8]; 3]; 8]> },
}

/// Per-mask precomputation: quadrature points with their stencils, inverse metric
/// and measure, plus the nodes carrying unknowns.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub grid: Grid,
    nodes: Vec<usize>,
    xy: Vec<[f64; 2]>,
    ginv: Vec<[f64; 3]>,
    weight: Vec<f64>,
    stencils: Stencils,
    node_measure: Vec<f64>,
    free: Vec<bool>,
}

impl Discretization {
    pub fn new(mask: &Mask, metric: &SubRiemannianMetric) -> Result<Self> {
        let grid = mask.grid.clone();
        let nodes: Vec<usize> = mask.interior_nodes().collect();
        if nodes.is_empty() {
            return Err(QlabError::EmptyMask);
        }
        let mut xy = Vec::with_capacity(nodes.len());
        let mut ginv = Vec::with_capacity(nodes.len());
        let mut weight = Vec::with_capacity(nodes.len());
        let mut st_start = Vec::with_capacity(nodes.len() + 1);
        let mut st = Vec::with_capacity(7 * nodes.len());
        let mut node_measure = vec![0.0; grid.len()];
        for &n in &nodes {
            let p = grid.point(n);
            xy.push([p.x, p.y]);
            ginv.push(packed(&metric.g_inverse(p)?));
            let w = omega_at(metric, p)?;
            node_measure[n] = w * mask.node_weight(n);
            weight.push(node_measure[n]);
            st_start.push(st.len());
            for_each_axis_entry(&grid, n, |m, axis, c| st.push((m, axis as u8, c)));
        }
        st_start.push(st.len());
        let stencils = Stencils::Nodal { start: st_start, entries: st };
        Ok(Discretization { free: mask.free_nodes(), grid, nodes, xy, ginv, weight, stencils, node_measure })
    }

    /// Discretization with the given quadrature.
    pub fn with_quadrature(mask: &Mask, metric: &SubRiemannianMetric, quadrature: Quadrature) -> Result<Self> {
        match quadrature {
            Quadrature::Nodal => Self::new(mask, metric),
            Quadrature::Cell => Self::cells(mask, metric),
        }
    }

    fn cells(mask: &Mask, metric: &SubRiemannianMetric) -> Result<Self> {
        let grid = mask.grid.clone();
        let [nx, ny, nz] = grid.n;
        let h = grid.h();
        let corner = [0, 1, nx, nx + 1, nx * ny, nx * ny + 1, nx * ny + nx, nx * ny + nx + 1];
        let g = [0.5 - 0.5 / 3f64.sqrt(), 0.5 + 0.5 / 3f64.sqrt()];
        let mut coef = Box::new([[[0.0; 8]; 3]; 8]);
        for q in 0..8 {
            let t = [g[q & 1], g[(q >> 1) & 1], g[(q >> 2) & 1]];
            for c in 0..8 {
                let bit = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                let shape = |a: usize| if bit[a] == 1 { t[a] } else { 1.0 - t[a] };
                let slope = |a: usize| if bit[a] == 1 { 1.0 / h[a] } else { -1.0 / h[a] };
                coef[q][0][c] = slope(0) * shape(1) * shape(2);
                coef[q][1][c] = shape(0) * slope(1) * shape(2);
                coef[q][2][c] = shape(0) * shape(1) * slope(2);
            }
        }
        let known = |i: usize| mask.interior[i] || mask.boundary[i];
        let (mut base, mut gp, mut nodes, mut xy, mut ginv, mut weight) = (vec![], vec![], vec![], vec![], vec![], vec![]);
        for k in 0..nz - 1 {
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let b = grid.index(i, j, k);
                    let cs = corner.map(|o| b + o);
                    if !cs.iter().any(|&c| mask.interior[c]) || !cs.iter().all(|&c| known(c)) {
                        continue;
                    }
                    let p0 = grid.point(b);
                    for q in 0..8 {
                        let p = Point::new(
                            p0.x + g[q & 1] * h[0],
                            p0.y + g[(q >> 1) & 1] * h[1],
                            p0.z + g[(q >> 2) & 1] * h[2],
                        );
                        base.push(b);
                        gp.push(q as u8);
                        nodes.push(b);
                        xy.push([p.x, p.y]);
                        ginv.push(packed(&metric.g_inverse(p)?));
                        weight.push(omega_at(metric, p)? * grid.cell_volume() / 8.0);
                    }
                }
            }
        }
        if nodes.is_empty() {
            return Err(QlabError::EmptyMask);
        }
        let mut node_measure = vec![0.0; grid.len()];
        for n in mask.interior_nodes() {
            node_measure[n] = omega_at(metric, grid.point(n))? * mask.node_weight(n);
        }
        let stencils = Stencils::Cell { base, gp, corner, coef };
        Ok(Discretization { free: mask.free_nodes(), grid, nodes, xy, ginv, weight, stencils, node_measure })
    }

    /// Calls `f(node, axis, coefficient)` for the axis-difference stencil of
    /// quadrature point `k`.
    #[inline]
    fn for_entries(&self, k: usize, mut f: impl FnMut(usize, usize, f64)) {
        match &self.stencils {
            Stencils::Nodal { start, entries } => {
                for &(m, axis, c) in &entries[start[k]..start[k + 1]] {
                    f(m, axis as usize, c);
                }
            }
            Stencils::Cell { base, gp, corner, coef } => {
                let (b, q) = (base[k], gp[k] as usize);
                for axis in 0..3 {
                    for c in 0..8 {
                        f(b + corner[c], axis, coef[q][axis][c]);
                    }
                }
            }
        }
    }

    /// Grid node of each quadrature point: the node itself for nodal quadrature,
    /// the lowest corner of the cell otherwise.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn free(&self) -> &[bool] {
        &self.free
    }

    /// Removes `pinned` nodes from the unknowns.
    pub fn pin(&mut self, pinned: &[bool]) {
        for (f, &p) in self.free.iter_mut().zip(pinned) {
            *f &= !p;
        }
    }

    /// `ω h³` quadrature weight at each quadrature node.
    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    fn check(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.grid.len() {
            return Err(QlabError::GridMismatch(format!("field has {} values, grid {}", u.len(), self.grid.len())));
        }
        Ok(())
    }

    /// Frame components `(X1 u, X2 u, ε X3 u)` at quadrature node `k`.
    #[inline]
    pub fn xi(&self, u: &[f64], k: usize, eps: f64) -> [f64; 3] {
        let mut d = [0.0; 3];
        self.for_entries(k, |m, axis, c| d[axis] += c * u[m]);
        let [x, y] = self.xy[k];
        [d[0] - 0.5 * y * d[2], d[1] + 0.5 * x * d[2], eps * d[2]]
    }

    /// `|∇u|²` measured in `g_ε` at every quadrature node.
    pub fn grad_sq(&self, u: &[f64], eps: f64) -> Vec<f64> {
        (0..self.nodes.len())
            .into_par_iter()
            .map(|k| raise(&self.ginv[k], self.xi(u, k, eps)).1)
            .collect()
    }

    /// Orthonormal-frame components of `∇u` at every quadrature node (two
    /// horizontal components followed by `εX3 u`).
    pub fn orthonormal_gradients(&self, u: &[f64], eps: f64) -> Vec<[f64; 3]> {
        (0..self.nodes.len())
            .into_par_iter()
            .map(|k| {
                let xi = self.xi(u, k, eps);
                let [a, b, c] = self.ginv[k];
                // g^{-1} = LLᵀ with L lower triangular; Lᵀξ has |Lᵀξ|² = ξᵀg^{-1}ξ.
                let l11 = a.sqrt();
                let l21 = b / l11;
                let l22 = (c - l21 * l21).max(0.0).sqrt();
                [l11 * xi[0] + l21 * xi[1], l22 * xi[1], xi[2]]
            })
            .collect()
    }

    pub fn energy(&self, u: &[f64], params: &OperatorParams) -> Result<f64> {
        self.check(u)?;
        let half = 0.5 * params.p_exp;
        let terms: Vec<f64> = (0..self.nodes.len())
            .into_par_iter()
            .map(|k| {
                let (_, s) = raise(&self.ginv[k], self.xi(u, k, params.eps));
                self.weight[k] * spow(params.delta + s, half)
            })
            .collect();
        let mut acc = Neumaier::default();
        terms.iter().for_each(|&t| acc.add(t));
        Ok(acc.sum())
    }

    pub fn pairing(&self, u: &[f64], phi: &[f64], params: &OperatorParams) -> Result<f64> {
        self.check(u)?;
        self.check(phi)?;
        let e = 0.5 * (params.p_exp - 2.0);
        let terms: Vec<f64> = (0..self.nodes.len())
            .into_par_iter()
            .map(|k| {
                let (v, s) = raise(&self.ginv[k], self.xi(u, k, params.eps));
                let xp = self.xi(phi, k, params.eps);
                self.weight[k] * spow(params.delta + s, e) * (v[0] * xp[0] + v[1] * xp[1] + v[2] * xp[2])
            })
            .collect();
        let mut acc = Neumaier::default();
        terms.iter().for_each(|&t| acc.add(t));
        Ok(acc.sum())
    }

    /// Weighted flux pulled back to the axis differences: `(∂J/∂D_x u, ∂J/∂D_y u, ∂J/∂D_z u)`.
    fn axis_flux(&self, u: &[f64], params: &OperatorParams) -> Vec<[f64; 3]> {
        let e = 0.5 * (params.p_exp - 2.0);
        (0..self.nodes.len())
            .into_par_iter()
            .map(|k| {
                let (v, s) = raise(&self.ginv[k], self.xi(u, k, params.eps));
                let f = self.weight[k] * spow(params.delta + s, e);
                let a = [f * v[0], f * v[1], f * v[2]];
                let [x, y] = self.xy[k];
                [a[0], a[1], -0.5 * y * a[0] + 0.5 * x * a[1] + params.eps * a[2]]
            })
            .collect()
    }

    /// `∂J/∂u_m` for every grid node `m`, `J = E/p`.
    pub fn gradient(&self, u: &[f64], params: &OperatorParams) -> Result<Vec<f64>> {
        self.check(u)?;
        let flux = self.axis_flux(u, params);
        let mut out = vec![0.0; self.grid.len()];
        for (k, g) in flux.iter().enumerate() {
            self.for_entries(k, |m, axis, c| out[m] += g[axis] * c);
        }
        Ok(out)
    }

    /// Diagonal of the Hessian of `J` (exact where `δ + |∇u|² > 0`).
    pub fn hessian_diagonal(&self, u: &[f64], params: &OperatorParams) -> Result<Vec<f64>> {
        self.check(u)?;
        let e = 0.5 * (params.p_exp - 2.0);
        let mut out = vec![0.0; self.grid.len()];
        let mut local: Vec<(usize, [f64; 3])> = Vec::with_capacity(9);
        for k in 0..self.nodes.len() {
            let xi = self.xi(u, k, params.eps);
            let (v, s) = raise(&self.ginv[k], xi);
            let s = params.delta + s;
            let f = self.weight[k] * spow(s, e);
            let f2 = if params.p_exp > 2.0 && s > 0.0 { self.weight[k] * (params.p_exp - 2.0) * spow(s, e - 1.0) } else { 0.0 };
            let [x, y] = self.xy[k];
            local.clear();
            self.for_entries(k, |m, axis, c| {
                let b = match axis {
                    0 => [c, 0.0, 0.0],
                    1 => [0.0, c, 0.0],
                    _ => [-0.5 * y * c, 0.5 * x * c, params.eps * c],
                };
                match local.iter_mut().find(|(n, _)| *n == m) {
                    Some((_, acc)) => (0..3).for_each(|i| acc[i] += b[i]),
                    None => local.push((m, b)),
                }
            });
            for &(m, b) in &local {
                let (_, bb) = raise(&self.ginv[k], b);
                let proj = v[0] * b[0] + v[1] * b[1] + v[2] * b[2];
                out[m] += f * bb + f2 * proj * proj;
            }
        }
        Ok(out)
    }

    /// Gradient divided by the node measure `ω h³` on nodes carrying unknowns;
    /// zero elsewhere.
    pub fn residual(&self, u: &[f64], params: &OperatorParams) -> Result<Vec<f64>> {
        let mut g = self.gradient(u, params)?;
        for (m, r) in g.iter_mut().enumerate() {
            *r = if self.free[m] { *r / self.node_measure[m] } else { 0.0 };
        }
        Ok(g)
    }

    /// Measure-weighted RMS of a residual over the free nodes.
    pub fn residual_norm(&self, r: &[f64]) -> f64 {
        let (mut num, mut den) = (Neumaier::default(), Neumaier::default());
        for (m, &is_free) in self.free.iter().enumerate() {
            if is_free {
                num.add(r[m] * r[m] * self.node_measure[m]);
                den.add(self.node_measure[m]);
            }
        }
        if den.sum() > 0.0 {
            (num.sum() / den.sum()).sqrt()
        } else {
            0.0
        }
    }

    /// `ω h³` at node `m` (zero off the quadrature set).
    pub fn node_measure(&self, m: usize) -> f64 {
        self.node_measure[m]
    }
}

fn same_grid(u: &ScalarField, mask: &Mask) -> Result<()> {
    if u.grid != mask.grid {
        return Err(QlabError::GridMismatch("field and mask live on different grids".into()));
    }
    Ok(())
}

/// `Σ_interior (δ + |∇_H u|²)^{p/2} ω h³`.
pub fn q_energy(u: &ScalarField, mask: &Mask, params: &OperatorParams, metric: &SubRiemannianMetric) -> Result<f64> {
    same_grid(u, mask)?;
    params.validate()?;
    Discretization::new(mask, metric)?.energy(&u.values, params)
}

/// `Σ_interior (δ + |∇_H u|²)^{(p−2)/2} ⟨∇_H u, ∇_H φ⟩ ω h³`.
pub fn pairing_iq(u: &ScalarField, phi: &ScalarField, mask: &Mask, params: &OperatorParams, metric: &SubRiemannianMetric) -> Result<f64> {
    same_grid(u, mask)?;
    same_grid(phi, mask)?;
    params.validate()?;
    Discretization::new(mask, metric)?.pairing(&u.values, &phi.values, params)
}

/// Discrete `L_p^{ε,δ} u`: the energy gradient divided by the node measure, on the
/// interior nodes carrying unknowns.
pub fn weak_residual(u: &ScalarField, mask: &Mask, params: &OperatorParams, metric: &SubRiemannianMetric) -> Result<ScalarField> {
    same_grid(u, mask)?;
    params.validate()?;
    let r = Discretization::new(mask, metric)?.residual(&u.values, params)?;
    ScalarField::new(u.grid.clone(), r)
}
