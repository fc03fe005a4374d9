//! Horizontal harmonic and Q-harmonic coordinates by Dirichlet correction of the
//! ambient coordinates on shrinking gauge balls, and horizontal lifts of planar
//! curves.

use std::fmt::Write as _;

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::energy::{Discretization, OperatorParams};
use crate::error::{QlabError, Result};
use crate::grid::{gauge_ball_mask, Grid, Mask, Neumaier, ScalarField};
use crate::heis::{koranyi_gauge, Point, SubRiemannianMetric};
use crate::solver::{solve_plaplacian_with, solve_sublaplacian_with, Init, SolverOptions};

/// Least-squares line through `(log r, log norm)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    /// RMS deviation of the points from the line, in log units.
    pub residual: f64,
}

pub fn fit_loglog(points: &[(f64, f64)]) -> Option<DecayFit> {
    if points.len() < 2 || points.iter().any(|&(r, v)| !(r > 0.0 && v > 0.0)) {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Some(DecayFit { slope, intercept, residual: (rss / n).sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartOptions {
    /// Nodes per axis of the grid fitted to each ball.
    pub n: usize,
    pub tol: f64,
    /// Condition numbers above this count as singular.
    pub cond_max: f64,
}

impl Default for ChartOptions {
    fn default() -> Self {
        ChartOptions { n: 33, tol: 1e-10, cond_max: 1e6 }
    }
}

/// Corrected horizontal coordinates around `center`, expressed on a grid in the
/// left-translated variable `q` (ambient point `center·q`).
#[derive(Debug, Clone, PartialEq)]
pub struct CoordChart {
    pub center: Point,
    pub radius: f64,
    pub u1: ScalarField,
    pub u2: ScalarField,
    pub frame_matrix_cond: f64,
    /// `min |∇_H u¹|` over the quarter ball.
    pub min_grad_u1: f64,
    /// `(r, correction norm)` for every radius tried, largest first.
    pub decay: Vec<(f64, f64)>,
    /// Fit of the decay table (present with at least four positive norms).
    pub fit: Option<DecayFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSummary {
    pub center: Point,
    pub radius: f64,
    pub frame_matrix_cond: f64,
    pub min_grad_u1: f64,
    pub decay: Vec<(f64, f64)>,
    pub fit: Option<DecayFit>,
}

impl CoordChart {
    pub fn summary(&self) -> ChartSummary {
        ChartSummary {
            center: self.center,
            radius: self.radius,
            frame_matrix_cond: self.frame_matrix_cond,
            min_grad_u1: self.min_grad_u1,
            decay: self.decay.clone(),
            fit: self.fit,
        }
    }

    /// CSV table with columns `r,norm,fit_slope,fit_residual`.
    pub fn decay_csv(&self) -> String {
        let mut s = String::from("r,norm,fit_slope,fit_residual\n");
        let (slope, res) = self.fit.map_or((f64::NAN, f64::NAN), |f| (f.slope, f.residual));
        for (r, v) in &self.decay {
            let _ = writeln!(s, "{r},{v},{slope},{res}");
        }
        s
    }
}

/// Grid in translated coordinates fitted to the gauge ball of radius `r` at the
/// origin, keeping the two-node margin required by the ball mask.
pub fn chart_grid(r: f64, n: usize) -> Result<Grid> {
    let stretch = 1.01 / (1.0 - 4.0 / (n as f64 - 1.0));
    let (a, c) = (r * stretch, 0.25 * r * r * stretch);
    Grid::cube(Point::new(-a, -a, -c), Point::new(a, a, c), n)
}

#[derive(Clone, Copy)]
enum Norm {
    /// `(1/|B|) ∫ |∇_H w|²`
    AverageSquare,
    /// `(∫ |∇_H w|^p)^{1/p}`
    Lp(f64),
}

struct RadiusResult {
    u: [ScalarField; 2],
    norm: f64,
    cond: f64,
    min_grad_u1: f64,
}

fn correction_norm(disc: &Discretization, w: &[f64], norm: Norm) -> f64 {
    let s = disc.grad_sq(w, 0.0);
    let wt = disc.weights();
    let (mut num, mut den) = (Neumaier::default(), Neumaier::default());
    for k in 0..s.len() {
        match norm {
            Norm::AverageSquare => num.add(wt[k] * s[k]),
            Norm::Lp(p) => num.add(wt[k] * s[k].powf(0.5 * p)),
        }
        den.add(wt[k]);
    }
    match norm {
        Norm::AverageSquare => num.sum() / den.sum(),
        Norm::Lp(p) => num.sum().powf(1.0 / p),
    }
}

fn solve_radius(
    center: Point,
    r: f64,
    metric: &SubRiemannianMetric,
    params: Option<&OperatorParams>,
    opts: &ChartOptions,
) -> Result<RadiusResult> {
    let grid = chart_grid(r, opts.n)?;
    let mask: Mask = gauge_ball_mask(Point::ORIGIN, r, &grid)?;
    let local = metric.translated(center);
    let disc = Discretization::new(&mask, &local)?;
    let norm = match params {
        None => Norm::AverageSquare,
        Some(p) => Norm::Lp(p.p_exp),
    };
    let mut fields = Vec::with_capacity(2);
    let mut total = 0.0;
    for i in 0..2 {
        let coord = |q: Point| if i == 0 { center.x + q.x } else { center.y + q.y };
        let boundary = ScalarField::from_fn(&grid, coord);
        let u = match params {
            None => solve_sublaplacian_with(&mask, &boundary, &local, 0.0, opts.tol, &Init::Boundary)?.0,
            Some(p) => {
                let so = SolverOptions { tol: opts.tol, ..SolverOptions::default() };
                solve_plaplacian_with(&mask, &boundary, p, &local, &so)?.0
            }
        };
        let w: Vec<f64> = u.values.iter().zip(&boundary.values).map(|(a, b)| a - b).collect();
        total += correction_norm(&disc, &w, norm);
        fields.push(u);
    }
    let u2 = fields.pop().expect("two fields");
    let u1 = fields.pop().expect("two fields");

    // Frame matrix (X_i u^j) and |∇_H u¹| on the quarter ball.
    let mut cond = 0.0f64;
    let mut min_grad = f64::INFINITY;
    let g1 = disc.orthonormal_gradients(&u1.values, 0.0);
    for (k, &node) in disc.nodes().iter().enumerate() {
        if koranyi_gauge(grid.point(node)) >= 0.25 * r {
            continue;
        }
        let a = disc.xi(&u1.values, k, 0.0);
        let b = disc.xi(&u2.values, k, 0.0);
        let m = Matrix2::new(a[0], b[0], a[1], b[1]);
        let sv = m.singular_values();
        let (hi, lo) = (sv.max(), sv.min());
        cond = cond.max(if lo > 0.0 { hi / lo } else { f64::INFINITY });
        min_grad = min_grad.min((g1[k][0].powi(2) + g1[k][1].powi(2)).sqrt());
    }
    if !min_grad.is_finite() {
        return Err(QlabError::EmptyMask);
    }
    Ok(RadiusResult { u: [u1, u2], norm: total, cond, min_grad_u1: min_grad })
}

fn build(
    center: Point,
    radii: &[f64],
    metric: &SubRiemannianMetric,
    params: Option<&OperatorParams>,
    opts: &ChartOptions,
) -> Result<CoordChart> {
    if radii.is_empty() || radii.iter().any(|&r| !(r > 0.0)) || radii.windows(2).any(|w| w[1] >= w[0]) {
        return Err(QlabError::InvalidArgument("radii must be positive and strictly decreasing".into()));
    }
    let mut decay = Vec::with_capacity(radii.len());
    let mut chosen: Option<(f64, RadiusResult)> = None;
    for &r in radii {
        let res = solve_radius(center, r, metric, params, opts)?;
        decay.push((r, res.norm));
        if res.cond.is_finite() && res.cond <= opts.cond_max {
            chosen = Some((r, res));
        }
    }
    let (radius, res) = chosen.ok_or(QlabError::MatrixSingular)?;
    let fit = if decay.len() >= 4 { fit_loglog(&decay) } else { None };
    let [u1, u2] = res.u;
    Ok(CoordChart {
        center,
        radius,
        u1,
        u2,
        frame_matrix_cond: res.cond,
        min_grad_u1: res.min_grad_u1,
        decay,
        fit,
    })
}

/// Harmonic corrections `L₂u^i = 0` on `B_r(p)`, `u^i = x^i` on the boundary, for
/// each radius; decay norm `(1/|B_r|) Σ_i ∫ |∇_H(u^i − x^i)|²`.
pub fn build_harmonic_coords(p: Point, radii: &[f64], metric: &SubRiemannianMetric) -> Result<CoordChart> {
    build_harmonic_coords_with(p, radii, metric, &ChartOptions::default())
}

pub fn build_harmonic_coords_with(p: Point, radii: &[f64], metric: &SubRiemannianMetric, opts: &ChartOptions) -> Result<CoordChart> {
    build(p, radii, metric, None, opts)
}

/// Q-harmonic corrections; decay norm `Σ_i ‖∇_H(u^i − x^i)‖_{L^Q(B_r)}`.
pub fn build_qharmonic_coords(p: Point, radii: &[f64], params: &OperatorParams, metric: &SubRiemannianMetric) -> Result<CoordChart> {
    build_qharmonic_coords_with(p, radii, params, metric, &ChartOptions::default())
}

pub fn build_qharmonic_coords_with(
    p: Point,
    radii: &[f64],
    params: &OperatorParams,
    metric: &SubRiemannianMetric,
    opts: &ChartOptions,
) -> Result<CoordChart> {
    params.validate()?;
    build(p, radii, metric, Some(params), opts)
}

/// Horizontal lift of a sampled planar curve: `ż = (x ẏ − y ẋ)/2` integrated by
/// the midpoint rule, which is the shoelace formula and hence exact on polygons.
pub fn lift_vertical(gamma_h: &[(f64, f64)], z0: f64) -> Vec<Point> {
    let mut out = Vec::with_capacity(gamma_h.len());
    let mut z = z0;
    for (k, &(x, y)) in gamma_h.iter().enumerate() {
        if k > 0 {
            let (px, py) = gamma_h[k - 1];
            let (mx, my) = (0.5 * (px + x), 0.5 * (py + y));
            z += 0.5 * (mx * (y - py) - my * (x - px));
        }
        out.push(Point::new(x, y, z));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_loop(step: f64) -> Vec<(f64, f64)> {
        let m = (1.0 / step).round() as usize;
        let mut pts = Vec::new();
        let corners = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.0)];
        for w in corners.windows(2) {
            for k in 0..m {
                let t = k as f64 / m as f64;
                pts.push((w[0].0 + t * (w[1].0 - w[0].0), w[0].1 + t * (w[1].1 - w[0].1)));
            }
        }
        pts.push((0.0, 0.0));
        pts
    }

    #[test]
    fn lift_examples() {
        let seg: Vec<(f64, f64)> = (0..=100).map(|k| (k as f64 * 0.01, 0.0)).collect();
        assert!(lift_vertical(&seg, 0.0).iter().all(|p| p.z == 0.0));
        let sq = lift_vertical(&square_loop(1e-3), 0.0);
        assert!((sq.last().unwrap().z - 1.0).abs() < 1e-6);
        let circle = |r: f64, m: usize| -> f64 {
            let pts: Vec<(f64, f64)> = (0..=m)
                .map(|k| {
                    let t = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
                    (r * t.cos(), r * t.sin())
                })
                .collect();
            lift_vertical(&pts, 0.0).last().unwrap().z
        };
        let exact = std::f64::consts::PI * 0.25;
        let (e1, e2) = ((circle(0.5, 100) - exact).abs(), (circle(0.5, 200) - exact).abs());
        assert!(e1 < 1e-3 && (e1 / e2 - 4.0).abs() < 0.1);
    }

    #[test]
    fn lift_reversal_returns() {
        let mut path: Vec<(f64, f64)> = (0..=50).map(|k| {
            let t = k as f64 / 50.0;
            (t, (3.0 * t).sin())
        }).collect();
        let back: Vec<(f64, f64)> = path.iter().rev().copied().collect();
        path.extend(back);
        assert!((lift_vertical(&path, 0.7).last().unwrap().z - 0.7).abs() < 1e-14);
    }

    #[test]
    fn standard_metric_charts_are_ambient_coordinates() {
        let p = Point::new(0.4, -0.2, 0.1);
        let opts = ChartOptions { n: 17, ..Default::default() };
        let c = build_harmonic_coords_with(p, &[0.4, 0.2], &SubRiemannianMetric::standard(), &opts).unwrap();
        assert!(c.decay.iter().all(|&(_, v)| v < 1e-18));
        let g = &c.u1.grid;
        assert!((0..g.len()).all(|i| (c.u1.values[i] - p.x - g.point(i).x).abs() < 1e-9));
        assert!((c.frame_matrix_cond - 1.0).abs() < 1e-9);
        assert_eq!(c.radius, 0.2);
        let q = build_qharmonic_coords_with(p, &[0.4, 0.2], &OperatorParams::default(), &SubRiemannianMetric::standard(), &opts).unwrap();
        assert!(q.decay.iter().all(|&(_, v)| v < 1e-8));
    }

    #[test]
    fn fit_recovers_power_law() {
        let pts: Vec<(f64, f64)> = [0.4, 0.2, 0.1, 0.05].iter().map(|&r: &f64| (r, 3.0 * r.powf(1.7))).collect();
        let f = fit_loglog(&pts).unwrap();
        assert!((f.slope - 1.7).abs() < 1e-12 && f.residual < 1e-12);
        assert!(fit_loglog(&[(0.1, 0.0), (0.2, 1.0)]).is_none());
    }
}
