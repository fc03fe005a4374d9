//! Regular grids over boxes in ℝ³, scalar fields, node masks, and the discrete
//! horizontal derivatives `X_i^h` together with their exact transposes.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{QlabError, Result};
use crate::heis::{koranyi_gauge, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: Point,
    pub hi: Point,
    pub n: [usize; 3],
}

impl Grid {
    pub fn new(lo: Point, hi: Point, n: [usize; 3]) -> Result<Self> {
        if n.iter().any(|&k| k < 8) {
            return Err(QlabError::InvalidArgument(format!("grid needs at least 8 nodes per axis, got {n:?}")));
        }
        if !(hi.x > lo.x && hi.y > lo.y && hi.z > lo.z) || !lo.is_finite() || !hi.is_finite() {
            return Err(QlabError::InvalidArgument("grid box must satisfy hi > lo componentwise".into()));
        }
        Ok(Grid { lo, hi, n })
    }

    pub fn cube(lo: Point, hi: Point, n: usize) -> Result<Self> {
        Self::new(lo, hi, [n, n, n])
    }

    pub fn h(&self) -> [f64; 3] {
        [
            (self.hi.x - self.lo.x) / (self.n[0] - 1) as f64,
            (self.hi.y - self.lo.y) / (self.n[1] - 1) as f64,
            (self.hi.z - self.lo.z) / (self.n[2] - 1) as f64,
        ]
    }

    pub fn cell_volume(&self) -> f64 {
        let h = self.h();
        h[0] * h[1] * h[2]
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n[0] * (j + self.n[1] * k)
    }

    #[inline]
    pub fn ijk(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.n[0];
        let r = idx / self.n[0];
        [i, r % self.n[1], r / self.n[1]]
    }

    #[inline]
    pub fn point(&self, idx: usize) -> Point {
        let [i, j, k] = self.ijk(idx);
        let h = self.h();
        Point::new(
            self.lo.x + i as f64 * h[0],
            self.lo.y + j as f64 * h[1],
            self.lo.z + k as f64 * h[2],
        )
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.lo.x && p.x <= self.hi.x && p.y >= self.lo.y && p.y <= self.hi.y && p.z >= self.lo.z && p.z <= self.hi.z
    }

    /// Whether `idx` lies on a face of the box.
    pub fn on_face(&self, idx: usize) -> bool {
        let c = self.ijk(idx);
        (0..3).any(|a| c[a] == 0 || c[a] == self.n[a] - 1)
    }

    /// The 6 axis neighbours of a node (only those inside the grid).
    pub fn neighbors6(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let c = self.ijk(idx);
        let strides = [1, self.n[0], self.n[0] * self.n[1]];
        (0..3).flat_map(move |a| {
            let lo = (c[a] > 0).then(|| idx - strides[a]);
            let hi = (c[a] + 1 < self.n[a]).then(|| idx + strides[a]);
            lo.into_iter().chain(hi)
        })
    }

    /// Trilinear interpolation weights of `p`, or `None` outside the box.
    pub fn locate(&self, p: Point) -> Option<[(usize, f64); 8]> {
        if !self.contains(p) {
            return None;
        }
        let h = self.h();
        let rel = [(p.x - self.lo.x) / h[0], (p.y - self.lo.y) / h[1], (p.z - self.lo.z) / h[2]];
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let b = (rel[a].floor() as usize).min(self.n[a] - 2);
            base[a] = b;
            t[a] = rel[a] - b as f64;
        }
        let mut out = [(0usize, 0.0); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let (di, dj, dk) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let w = (if di == 1 { t[0] } else { 1.0 - t[0] })
                * (if dj == 1 { t[1] } else { 1.0 - t[1] })
                * (if dk == 1 { t[2] } else { 1.0 - t[2] });
            *slot = (self.index(base[0] + di, base[1] + dj, base[2] + dk), w);
        }
        Some(out)
    }
}

/// Nodal values of a function on a [`Grid`], x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(QlabError::GridMismatch(format!("{} values for {} nodes", values.len(), grid.len())));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn zeros(grid: &Grid) -> Self {
        ScalarField { values: vec![0.0; grid.len()], grid: grid.clone() }
    }

    pub fn constant(grid: &Grid, c: f64) -> Self {
        ScalarField { values: vec![c; grid.len()], grid: grid.clone() }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(Point) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.point(i))).collect();
        ScalarField { grid: grid.clone(), values }
    }

    pub fn sample(&self, p: Point) -> Option<f64> {
        self.grid
            .locate(p)
            .map(|w| w.iter().map(|&(i, t)| t * self.values[i]).sum())
    }

    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Writes the `qlab-field v1` snapshot format.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let g = &self.grid;
        let mut s = format!(
            "qlab-field v1 {} {} {} {} {} {} {} {} {}\n",
            g.n[0], g.n[1], g.n[2], g.lo.x, g.lo.y, g.lo.z, g.hi.x, g.hi.y, g.hi.z
        );
        for v in &self.values {
            let _ = writeln!(s, "{v}");
        }
        w.write_all(s.as_bytes()).map_err(|e| QlabError::Format(e.to_string()))
    }

    pub fn read_snapshot<R: BufRead>(r: R) -> Result<Self> {
        let bad = |m: &str| QlabError::Format(m.to_string());
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty field file"))?.map_err(|e| bad(&e.to_string()))?;
        let tok: Vec<&str> = header.split_whitespace().collect();
        if tok.len() != 11 || tok[0] != "qlab-field" || tok[1] != "v1" {
            return Err(bad("expected header `qlab-field v1 nx ny nz lox loy loz hix hiy hiz`"));
        }
        let n: Vec<usize> = tok[2..5].iter().map(|t| t.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad node count"))?;
        let c: Vec<f64> = tok[5..].iter().map(|t| t.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad box corner"))?;
        let grid = Grid::new(Point::new(c[0], c[1], c[2]), Point::new(c[3], c[4], c[5]), [n[0], n[1], n[2]])?;
        let mut values = Vec::with_capacity(grid.len());
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| bad(&e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: f64 = line.trim().parse().map_err(|_| bad(&format!("line {}: not a number", lineno + 2)))?;
            values.push(v);
        }
        ScalarField::new(grid, values)
    }

    /// CSV export with columns `x,y,z,value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut s = String::from("x,y,z,value\n");
        for (i, v) in self.values.iter().enumerate() {
            let p = self.grid.point(i);
            let _ = writeln!(s, "{},{},{},{}", p.x, p.y, p.z, v);
        }
        w.write_all(s.as_bytes()).map_err(|e| QlabError::Format(e.to_string()))
    }
}

/// Gauge ball that generated a mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallShape {
    pub center: Point,
    pub radius: f64,
}

impl BallShape {
    pub fn contains(&self, p: Point) -> bool {
        koranyi_gauge(self.center.inverse().mul(p)) < self.radius
    }

    /// Axis-aligned bounding box `(lo, hi)` of the ball.
    pub fn bounding_box(&self) -> (Point, Point) {
        let (c, r) = (self.center, self.radius);
        let dz = r * r / 4.0 + 0.5 * (c.x.abs() + c.y.abs()) * r;
        (Point::new(c.x - r, c.y - r, c.z - dz), Point::new(c.x + r, c.y + r, c.z + dz))
    }
}

/// Interior nodes (quadrature region and support of unknowns) and the boundary
/// shell of non-interior nodes reached by the derivative stencils.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub grid: Grid,
    pub interior: Vec<bool>,
    pub boundary: Vec<bool>,
    pub shape: Option<BallShape>,
}

impl Mask {
    pub fn from_interior(grid: &Grid, interior: Vec<bool>) -> Self {
        let mut boundary = vec![false; grid.len()];
        for idx in 0..grid.len() {
            if interior[idx] {
                for nb in grid.neighbors6(idx) {
                    if !interior[nb] {
                        boundary[nb] = true;
                    }
                }
            }
        }
        Mask { grid: grid.clone(), interior, boundary, shape: None }
    }

    /// Every node is interior; the shell is empty.
    pub fn full(grid: &Grid) -> Self {
        Mask { grid: grid.clone(), interior: vec![true; grid.len()], boundary: vec![false; grid.len()], shape: None }
    }

    pub fn count(&self) -> usize {
        self.interior.iter().filter(|&&b| b).count()
    }

    pub fn interior_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.interior.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// Interior nodes whose six neighbours are interior as well. These carry the
    /// unknowns of Dirichlet problems; the remaining interior layer and the shell
    /// hold prescribed values.
    pub fn free_nodes(&self) -> Vec<bool> {
        (0..self.grid.len())
            .map(|i| {
                self.interior[i]
                    && !self.grid.on_face(i)
                    && self.grid.neighbors6(i).all(|nb| self.interior[nb])
            })
            .collect()
    }

    /// Node quadrature weight: `h³`, halved per box face the node lies on.
    pub fn node_weight(&self, idx: usize) -> f64 {
        let c = self.grid.ijk(idx);
        let mut w = self.grid.cell_volume();
        for a in 0..3 {
            if c[a] == 0 || c[a] == self.grid.n[a] - 1 {
                w *= 0.5;
            }
        }
        w
    }

    /// Nodal volume `Σ_interior w`.
    pub fn volume(&self) -> f64 {
        let mut acc = Neumaier::default();
        for i in self.interior_nodes() {
            acc.add(self.node_weight(i));
        }
        acc.sum()
    }
}

/// Compensated summation with a fixed evaluation order.
#[derive(Debug, Default, Clone, Copy)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn sum(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Derivative stencil along one axis: (index offset in nodes, coefficient).
fn axis_stencil(c: usize, n: usize, h: f64) -> ([(isize, f64); 3], usize) {
    let inv = 1.0 / (2.0 * h);
    if c == 0 {
        ([(0, -3.0 * inv), (1, 4.0 * inv), (2, -inv)], 3)
    } else if c == n - 1 {
        ([(0, 3.0 * inv), (-1, -4.0 * inv), (-2, inv)], 3)
    } else {
        ([(-1, -inv), (1, inv), (0, 0.0)], 2)
    }
}

/// Calls `f(node, axis, coeff)` for each entry of the axis differences
/// `(D_x, D_y, D_z)` at `idx`.
pub fn for_each_axis_entry(grid: &Grid, idx: usize, mut f: impl FnMut(usize, usize, f64)) {
    let c = grid.ijk(idx);
    let h = grid.h();
    let strides = [1isize, grid.n[0] as isize, (grid.n[0] * grid.n[1]) as isize];
    for axis in 0..3 {
        let (st, len) = axis_stencil(c[axis], grid.n[axis], h[axis]);
        for &(off, w) in &st[..len] {
            f((idx as isize + off * strides[axis]) as usize, axis, w);
        }
    }
}

/// Calls `f(node, [c1, c2, c3])` for each stencil entry of the gradient
/// `(X1^h, X2^h, ε X3^h)` at `idx`:
/// `X1^h = D_x − (y/2) D_z`, `X2^h = D_y + (x/2) D_z`, `X3^{h,ε} = ε D_z`.
pub fn for_each_grad_entry(grid: &Grid, idx: usize, eps: f64, mut f: impl FnMut(usize, [f64; 3])) {
    let p = grid.point(idx);
    for_each_axis_entry(grid, idx, |node, axis, w| {
        let coeffs = match axis {
            0 => [w, 0.0, 0.0],
            1 => [0.0, w, 0.0],
            _ => [-0.5 * p.y * w, 0.5 * p.x * w, eps * w],
        };
        f(node, coeffs);
    });
}

fn check_direction(i: usize) -> Result<usize> {
    if (1..=3).contains(&i) {
        Ok(i - 1)
    } else {
        Err(QlabError::InvalidArgument(format!("frame index must be 1, 2 or 3, got {i}")))
    }
}

/// `X_i^h u` at every node (`i = 3` is scaled by `eps`).
pub fn apply_horizontal_derivative(u: &ScalarField, i: usize, eps: f64) -> Result<ScalarField> {
    let a = check_direction(i)?;
    let grid = &u.grid;
    let values = (0..grid.len())
        .map(|idx| {
            let mut s = 0.0;
            for_each_grad_entry(grid, idx, eps, |m, c| s += c[a] * u.values[m]);
            s
        })
        .collect();
    Ok(ScalarField { grid: grid.clone(), values })
}

/// Transpose of [`apply_horizontal_derivative`] for `⟨u, v⟩ = Σ u v ω h³`:
/// `X^{h,*} v = ω⁻¹ Dᵀ (ω v)`.
pub fn adjoint_derivative(v: &ScalarField, i: usize, eps: f64, measure: &ScalarField) -> Result<ScalarField> {
    let a = check_direction(i)?;
    if measure.grid != v.grid {
        return Err(QlabError::GridMismatch("measure and field live on different grids".into()));
    }
    if measure.values.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(QlabError::MeasureDegenerate);
    }
    let grid = &v.grid;
    let mut out = vec![0.0; grid.len()];
    for idx in 0..grid.len() {
        let wv = measure.values[idx] * v.values[idx];
        for_each_grad_entry(grid, idx, eps, |m, c| out[m] += c[a] * wv);
    }
    for (o, w) in out.iter_mut().zip(&measure.values) {
        *o /= w;
    }
    Ok(ScalarField { grid: grid.clone(), values: out })
}

/// `Σ_interior u ω w_node` with compensated summation in index order.
pub fn integrate(u: &ScalarField, measure: &ScalarField, mask: &Mask) -> Result<f64> {
    if u.grid != mask.grid || measure.grid != mask.grid {
        return Err(QlabError::GridMismatch("integrate: grids differ".into()));
    }
    let mut acc = Neumaier::default();
    for idx in mask.interior_nodes() {
        acc.add(u.values[idx] * measure.values[idx] * mask.node_weight(idx));
    }
    Ok(acc.sum())
}

fn ball_interior(center: Point, r: f64, grid: &Grid, keep: impl Fn(usize) -> bool) -> Result<Mask> {
    let shape = BallShape { center, radius: r };
    let interior: Vec<bool> = (0..grid.len()).map(|i| keep(i) && shape.contains(grid.point(i))).collect();
    if !interior.iter().any(|&b| b) {
        return Err(QlabError::EmptyMask);
    }
    let mut m = Mask::from_interior(grid, interior);
    m.shape = Some(shape);
    Ok(m)
}

/// Nodes with `N(center⁻¹ p) < r` and their stencil shell. The ball must stay two
/// nodes away from every face of the box.
pub fn gauge_ball_mask(center: Point, r: f64, grid: &Grid) -> Result<Mask> {
    if !(r > 0.0) {
        return Err(QlabError::EmptyMask);
    }
    let (lo, hi) = BallShape { center, radius: r }.bounding_box();
    let h = grid.h();
    let fits = lo.x >= grid.lo.x + 2.0 * h[0]
        && lo.y >= grid.lo.y + 2.0 * h[1]
        && lo.z >= grid.lo.z + 2.0 * h[2]
        && hi.x <= grid.hi.x - 2.0 * h[0]
        && hi.y <= grid.hi.y - 2.0 * h[1]
        && hi.z <= grid.hi.z - 2.0 * h[2];
    if !fits {
        return Err(QlabError::OutOfDomain(format!("gauge ball of radius {r} around {center:?} leaves the box margin")));
    }
    ball_interior(center, r, grid, |_| true)
}

/// Like [`gauge_ball_mask`] but clips the ball to the box, keeping the outermost
/// layer of nodes as shell.
pub fn gauge_ball_mask_clipped(center: Point, r: f64, grid: &Grid) -> Result<Mask> {
    if !(r > 0.0) {
        return Err(QlabError::EmptyMask);
    }
    ball_interior(center, r, grid, |i| !grid.on_face(i))
}
