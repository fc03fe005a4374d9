//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain binary
//! so the lines are always shown; exits nonzero if any criterion fails.

use std::time::Instant;

use nalgebra::Matrix3;
use qlab::coords::{build_harmonic_coords, build_qharmonic_coords, chart_grid, lift_vertical};
use qlab::energy::{q_energy, structure_bounds_check, weak_residual, Discretization, OperatorParams};
use qlab::grid::{adjoint_derivative, apply_horizontal_derivative, gauge_ball_mask, Grid, Mask, ScalarField};
use qlab::heis::{koranyi_gauge, Point, SubRiemannianMetric};
use qlab::qcdiag::{
    capacity, condition_battery, image_test_field, morphism_check, ring_condenser, test_field, ConditionBatteryReport, MapSpec,
};
use qlab::solver::{continuation_sweep, solve_plaplacian_with, Init, SolverOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn norms(decay: &[(f64, f64)]) -> Vec<f64> {
    decay.iter().map(|d| d.1).collect()
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn standard() -> SubRiemannianMetric {
    SubRiemannianMetric::standard()
}

fn ball_region(n: usize) -> Mask {
    gauge_ball_mask(Point::ORIGIN, 0.5, &chart_grid(0.5, n).unwrap()).unwrap()
}

/// `|det|` of the mapped edge vectors of a small box over its volume.
fn volume_ratio(map: &MapSpec, p: Point) -> f64 {
    let h = 1e-4;
    let o = map.apply(p).to_vector();
    let edge = |a: usize| {
        let mut e = [0.0; 3];
        e[a] = h;
        map.apply(Point::new(p.x + e[0], p.y + e[1], p.z + e[2])).to_vector() - o
    };
    Matrix3::from_columns(&[edge(0), edge(1), edge(2)]).determinant().abs() / h.powi(3)
}

/// Largest stretch of a unit horizontal vector, from finite differences of the map
/// along horizontal directions at `p` (standard metric).
fn fd_horizontal_stretch(map: &MapSpec, p: Point) -> f64 {
    let t = 1e-6;
    let fp = map.apply(p);
    (0..360)
        .map(|k| {
            let a = (k as f64).to_radians();
            let (c, s) = (a.cos(), a.sin());
            // Horizontal direction c X1 + s X2 at p.
            let v = [c, s, 0.5 * (p.x * s - p.y * c)];
            let q = map.apply(Point::new(p.x + t * v[0], p.y + t * v[1], p.z + t * v[2]));
            let d = fp.inverse().mul(q);
            (d.x * d.x + d.y * d.y).sqrt() / t
        })
        .fold(0.0, f64::max)
}

fn record<'a>(rep: &'a ConditionBatteryReport, name: &str) -> &'a qlab::qcdiag::ConditionRecord {
    rep.get(name).expect("battery record")
}

fn criterion_1() -> Outcome {
    let region = ball_region(32);
    let params = OperatorParams::default();
    let conformal = [
        "identity",
        "translate:0.5,-0.3,0.2",
        "translate:-1,0.5,0",
        "rotation:0.7",
        "rotation:2.5",
        "dilation:0.5",
        "dilation:2",
    ];
    let mut failed = Vec::new();
    for s in conformal {
        let rep = condition_battery(&s.parse().unwrap(), &region, &params, &standard(), 0.05).unwrap();
        if !rep.all_pass {
            failed.push(s);
        }
    }
    let shear = MapSpec::Shear { a: 2.0, b: 1.0 };
    let rep = condition_battery(&shear, &region, &params, &standard(), 0.05).unwrap();
    let (hs, jp) = (record(&rep, "HS"), record(&rep, "JP"));
    let j_oracle = volume_ratio(&shear, Point::new(0.1, 0.2, 0.0));
    let l4_oracle = fd_horizontal_stretch(&shear, Point::new(0.1, 0.2, 0.0)).powi(4);
    let shear_ok = !hs.pass
        && (hs.value - 2.0).abs() <= 0.1
        && !jp.pass
        && (jp.value - j_oracle).abs() <= 0.05 * j_oracle
        && (jp.reference - l4_oracle).abs() <= 0.05 * l4_oracle;
    outcome(
        failed.is_empty() && shear_ok,
        format!(
            "{} conformal maps all pass (failures: {failed:?}); shear(2,1): HS ratio {:.4}, J = {:.4} (volume oracle {:.4}) vs L^4 = {:.4} (oracle {:.4})",
            conformal.len(),
            hs.value,
            jp.value,
            j_oracle,
            jp.reference,
            l4_oracle
        ),
    )
}

/// `(1 − N⁴/r⁴)³₊` cutoff of the centred gauge ball.
fn bump(p: Point, r: f64) -> f64 {
    let n4 = (p.x * p.x + p.y * p.y).powi(2) + 16.0 * p.z * p.z;
    (1.0 - n4 / r.powi(4)).max(0.0).powi(3)
}

/// Relative errors of `E₄(v) = E₄(v∘δ₂)` for the three test fields, with `v` on an
/// independent (non-dilated) grid of the image ball.
fn energy_invariance_errors(n: usize) -> Vec<f64> {
    let params = OperatorParams::default();
    let src_grid = chart_grid(0.5, n).unwrap();
    let src = gauge_ball_mask(Point::ORIGIN, 0.5, &src_grid).unwrap();
    let img_grid = chart_grid(1.0, n + 5).unwrap();
    let img = gauge_ball_mask(Point::ORIGIN, 1.0, &img_grid).unwrap();
    (0..3)
        .map(|k| {
            let v = ScalarField::from_fn(&img_grid, |y| bump(y, 1.0) * test_field(k, y));
            let pulled = ScalarField::from_fn(&src_grid, |x| bump(x, 0.5) * test_field(k, Point::new(2.0 * x.x, 2.0 * x.y, 4.0 * x.z)));
            let a = q_energy(&v, &img, &params, &standard()).unwrap();
            let b = q_energy(&pulled, &src, &params, &standard()).unwrap();
            (a - b).abs() / a
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let coarse = energy_invariance_errors(32);
    let fine = energy_invariance_errors(64);
    let decreasing = coarse.iter().zip(&fine).all(|(c, f)| f < c);
    let battery = condition_battery(&MapSpec::Dilation { lambda: 2.0 }, &ball_region(64), &OperatorParams::default(), &standard(), 0.02).unwrap();
    let ep = record(&battery, "EP");
    let pass = fine.iter().all(|&e| e <= 0.02) && decreasing && ep.pass;
    outcome(pass, format!("rel. errors n=32 {}, n=64 {}; battery EP at n=64 {:.1e}", sci(&coarse), sci(&fine), ep.value))
}

fn morphism_errors(n: usize, maps: &[&str]) -> Vec<f64> {
    let region = ball_region(n);
    maps.iter()
        .map(|s| {
            let m: MapSpec = s.parse().unwrap();
            let v = image_test_field(&m, &region, 0, 1).unwrap();
            let phi = image_test_field(&m, &region, 1, 1).unwrap();
            morphism_check(&m, &v, &phi, &region, &OperatorParams::default(), &standard()).unwrap().rel_err
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let conformal = ["translate:0.3,-0.2,0.1", "rotation:0.7", "dilation:2", "dilation:0.5"];
    let (c32, c64) = (morphism_errors(32, &conformal), morphism_errors(64, &conformal));
    let s: Vec<f64> = [32, 48, 64].iter().map(|&n| morphism_errors(n, &["shear:2,1"])[0]).collect();
    let conformal_ok = c64.iter().all(|&e| e <= 0.02) && c32.iter().zip(&c64).all(|(a, b)| b <= a || *b < 1e-12);
    let shear_ok = s.iter().all(|&e| e >= 0.10);
    outcome(conformal_ok && shear_ok, format!("conformal rel_err n=32 {}, n=64 {}; shear(2,1) n=32,48,64 {s:.3?}", sci(&c32), sci(&c64)))
}

fn criterion_4() -> Outcome {
    let grid = Grid::cube(Point::new(-1.0, -1.0, -0.5), Point::new(1.0, 1.0, 0.5), 33).unwrap();
    let mask = gauge_ball_mask(Point::ORIGIN, 0.75, &grid).unwrap();
    let x = ScalarField::from_fn(&grid, |p| p.x);
    let random_start = SolverOptions { init: Init::Random(4), linear_warm_start: false, ..SolverOptions::default() };
    let mut worst = Vec::new();
    for p in [2.0, 3.0, 4.0] {
        let params = OperatorParams::new(p, 0.0, 0.0).unwrap();
        let (u, _) = solve_plaplacian_with(&mask, &x, &params, &standard(), &random_start).unwrap();
        worst.push(mask.interior_nodes().map(|i| (u.values[i] - x.values[i]).abs()).fold(0.0, f64::max));
    }
    outcome(worst.iter().all(|&e| e <= 1e-8), format!("max |u - x| for p = 2, 3, 4: {}", sci(&worst)))
}

/// `L₄ u = Σᵢ Xᵢ(|∇_H u|² Xᵢ u)` by nested central differences along the flow
/// of the frame fields. Returns the value and the largest single term.
fn l4_nested_fd(u: &dyn Fn(Point) -> f64, p: Point) -> (f64, f64) {
    let t = 1e-4;
    let along = |q: Point, i: usize, s: f64| match i {
        0 => Point::new(q.x + s, q.y, q.z - 0.5 * q.y * s),
        _ => Point::new(q.x, q.y + s, q.z + 0.5 * q.x * s),
    };
    let xu = |q: Point, i: usize| (u(along(q, i, t)) - u(along(q, i, -t))) / (2.0 * t);
    let flux = |q: Point, i: usize| {
        let (a, b) = (xu(q, 0), xu(q, 1));
        (a * a + b * b) * xu(q, i)
    };
    let terms: Vec<f64> = (0..2).map(|i| (flux(along(p, i, t), i) - flux(along(p, i, -t), i)) / (2.0 * t)).collect();
    (terms[0] + terms[1], terms[0].abs().max(terms[1].abs()))
}

fn log_gauge_residual(n: usize) -> f64 {
    let grid = Grid::new(Point::new(-1.1, -1.1, -0.3), Point::new(1.1, 1.1, 0.3), [n, n, n]).unwrap();
    let interior = (0..grid.len())
        .map(|i| {
            let nv = koranyi_gauge(grid.point(i));
            !grid.on_face(i) && nv > 0.5 && nv < 1.0
        })
        .collect();
    let mask = Mask::from_interior(&grid, interior);
    let u = ScalarField::from_fn(&grid, |p| koranyi_gauge(p).max(1e-300).ln());
    let r = weak_residual(&u, &mask, &OperatorParams::default(), &standard()).unwrap();
    Discretization::new(&mask, &standard()).unwrap().residual_norm(&r.values)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 200 {
        let p = Point::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.25..0.25));
        let nv = koranyi_gauge(p);
        if !(nv > 0.55 && nv < 0.95) || p.x.hypot(p.y) < 0.2 {
            continue;
        }
        let (v, scale) = l4_nested_fd(&|q| koranyi_gauge(q).ln(), p);
        worst = worst.max(v.abs() / scale);
        checked += 1;
    }
    let norms: Vec<f64> = [17, 33, 65].iter().map(|&n| log_gauge_residual(n)).collect();
    let slopes: Vec<f64> = norms.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let pass = worst < 1e-4 && slopes.iter().all(|&s| s >= 0.8);
    outcome(
        pass,
        format!("pointwise |L4 log N| / term <= {worst:.1e} at 200 points; residual norms n=17,33,65 {norms:.3?}, slopes {slopes:.2?}"),
    )
}

const DECAY_RADII: [f64; 4] = [0.4, 0.2, 0.1, 0.05];

fn criterion_6() -> Outcome {
    let chart = build_harmonic_coords(Point::new(1.0, 0.0, 0.0), &DECAY_RADII, &SubRiemannianMetric::perturbed_example()).unwrap();
    let fit = chart.fit.expect("decay fit");
    outcome(
        fit.slope >= 1.7 && fit.residual < 0.1,
        format!("slope {:.3}, fit residual {:.3}, norms {}", fit.slope, fit.residual, sci(&norms(&chart.decay))),
    )
}

fn criterion_7() -> Outcome {
    let chart =
        build_qharmonic_coords(Point::new(1.0, 0.0, 0.0), &DECAY_RADII, &OperatorParams::default(), &SubRiemannianMetric::perturbed_example())
            .unwrap();
    let fit = chart.fit.expect("decay fit");
    let floor = 4.0 / 3.0 - 0.2;
    outcome(fit.slope >= floor, format!("slope {:.3} (floor {floor:.3}), norms {}", fit.slope, sci(&norms(&chart.decay))))
}

fn criterion_8() -> Outcome {
    let levels = [1.0, 0.1, 0.01];
    let metric = SubRiemannianMetric::perturbed_example();
    let mut lam = Vec::new();
    let mut up = Vec::new();
    let mut all = true;
    for &eps in &levels {
        for &delta in &levels {
            let params = OperatorParams::new(4.0, delta, eps).unwrap();
            let c = structure_bounds_check(&params, &metric, 10_000, 8).unwrap();
            all &= c.pass;
            lam.push(c.lambda_est);
            up.push(c.upper_est);
        }
    }
    let spread = |v: &[f64]| {
        let (lo, hi) = v.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        (hi - lo) / lo
    };
    let (sl, su) = (spread(&lam), spread(&up));
    outcome(
        all && sl < 0.1 && su < 0.1,
        format!("lambda in [{:.4}, {:.4}] (spread {sl:.2e}), Lambda in [{:.4}, {:.4}] (spread {su:.2e})", min(&lam), max(&lam), min(&up), max(&up)),
    )
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

fn criterion_9() -> Outcome {
    let grid = Grid::cube(Point::new(-1.0, -1.0, -0.5), Point::new(1.0, 1.0, 0.5), 25).unwrap();
    let mask = gauge_ball_mask(Point::ORIGIN, 0.75, &grid).unwrap();
    let boundary = ScalarField::from_fn(&grid, |p| p.x + 0.5 * p.y * p.y);
    let schedule: Vec<(f64, f64)> = (0..5).map(|k| 0.5f64.powi(k)).map(|s| (s, s)).collect();
    let (_, reps) = continuation_sweep(
        &mask,
        &boundary,
        &schedule,
        &OperatorParams::default(),
        &SubRiemannianMetric::perturbed_example(),
        &SolverOptions { tol: 1e-7, ..SolverOptions::default() },
    )
    .unwrap();
    let ratio = |f: fn(&qlab::solver::SolveReport) -> f64| reps.iter().map(|r| f(r) / f(&reps[0])).fold(0.0, f64::max);
    let r = [ratio(|r| r.lip_ratio), ratio(|r| r.caccioppoli_ratio), ratio(|r| r.holder_seminorm)];
    outcome(r.iter().all(|&x| x <= 3.0), format!("max ratio to first stage (lip, caccioppoli, holder) {r:.3?} over {} stages", reps.len()))
}

/// Energy of the radial profile `log(R/N)/log(R/r)` of the gauge ring, by product
/// Simpson quadrature in `(N, φ)` with `|z|² = N² cos φ`, `4t = N² sin φ`.
fn ring_capacity_oracle(r: f64, big_r: f64) -> f64 {
    let simpson = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| {
        let m = 2000;
        let h = (b - a) / m as f64;
        let s: f64 = (0..=m).map(|k| f(a + k as f64 * h) * if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 }).sum();
        s * h / 3.0
    };
    let l = (big_r / r).ln();
    let half = std::f64::consts::FRAC_PI_2;
    simpson(r, big_r, &|n| {
        // |∇_H N|⁴ = cos²φ, dV = (π/2) N³ dN dφ.
        simpson(-half, half, &|phi| phi.cos().powi(2) / (n * l).powi(4) * half * n.powi(3))
    })
}

fn criterion_10() -> Outcome {
    let params = OperatorParams::default();
    let oracle = ring_capacity_oracle(0.5, 1.0);
    let cap_of = |r: f64, big_r: f64| {
        let (e, f, d) = ring_condenser(Point::ORIGIN, r, big_r, 48).unwrap();
        capacity(&e, &f, &d, &params, &standard()).unwrap()
    };
    let c1 = cap_of(0.5, 1.0);
    let c2 = cap_of(1.0, 2.0);
    let rel = (c1 - oracle).abs() / oracle;
    let inv = (c1 - c2).abs() / c1;
    outcome(rel <= 0.10 && inv <= 0.05, format!("cap(0.5,1) = {c1:.4} vs oracle {oracle:.4} (rel {rel:.3}); cap(1,2) = {c2:.4} (rel diff {inv:.1e})"))
}

fn polygon_loop(corners: &[(f64, f64)], step: f64) -> Vec<(f64, f64)> {
    let mut pts = vec![corners[0]];
    for w in corners.windows(2) {
        let (a, b) = (w[0], w[1]);
        let m = ((b.0 - a.0).hypot(b.1 - a.1) / step).round().max(1.0) as usize;
        pts.extend((1..=m).map(|k| {
            let s = k as f64 / m as f64;
            (a.0 + s * (b.0 - a.0), a.1 + s * (b.1 - a.1))
        }));
    }
    pts
}

fn circle_lift_error(m: usize) -> f64 {
    let pts: Vec<(f64, f64)> = (0..=m).map(|k| (k as f64 * std::f64::consts::TAU / m as f64).sin_cos()).map(|(s, c)| (c, s)).collect();
    let lift = lift_vertical(&pts, 0.0);
    (lift.last().unwrap().z - std::f64::consts::PI).abs()
}

fn criterion_11() -> Outcome {
    let square = polygon_loop(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.0)], 1e-3);
    let lift = lift_vertical(&square, 0.25);
    let dz = lift.last().unwrap().z - lift[0].z;
    let closes = (lift.last().unwrap().x, lift.last().unwrap().y) == (0.0, 0.0);
    let (e1, e2) = (circle_lift_error(1000), circle_lift_error(2000));
    let order = (e1 / e2).log2();
    outcome(
        (dz - 1.0).abs() <= 1e-6 && closes && order > 1.8,
        format!("square: dz = {dz:.12}; circle lift error {e1:.2e} -> {e2:.2e} on halving the step (order {order:.2})"),
    )
}

fn adjointness_error() -> f64 {
    let grid = Grid::new(Point::new(-0.7, -0.6, -0.5), Point::new(0.8, 0.9, 0.4), [11, 12, 13]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut random = || ScalarField::new(grid.clone(), (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let (u, v) = (random(), random());
    let measure = ScalarField::from_fn(&grid, |p| 1.0 + 0.25 * p.x * p.x);
    let h3 = grid.cell_volume();
    let dot = |a: &ScalarField, b: &ScalarField| -> f64 { a.values.iter().zip(&b.values).zip(&measure.values).map(|((x, y), w)| x * y * w * h3).sum() };
    let mut worst = 0.0f64;
    for (i, eps) in [(1, 0.0), (2, 0.0), (3, 0.3)] {
        let lhs = dot(&apply_horizontal_derivative(&u, i, eps).unwrap(), &v);
        let rhs = dot(&u, &adjoint_derivative(&v, i, eps, &measure).unwrap());
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    worst
}

fn gradient_fd_error() -> f64 {
    let grid = Grid::cube(Point::new(-1.0, -1.0, -0.5), Point::new(1.0, 1.0, 0.5), 15).unwrap();
    let mask = gauge_ball_mask(Point::ORIGIN, 0.7, &grid).unwrap();
    let metric = SubRiemannianMetric::perturbed_example();
    let params = OperatorParams::new(4.0, 0.1, 0.2).unwrap();
    let disc = Discretization::new(&mask, &metric).unwrap();
    let u: Vec<f64> = (0..grid.len()).map(|i| test_field(1, grid.point(i)) + 0.1 * (i % 7) as f64).collect();
    let grad = disc.gradient(&u, &params).unwrap();
    let p = params.p_exp;
    let nodes: Vec<usize> = mask.interior_nodes().step_by(11).collect();
    nodes
        .iter()
        .map(|&m| {
            let h = 1e-5;
            let mut w = u.clone();
            w[m] += h;
            let up = disc.energy(&w, &params).unwrap();
            w[m] -= 2.0 * h;
            let dn = disc.energy(&w, &params).unwrap();
            let fd = (up - dn) / (2.0 * h * p);
            (fd - grad[m]).abs() / grad[m].abs().max(1e-3)
        })
        .fold(0.0, f64::max)
}

fn cli_reports_identical() -> bool {
    let config = "seed = 3\n[grid]\nn = 17\n[metric]\nkind = \"perturbed\"\n[solve]\nboundary = \"x\"\ninit = \"random\"\n[qcdiag]\nmap = \"rotation:0.4\"\nn = 20\n";
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("exp.toml");
        std::fs::write(&cfg, config).unwrap();
        let out = dir.path().join("report.json");
        let argv = ["qlab", "report", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        assert_eq!(qlab::cli::run(argv), 0);
        (std::fs::read(&out).unwrap(), std::fs::read(dir.path().join("report_solve.field")).unwrap())
    };
    run() == run()
}

fn criterion_12() -> Outcome {
    let adj = adjointness_error();
    let grad = gradient_fd_error();
    let det = cli_reports_identical();
    outcome(adj <= 1e-12 && grad <= 1e-6 && det, format!("adjointness {adj:.1e}; energy gradient vs FD {grad:.1e}; CLI reports bitwise identical: {det}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("conformal maps pass the condition battery, shear fails it", criterion_1),
        ("Q-energy invariance under dilation", criterion_2),
        ("weak-form morphism property", criterion_3),
        ("linear coordinate solves the p-Laplacian exactly", criterion_4),
        ("log-gauge fundamental solution", criterion_5),
        ("harmonic coordinate decay", criterion_6),
        ("Q-harmonic coordinate decay", criterion_7),
        ("structure constants uniform in (eps, delta)", criterion_8),
        ("regularity monitors along the continuation sweep", criterion_9),
        ("ring capacity and dilation invariance", criterion_10),
        ("horizontal lift of closed loops", criterion_11),
        ("adjointness, gradient consistency, determinism", criterion_12),
    ];
    let mut failures = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = f();
        failures += usize::from(!o.pass);
        println!("criterion {:>2} {}: {} ({:.1}s) {}", k + 1, if o.pass { "PASS" } else { "FAIL" }, name, t.elapsed().as_secs_f64(), o.detail);
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
