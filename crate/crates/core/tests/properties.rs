use proptest::prelude::*;
use qlab::energy::{Discretization, OperatorParams};
use qlab::grid::{adjoint_derivative, apply_horizontal_derivative, gauge_ball_mask, Grid, ScalarField};
use qlab::heis::{dilate, koranyi_gauge, Point, SubRiemannianMetric};
use qlab::qcdiag::MapSpec;

fn point(r: f64) -> impl Strategy<Value = Point> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Point::new(x, y, z))
}

fn close(a: Point, b: Point, tol: f64) -> bool {
    (a.x - b.x).abs() <= tol && (a.y - b.y).abs() <= tol && (a.z - b.z).abs() <= tol
}

fn map_spec() -> impl Strategy<Value = MapSpec> {
    prop_oneof![
        point(1.0).prop_map(|g| MapSpec::LeftTranslation { g }),
        (0.3..3.0f64).prop_map(|lambda| MapSpec::Dilation { lambda }),
        (-3.0..3.0f64).prop_map(|theta| MapSpec::Rotation { theta }),
        (0.5..2.0f64, 0.5..2.0f64).prop_map(|(a, b)| MapSpec::Shear { a, b }),
    ]
}

fn small_grid() -> Grid {
    Grid::new(Point::new(-0.8, -0.7, -0.4), Point::new(0.7, 0.9, 0.5), [9, 10, 11]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn group_axioms(p in point(2.0), q in point(2.0), r in point(2.0)) {
        prop_assert!(close(p.mul(q).mul(r), p.mul(q.mul(r)), 1e-12));
        prop_assert!(close(p.mul(p.inverse()), Point::ORIGIN, 1e-12));
        prop_assert!(close(Point::ORIGIN.mul(p), p, 0.0));
    }

    #[test]
    fn dilations_are_automorphisms_scaling_the_gauge(p in point(2.0), q in point(2.0), lambda in 0.1..5.0f64) {
        let d = |x: Point| dilate(lambda, x).unwrap();
        prop_assert!(close(d(p.mul(q)), d(p).mul(d(q)), 1e-11));
        let n = koranyi_gauge(p);
        prop_assert!((koranyi_gauge(d(p)) - lambda * n).abs() <= 1e-12 * (1.0 + lambda * n));
    }

    #[test]
    fn discrete_derivatives_are_adjoint(seed in any::<u64>(), i in 1usize..=3, eps in 0.0..1.0f64) {
        use rand::{Rng, SeedableRng};
        let g = small_grid();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut random = || ScalarField::new(g.clone(), (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (u, v) = (random(), random());
        let w = ScalarField::from_fn(&g, |p| 1.0 + 0.5 * p.x * p.x + 0.2 * p.y);
        let dot = |a: &ScalarField, b: &ScalarField| -> f64 { a.values.iter().zip(&b.values).zip(&w.values).map(|((x, y), m)| x * y * m).sum() };
        let lhs = dot(&apply_horizontal_derivative(&u, i, eps).unwrap(), &v);
        let rhs = dot(&u, &adjoint_derivative(&v, i, eps, &w).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn energy_is_convex_along_segments(seed in any::<u64>(), t in 0.0..1.0f64, p in 2.0..5.0f64, delta in 0.0..0.5f64) {
        use rand::{Rng, SeedableRng};
        let g = Grid::cube(Point::new(-0.8, -0.8, -0.3), Point::new(0.8, 0.8, 0.3), 13).unwrap();
        let mask = gauge_ball_mask(Point::ORIGIN, 0.5, &g).unwrap();
        let disc = Discretization::new(&mask, &SubRiemannianMetric::perturbed_example()).unwrap();
        let params = OperatorParams::new(p, delta, 0.1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mid: Vec<f64> = u.iter().zip(&v).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let e = |x: &[f64]| disc.energy(x, &params).unwrap();
        let chord = (1.0 - t) * e(&u) + t * e(&v);
        prop_assert!(e(&mid) <= chord * (1.0 + 1e-12) + 1e-14);
    }

    #[test]
    fn energy_gradient_matches_finite_differences(seed in any::<u64>(), p in 2.0..5.0f64) {
        use rand::{Rng, SeedableRng};
        let g = Grid::cube(Point::new(-0.8, -0.8, -0.3), Point::new(0.8, 0.8, 0.3), 13).unwrap();
        let mask = gauge_ball_mask(Point::ORIGIN, 0.5, &g).unwrap();
        let disc = Discretization::new(&mask, &SubRiemannianMetric::standard()).unwrap();
        let params = OperatorParams::new(p, 0.2, 0.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = disc.gradient(&u, &params).unwrap();
        let m = mask.interior_nodes().nth(rng.gen_range(0..mask.count())).unwrap();
        let h = 1e-5;
        let mut w = u.clone();
        w[m] += h;
        let up = disc.energy(&w, &params).unwrap();
        w[m] -= 2.0 * h;
        let dn = disc.energy(&w, &params).unwrap();
        let fd = (up - dn) / (2.0 * h * p);
        prop_assert!((fd - grad[m]).abs() <= 1e-6 * (1.0 + grad[m].abs()));
    }

    #[test]
    fn map_inverse_and_chain_rule(f in map_spec(), g in map_spec(), p in point(1.0)) {
        prop_assert!(close(f.inverse().apply(f.apply(p)), p, 1e-10));
        let fg = MapSpec::Compose { maps: vec![g.clone(), f.clone()] };
        prop_assert!(close(fg.apply(p), f.apply(g.apply(p)), 1e-12));
        let chain = fg.differential(p);
        prop_assert!((chain - f.differential(g.apply(p)) * g.differential(p)).abs().max() <= 1e-10 * (1.0 + chain.abs().max()));
        let h = 1e-6;
        for a in 0..3 {
            let mut e = [0.0; 3];
            e[a] = h;
            let fwd = fg.apply(Point::new(p.x + e[0], p.y + e[1], p.z + e[2])).to_vector();
            let bwd = fg.apply(Point::new(p.x - e[0], p.y - e[1], p.z - e[2])).to_vector();
            let col = (fwd - bwd) / (2.0 * h);
            prop_assert!((col - chain.column(a)).abs().max() <= 1e-5 * (1.0 + chain.abs().max()));
        }
    }
}
