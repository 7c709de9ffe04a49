use std::f64::consts::PI;

use proptest::prelude::*;
use sgflow_core::ot::solve_weights;
use sgflow_core::potential::{fenchel_gap, legendre_numeric, ConvexPotential, LegendreDual};
use sgflow_core::vortex::{exact_grad_p, sample_patch, PatchSampling, Z0};
use sgflow_core::*;

fn cloud(coords: &[(f64, f64)]) -> Vec<Vec2> {
    coords.iter().map(|(x, y)| Vec2::new(*x, *y)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn potential_is_convex_along_segments(
        coords in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..8),
        psi in proptest::collection::vec(-0.5f64..0.5, 8),
        a in (-1.0f64..1.0, -1.0f64..1.0),
        b in (-1.0f64..1.0, -1.0f64..1.0),
        lambda in 0.0f64..1.0,
    ) {
        let grid = PhysicalDomain::unit_disk(16).quadrature();
        let slopes = cloud(&coords);
        let n = slopes.len();
        let pot = ConvexPotential::new(&grid, slopes, psi[..n].to_vec()).unwrap();
        let (x, y) = (Vec2::new(a.0, a.1), Vec2::new(b.0, b.1));
        let mid = x * lambda + y * (1.0 - lambda);
        prop_assert!(pot.eval(mid) <= lambda * pot.eval(x) + (1.0 - lambda) * pot.eval(y) + 1e-12);
    }

    #[test]
    fn double_conjugate_recovers_the_potential_on_nodes(
        coords in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..8),
        psi in proptest::collection::vec(-0.3f64..0.3, 8),
    ) {
        let grid = PhysicalDomain::unit_disk(24).quadrature().with_rule(MassRule::Nodal);
        let slopes = cloud(&coords);
        let n = slopes.len();
        let pot = ConvexPotential::new(&grid, slopes.clone(), psi[..n].to_vec()).unwrap();
        let star = legendre_numeric(&pot, &grid, &slopes).unwrap();
        // P* never exceeds ψ and attains it on every cell that holds a node
        let owned: Vec<bool> = (0..n).map(|i| grid.nodes.iter().any(|x| pot.argmax(*x) == i)).collect();
        for i in 0..n {
            prop_assert!(star[i] <= psi[i] + 1e-12);
            if owned[i] {
                prop_assert!((star[i] - psi[i]).abs() < 1e-12);
            }
        }
        // P** at the nodes, by brute force over the particles
        for x in &grid.nodes {
            let pss = (0..n).map(|i| x.dot(slopes[i]) - star[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((pss - pot.eval(*x)).abs() < 1e-12);
        }
    }
}

#[test]
fn fenchel_young_holds_with_equality_on_the_graph() {
    let grid = PhysicalDomain::unit_disk(48).quadrature();
    let mu = sample_patch(0.5, 0.0, 60, PatchSampling::Halton { skip: 3 }).unwrap();
    let sol = solve_weights(&grid, &mu, &SolverOptions::default()).unwrap();
    let pot = ConvexPotential::from_solution(mu.points.clone(), &sol, &grid).unwrap();
    let dual = LegendreDual::new(&pot);
    for x in grid.nodes.iter().step_by(37) {
        let i = pot.argmax(*x);
        assert!(
            fenchel_gap(&pot, &dual, &grid, *x, mu.points[i])
                .unwrap()
                .abs()
                < 1e-12
        );
        for y in [
            Vec2::new(0.3, -0.2),
            mu.points[(i + 1) % mu.len()],
            Vec2::new(1.4, 0.1),
        ] {
            assert!(fenchel_gap(&pot, &dual, &grid, *x, y).unwrap() >= -1e-12);
        }
    }
}

#[test]
fn solved_patch_gradient_approximates_the_exact_map() {
    let eps = 0.5;
    let grid = PhysicalDomain::unit_disk(96).quadrature();
    let mu = sample_patch(eps, 0.0, 400, PatchSampling::Halton { skip: 0 }).unwrap();
    let sol = solve_weights(&grid, &mu, &SolverOptions::default()).unwrap();
    let pot = ConvexPotential::from_solution(mu.points.clone(), &sol, &grid).unwrap();
    let mut sq = 0.0;
    for x in &grid.nodes {
        sq += pot.grad(*x).dist(exact_grad_p(*x, Z0, eps)).powi(2) * grid.node_weight();
    }
    // particle spacing in the patch is about ε·sqrt(π/n)
    let l2 = (sq / PI).sqrt();
    assert!(l2 < eps * (PI / 400.0f64).sqrt(), "{l2}");
    let dual = LegendreDual::new(&pot);
    for i in 0..mu.len() {
        let c = dual.grad_p_star(i).unwrap();
        // ∇P*(y) = (y − z₀)/ε inside the patch
        assert!(c.dist((mu.points[i] - Z0) * (1.0 / eps)) < 0.15, "{i}");
    }
}

#[test]
fn json_round_trip_keeps_the_function() {
    let grid = PhysicalDomain::unit_disk(32).quadrature();
    let pot = ConvexPotential::new(
        &grid,
        cloud(&[(0.1, 0.2), (-0.5, 0.3), (0.4, -0.6)]),
        vec![0.3, -0.1, 0.25],
    )
    .unwrap();
    let back = ConvexPotential::from_json(&grid, &pot.to_json().unwrap()).unwrap();
    for x in grid.nodes.iter().step_by(11) {
        assert!((back.eval(*x) - pot.eval(*x)).abs() < 1e-12);
        assert_eq!(back.grad(*x), pot.grad(*x));
    }
    assert!(ConvexPotential::from_json(
        &grid,
        r#"{"slopes":[],"intercepts":[],"gauge":0,"extra":1}"#
    )
    .is_err());
}
