use std::f64::consts::PI;

use proptest::prelude::*;
use sgflow_core::ot::{pixel_shares, solve_semidiscrete, solve_weights, tessellate_weighted};
use sgflow_core::vortex::{sample_patch, PatchSampling};
use sgflow_core::*;

/// Midpoint-rule split of the pixel over an `m × m` subdivision.
fn pixel_oracle(x: Vec2, h: f64, points: &[Vec2], psi: &[f64], m: usize) -> Vec<(f64, Vec2)> {
    let mut out = vec![(0.0, Vec2::ZERO); points.len()];
    let cell = h / m as f64;
    for i in 0..m {
        for j in 0..m {
            let y = x + Vec2::new(
                -0.5 * h + (i as f64 + 0.5) * cell,
                -0.5 * h + (j as f64 + 0.5) * cell,
            );
            let best = (0..points.len())
                .max_by(|&a, &b| {
                    (y.dot(points[a]) - psi[a])
                        .partial_cmp(&(y.dot(points[b]) - psi[b]))
                        .unwrap()
                })
                .unwrap();
            out[best].0 += 1.0;
            out[best].1 += y;
        }
    }
    let k = (m * m) as f64;
    out.into_iter()
        .map(|(c, s)| {
            if c > 0.0 {
                (c / k, s * (1.0 / c))
            } else {
                (0.0, Vec2::ZERO)
            }
        })
        .collect()
}

#[test]
fn pixel_split_matches_refined_midpoint_rule() {
    let h = 0.1;
    let points = [
        Vec2::new(0.0, 0.0),
        Vec2::new(1.0, 0.2),
        Vec2::new(-0.3, 0.9),
        Vec2::new(0.4, -0.8),
    ];
    let candidates = [0u32, 1, 2, 3];
    for (cx, cy) in [
        (0.3, 0.2),
        (0.02, 0.01),
        (0.45, 0.05),
        (0.5, 0.5),
        (-0.1, 0.4),
        (0.2, -0.3),
    ] {
        let x = Vec2::new(cx, cy);
        // junction of cells 0, 1 and 2 near x, or a single interface, or none
        let psi = [
            0.0,
            x.dot(points[1]) + 0.01,
            x.dot(points[2]) - 0.005,
            x.dot(points[3]) + 0.3,
        ];
        let shares = pixel_shares(x, h, &points, &psi, &candidates);
        let oracle = pixel_oracle(x, h, &points, &psi, 1200);
        let total: f64 = shares.iter().map(|s| s.1).sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
        for (cell, frac, centroid) in shares {
            assert!(
                (frac - oracle[cell].0).abs() < 2e-3,
                "{x:?} cell {cell}: {frac} vs {}",
                oracle[cell].0
            );
            if frac > 0.01 {
                assert!(
                    centroid.dist(oracle[cell].1) < 2e-3 * h / frac,
                    "{x:?} cell {cell}"
                );
            }
        }
    }
}

#[test]
fn subpixel_masses_are_continuous_in_the_weights() {
    let grid = PhysicalDomain::unit_disk(64).quadrature();
    let points = [
        Vec2::new(-0.3, 0.05),
        Vec2::new(0.35, -0.1),
        Vec2::new(0.0, 0.4),
    ];
    let nodal = grid.clone().with_rule(MassRule::Nodal);
    let delta = 1e-5;
    let largest_jump = |g: &QuadratureGrid| {
        let mut prev = tessellate_weighted(g, &points, &[0.0; 3], None).cell_masses;
        let mut biggest = 0.0f64;
        for k in 1..=2000 {
            let psi = [0.0, k as f64 * delta, 0.0];
            let m = tessellate_weighted(g, &points, &psi, None).cell_masses;
            biggest = biggest.max((m[1] - prev[1]).abs());
            prev = m;
        }
        biggest
    };
    let h2 = grid.node_weight();
    assert!(largest_jump(&grid) < 0.1 * h2);
    assert!(largest_jump(&nodal) >= 0.99 * h2);
}

#[test]
fn nodal_masses_count_nodes_exactly() {
    let grid = PhysicalDomain::unit_disk(48)
        .quadrature()
        .with_rule(MassRule::Nodal);
    let points = [
        Vec2::new(-0.3, 0.05),
        Vec2::new(0.35, -0.1),
        Vec2::new(0.0, 0.4),
    ];
    let psi = [0.01, -0.02, 0.03];
    let tess = tessellate_weighted(&grid, &points, &psi, None);
    let mut counts = [0usize; 3];
    for (k, x) in grid.nodes.iter().enumerate() {
        let best = (0..3)
            .max_by(|&a, &b| {
                let sa = x.dot(points[a]) - psi[a];
                let sb = x.dot(points[b]) - psi[b];
                sa.partial_cmp(&sb).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        assert_eq!(tess.assignment[k] as usize, best);
        counts[best] += 1;
    }
    for i in 0..3 {
        assert_eq!(tess.cell_masses[i], counts[i] as f64 * grid.node_weight());
    }
}

/// Masses and centroids of the Laguerre cells by a `refine²`-times finer midpoint rule.
fn brute_force_cells(
    domain: &PhysicalDomain,
    points: &[Vec2],
    psi: &[f64],
    refine: usize,
) -> (Vec<f64>, Vec<Vec2>) {
    let fine = PhysicalDomain::new(domain.shape.clone(), domain.s, domain.n_q * refine)
        .unwrap()
        .quadrature();
    let w = fine.node_weight();
    let mut mass = vec![0.0; points.len()];
    let mut moment = vec![Vec2::ZERO; points.len()];
    for x in &fine.nodes {
        let mut best = 0;
        for i in 1..points.len() {
            if x.dot(points[i]) - psi[i] > x.dot(points[best]) - psi[best] {
                best = i;
            }
        }
        mass[best] += w;
        moment[best] += *x * w;
    }
    let centroids = moment
        .iter()
        .zip(&mass)
        .map(|(p, m)| *p * (1.0 / m))
        .collect();
    (mass, centroids)
}

fn check_against_brute_force(points: Vec<Vec2>, masses: Vec<f64>) {
    let domain = PhysicalDomain::unit_disk(96);
    let grid = domain.quadrature();
    let hq = grid.spacing();
    let mu = DiscreteMeasure::new(points, masses, 1.0).unwrap();
    let sol = solve_weights(&grid, &mu, &SolverOptions::default()).unwrap();
    let (mass, centroids) = brute_force_cells(&domain, &mu.points, &sol.weights.0, 8);
    for i in 0..mu.len() {
        assert!(
            (sol.tess.cell_masses[i] - mass[i]).abs() <= 2.0 * hq * mass[i],
            "{i}"
        );
        assert!(
            sol.tess.cell_centroids[i].dist(centroids[i]) <= 2.0 * hq,
            "{i}"
        );
    }
}

#[test]
fn symmetric_pair_matches_brute_force() {
    check_against_brute_force(
        vec![Vec2::new(-0.4, 0.0), Vec2::new(0.4, 0.0)],
        vec![PI / 2.0; 2],
    );
    let (l, r) = (Vec2::new(-0.4, 0.0), Vec2::new(0.4, 0.0));
    let grid = PhysicalDomain::unit_disk(96).quadrature();
    let mu = DiscreteMeasure::new(vec![l, r], vec![PI / 2.0; 2], 1.0).unwrap();
    let sol = solve_weights(&grid, &mu, &SolverOptions::default()).unwrap();
    // half disks: centroids at ±4/(3π)
    let c = 4.0 / (3.0 * PI);
    assert!(sol.tess.cell_centroids[1].dist(Vec2::new(c, 0.0)) < 2.0 * grid.spacing());
    assert!(sol.tess.cell_centroids[0].dist(Vec2::new(-c, 0.0)) < 2.0 * grid.spacing());
}

#[test]
fn symmetric_triple_matches_brute_force_and_sectors() {
    let pts: Vec<Vec2> = (0..3)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / 3.0 + 0.3;
            Vec2::new(0.5 * a.cos(), 0.5 * a.sin())
        })
        .collect();
    check_against_brute_force(pts.clone(), vec![PI / 3.0; 3]);
    let grid = PhysicalDomain::unit_disk(96).quadrature();
    let mu = DiscreteMeasure::new(pts.clone(), vec![PI / 3.0; 3], 1.0).unwrap();
    let sol = solve_weights(&grid, &mu, &SolverOptions::default()).unwrap();
    // 120° sectors have centroid radius 4 sin(π/3) / (3 · 2π/3)
    let r = 4.0 * (PI / 3.0).sin() / (2.0 * PI);
    for (p, c) in pts.iter().zip(&sol.tess.cell_centroids) {
        assert!(c.dist(*p * (r / 0.5)) < 2.0 * grid.spacing(), "{c:?}");
    }
    let w = &sol.weights.0;
    assert!(
        (w[0] - w[1]).abs() < 1e-3 && (w[1] - w[2]).abs() < 1e-3,
        "{w:?}"
    );
}

#[test]
fn cold_start_converges_within_fifty_iterations() {
    let grid = PhysicalDomain::unit_disk(128).quadrature();
    for (eps, n) in [(1.0, 500), (0.5, 500), (0.25, 500), (0.1, 500), (0.5, 1500)] {
        let mu = sample_patch(eps, 0.0, n, PatchSampling::Halton { skip: 0 }).unwrap();
        let sol = solve_weights(&grid, &mu, &SolverOptions::default()).unwrap();
        assert!(
            sol.report.iterations <= 50,
            "eps {eps} n {n}: {}",
            sol.report.iterations
        );
        assert!(sol.report.max_mass_error <= 1e-3 * PI);
    }
}

#[test]
fn weighted_solve_balances_density() {
    let grid = PhysicalDomain::unit_disk(64).quadrature();
    let density: Vec<f64> = grid.nodes.iter().map(|x| 1.0 + 0.5 * x.x).collect();
    let total = grid.integrate(&density);
    let pts = vec![
        Vec2::new(-0.2, 0.0),
        Vec2::new(0.2, 0.1),
        Vec2::new(0.0, -0.3),
    ];
    let masses = vec![total / 3.0; 3];
    let opts = SolverOptions {
        tol: 1e-6,
        ..Default::default()
    };
    let sol = solve_semidiscrete(&grid, &pts, &masses, Some(&density), None, &opts).unwrap();
    for m in &sol.tess.cell_masses {
        assert!((m - total / 3.0).abs() <= 1e-6 * total);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn raising_a_weight_never_raises_its_mass(
        coords in proptest::collection::vec((-0.8f64..0.8, -0.8f64..0.8), 2..6),
        psi in proptest::collection::vec(-0.2f64..0.2, 6),
        i in 0usize..6,
        delta in 1e-4f64..0.3,
        nodal in any::<bool>(),
    ) {
        let rule = if nodal { MassRule::Nodal } else { MassRule::Subpixel };
        let grid = PhysicalDomain::unit_disk(32).quadrature().with_rule(rule);
        let points: Vec<Vec2> = coords.iter().map(|(x, y)| Vec2::new(*x, *y)).collect();
        let n = points.len();
        let i = i % n;
        let psi = psi[..n].to_vec();
        let before = tessellate_weighted(&grid, &points, &psi, None).cell_masses;
        let mut raised = psi.clone();
        raised[i] += delta;
        let after = tessellate_weighted(&grid, &points, &raised, None).cell_masses;
        prop_assert!(after[i] <= before[i] + 1e-12);
        let slack = 1e-12;
        for j in (0..n).filter(|&j| j != i) {
            prop_assert!(after[j] + slack >= before[j]);
        }
        let total: f64 = after.iter().sum();
        prop_assert!((total - grid.total_weight()).abs() < 1e-9);
    }
}

#[test]
fn strip_thinner_than_a_pixel_keeps_its_area() {
    let grid = PhysicalDomain::unit_disk(32).quadrature();
    let h = grid.spacing();
    let y0 = grid
        .nodes
        .iter()
        .map(|x| x.y)
        .filter(|y| *y > 0.0)
        .fold(f64::INFINITY, f64::min);
    let row = grid
        .nodes
        .iter()
        .filter(|x| (x.y - y0).abs() < 1e-12)
        .count();
    let (lo, hi) = (y0 + 0.2 * h, y0 + 0.3 * h);
    let points = vec![
        Vec2::new(0.0, -1.0),
        Vec2::new(0.0, 0.0),
        Vec2::new(0.0, 1.0),
    ];
    let psi = vec![0.0, lo, lo + hi];
    let tess = tessellate_weighted(&grid, &points, &psi, None);
    let expect = row as f64 * h * (hi - lo);
    assert!(
        (tess.cell_masses[1] - expect).abs() < 1e-12,
        "{} vs {expect}",
        tess.cell_masses[1]
    );
    assert!((tess.cell_centroids[1].y - 0.5 * (lo + hi)).abs() < 1e-12);
    // the strip responds continuously to its weight
    let mut raised = psi.clone();
    raised[1] += 1e-9;
    let after = tessellate_weighted(&grid, &points, &raised, None);
    assert!((after.cell_masses[1] - expect).abs() < 1e-7);
}

#[test]
fn lattice_with_gaussian_masses_converges() {
    let grid = PhysicalDomain::unit_disk(64).quadrature();
    let a = (PI * 0.81 / 300.0).sqrt();
    let mut points = Vec::new();
    for j in -10i32..=10 {
        for i in -10i32..=10 {
            let y = Vec2::new(f64::from(i) * a, f64::from(j) * a);
            if y.norm() <= 0.9 {
                points.push(y);
            }
        }
    }
    let g: Vec<f64> = points
        .iter()
        .map(|y| (-((y.x - 0.1).powi(2) / 0.245 + (y.y + 0.05).powi(2) / 0.08)).exp() + 0.05)
        .collect();
    let s: f64 = g.iter().sum();
    let masses: Vec<f64> = g.iter().map(|v| v * grid.total_weight() / s).collect();
    let opts = SolverOptions {
        tol: 1e-5,
        ..Default::default()
    };
    let sol = solve_semidiscrete(&grid, &points, &masses, None, None, &opts).unwrap();
    assert!(sol.report.iterations <= 20, "{}", sol.report.iterations);
}
