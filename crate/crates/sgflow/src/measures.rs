//! Initial measures and sweep families.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgflow_core::vortex::sample_patch;
use sgflow_core::{DiscreteMeasure, Vec2};

use crate::config::{DensitySpec, MeasureSpec};
use crate::error::{CliError, Result};

const GAUSS8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (-0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
];
const ANGLES: usize = 32;

/// Builds the initial measure; density-grid masses are scaled to `total`.
pub fn build_measure(spec: &MeasureSpec, total: f64) -> Result<DiscreteMeasure> {
    match spec {
        MeasureSpec::File { path } => {
            let text = std::fs::read_to_string(path)
                .map_err(CliError::io(format!("reading measure {}", path.display())))?;
            Ok(DiscreteMeasure::from_json(&text)?)
        }
        MeasureSpec::VortexPatch {
            epsilon,
            n,
            sampling,
        } => Ok(sample_patch(*epsilon, 0.0, *n, *sampling)?),
        MeasureSpec::DensityGrid {
            density,
            count,
            radius,
        } => {
            let points = square_lattice(*count, *radius);
            let masses = normalized(points.iter().map(|y| density.eval(*y)).collect(), total)?;
            Ok(DiscreteMeasure::new(points, masses, *radius)?)
        }
    }
}

/// Square lattice through the origin with about `count` points in `B(0, radius)`.
pub fn square_lattice(count: usize, radius: f64) -> Vec<Vec2> {
    let a = (PI * radius * radius / count as f64).sqrt();
    let m = (radius / a).ceil() as i64;
    let mut out = Vec::new();
    for j in -m..=m {
        for i in -m..=m {
            let y = Vec2::new(i as f64 * a, j as f64 * a);
            if y.norm() <= radius {
                out.push(y);
            }
        }
    }
    out
}

/// `(g ∗ η_δ)(y)` with the bump `η_δ ∝ (1 − |z|²/δ²)³` on `B(0, δ)`, by polar quadrature.
pub fn mollified_density(density: &DensitySpec, y: Vec2, width: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (u, wu) in GAUSS8 {
        let r = 0.5 * (u + 1.0);
        let s = 1.0 - r * r;
        let w = wu * r * s * s * s;
        for k in 0..ANGLES {
            let th = 2.0 * PI * k as f64 / ANGLES as f64;
            num += w * density.eval(y + Vec2::new(th.cos(), th.sin()) * (r * width));
            den += w;
        }
    }
    num / den
}

/// The density-grid measure with masses taken from the mollified density.
pub fn mollified_measure(
    base: &DiscreteMeasure,
    density: &DensitySpec,
    width: f64,
) -> Result<DiscreteMeasure> {
    let values = base
        .points
        .iter()
        .map(|y| mollified_density(density, *y, width))
        .collect();
    let masses = normalized(values, base.total_mass())?;
    Ok(DiscreteMeasure::new(base.points.clone(), masses, base.r0)?)
}

/// `count` particles drawn without replacement, masses rescaled to the
/// original total, with their indices in `mu`.
pub fn subsample(
    mu: &DiscreteMeasure,
    count: usize,
    seed: u64,
) -> Result<(DiscreteMeasure, Vec<usize>)> {
    if count > mu.len() {
        return Err(CliError::Invalid(format!(
            "subsample of {count} particles from a measure with {}",
            mu.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, mu.len(), count).into_vec();
    idx.sort_unstable();
    let points = idx.iter().map(|&i| mu.points[i]).collect();
    let masses = normalized(idx.iter().map(|&i| mu.masses[i]).collect(), mu.total_mass())?;
    Ok((DiscreteMeasure::new(points, masses, mu.r0)?, idx))
}

/// `Σ |a_i − b_i|` on a common support, else the L¹ distance of `bins × bins`
/// histograms over `[−R, R]²`.
pub fn l1_gap(a: &DiscreteMeasure, b: &DiscreteMeasure, bins: usize) -> f64 {
    if a.points == b.points {
        return a
            .masses
            .iter()
            .zip(&b.masses)
            .map(|(x, y)| (x - y).abs())
            .sum();
    }
    let r = a.r0.max(b.r0);
    let hist = |mu: &DiscreteMeasure| {
        let mut h = vec![0.0; bins * bins];
        let cell =
            |v: f64| (((v + r) / (2.0 * r) * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        for (p, m) in mu.points.iter().zip(&mu.masses) {
            h[cell(p.y) * bins + cell(p.x)] += m;
        }
        h
    };
    hist(a)
        .iter()
        .zip(hist(b))
        .map(|(x, y)| (x - y).abs())
        .sum()
}

fn normalized(values: Vec<f64>, total: f64) -> Result<Vec<f64>> {
    let sum: f64 = values.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(CliError::Invalid(format!(
            "density has total {sum} on the lattice"
        )));
    }
    Ok(values.into_iter().map(|v| v * total / sum).collect())
}
