//! Closed-form rotating-patch solutions on the unit disk.
//!
//! The dual vorticity `α^ε = ε^{-2} χ_{B(z(t), ε)}` with `z(t) = (cos t, sin t)`
//! is transported by a rigid rotation about `z(t)` at angular rate
//! `(ε − 1)/ε`, and the physical flow is the rotation of the disk by the same
//! angle. The rate diverges as `ε → 0`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};
use crate::measure::{DiscreteMeasure, PhysicalDomain};
use crate::ot::{relax_centroidal, SolverOptions};
use crate::sum::KahanSum;
use crate::vec2::Vec2;

pub const Z0: Vec2 = Vec2::new(1.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VortexParams {
    pub epsilon: f64,
}

impl VortexParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(SgError::InvalidArgument(format!(
                "epsilon must lie in (0, 1], got {epsilon}"
            )));
        }
        Ok(VortexParams { epsilon })
    }

    /// Total patch mass; always `π` because the density is `ε^{-2}` on a ball of radius `ε`.
    pub fn mass(&self) -> f64 {
        PI
    }

    pub fn rate(&self) -> f64 {
        angular_rate(self.epsilon)
    }
}

/// Patch center `z(t) = (cos t, sin t)`.
pub fn center(t: f64) -> Vec2 {
    Vec2::new(t.cos(), t.sin())
}

/// Rotation rate `(ε − 1)/ε` of the patch about its center, and of the physical flow.
pub fn angular_rate(eps: f64) -> f64 {
    (eps - 1.0) / eps
}

/// `P̄^ε(x) = z̄·x + ε|x|²/2`.
pub fn exact_p(x: Vec2, zbar: Vec2, eps: f64) -> f64 {
    zbar.dot(x) + 0.5 * eps * x.norm_sq()
}

/// `∇P̄^ε(x) = z̄ + εx`.
pub fn exact_grad_p(x: Vec2, zbar: Vec2, eps: f64) -> Vec2 {
    zbar + x * eps
}

/// Legendre transform of `P̄^ε` over the unit disk.
pub fn exact_p_star(y: Vec2, zbar: Vec2, eps: f64) -> f64 {
    let r = (y - zbar).norm();
    if r <= eps {
        r * r / (2.0 * eps)
    } else {
        r - 0.5 * eps
    }
}

/// `∇(P̄^ε)*(y)`: `(y − z̄)/ε` inside `B(z̄, ε)`, the unit vector `(y − z̄)/|y − z̄|` outside.
pub fn exact_grad_p_star(y: Vec2, zbar: Vec2, eps: f64) -> Vec2 {
    let d = y - zbar;
    let r = d.norm();
    if r <= eps {
        d / eps
    } else {
        d / r
    }
}

/// Exact dual flow for markers starting in `B(z0, ε)`.
pub fn exact_phi(y0: Vec2, t: f64, eps: f64) -> Result<Vec2> {
    if (y0 - Z0).norm() > eps * (1.0 + 1e-9) {
        return Err(SgError::InvalidArgument(format!(
            "marker ({}, {}) lies outside the initial patch",
            y0.x, y0.y
        )));
    }
    Ok(center(t) + (y0 - Z0).rotated(angular_rate(eps) * t))
}

/// Exact physical flow: rotation of `x` by `((ε − 1)/ε) t` about the origin.
pub fn exact_f(x: Vec2, t: f64, eps: f64) -> Vec2 {
    x.rotated(angular_rate(eps) * t)
}

/// `Z(x, t) = ∇P^ε_t(F_t(x)) = z(t) + ε F_t(x)`.
pub fn exact_z(x: Vec2, t: f64, eps: f64) -> Vec2 {
    center(t) + exact_f(x, t, eps) * eps
}

/// Angle `θ` minimizing `Σ w |F(x) − R_θ x|²` over the nodes.
pub fn best_rotation_angle(nodes: &[Vec2], images: &[Vec2], weight: f64) -> f64 {
    let mut c = KahanSum::new();
    let mut s = KahanSum::new();
    for (x, f) in nodes.iter().zip(images) {
        c.add(weight * x.dot(*f));
        s.add(weight * x.cross(*f));
    }
    s.value().atan2(c.value())
}

/// Least-squares slope through the origin of unwrapped angles against time.
pub fn fit_rotation_rate(times: &[f64], angles: &[f64]) -> f64 {
    let mut unwrapped = Vec::with_capacity(angles.len());
    let mut prev = 0.0;
    let mut offset = 0.0;
    for &a in angles {
        let mut v = a + offset;
        while v - prev > PI {
            v -= 2.0 * PI;
            offset -= 2.0 * PI;
        }
        while v - prev < -PI {
            v += 2.0 * PI;
            offset += 2.0 * PI;
        }
        unwrapped.push(v);
        prev = v;
    }
    let num: f64 = times.iter().zip(&unwrapped).map(|(t, a)| t * a).sum();
    let den: f64 = times.iter().map(|t| t * t).sum();
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// How particle positions in the patch are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PatchSampling {
    /// Halton points (bases 2, 3) starting after `skip` leading terms.
    Halton { skip: u64 },
    /// Independent uniform points from a seeded generator.
    Uniform { seed: u64 },
    /// Halton points moved to the centroids of their equal-mass Laguerre
    /// cells in the unit disk, repeated `iterations` times on a quadrature
    /// of resolution `n_q`.
    Centroidal {
        skip: u64,
        iterations: usize,
        n_q: usize,
    },
}

impl Default for PatchSampling {
    fn default() -> Self {
        PatchSampling::Halton { skip: 0 }
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Points of the unit disk (area-preserving polar map of unit-square samples).
pub fn disk_points(n: usize, sampling: PatchSampling) -> Result<Vec<Vec2>> {
    let square: Vec<(f64, f64)> = match sampling {
        PatchSampling::Centroidal {
            skip,
            iterations,
            n_q,
        } => {
            let start = disk_points(n, PatchSampling::Halton { skip })?;
            let grid = PhysicalDomain::unit_disk(n_q).quadrature();
            let opts = SolverOptions {
                tol: 1e-4,
                ..Default::default()
            };
            return relax_centroidal(&grid, start, &vec![PI / n as f64; n], iterations, &opts);
        }
        PatchSampling::Halton { skip } => (0..n as u64)
            .map(|k| {
                let i = k + skip + 1;
                (radical_inverse(i, 2), radical_inverse(i, 3))
            })
            .collect(),
        PatchSampling::Uniform { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| (rng.gen::<f64>(), rng.gen::<f64>()))
                .collect()
        }
    };
    Ok(square
        .into_iter()
        .map(|(u, v)| {
            let r = u.sqrt();
            let th = 2.0 * PI * v;
            Vec2::new(r * th.cos(), r * th.sin())
        })
        .collect())
}

/// `n` equal-mass particles in `B(z(t), ε)` with total mass `π`.
pub fn sample_patch(
    eps: f64,
    t: f64,
    n: usize,
    sampling: PatchSampling,
) -> Result<DiscreteMeasure> {
    VortexParams::new(eps)?;
    if n == 0 {
        return Err(SgError::InvalidArgument(
            "particle count must be positive".into(),
        ));
    }
    let z = center(t);
    let points: Vec<Vec2> = disk_points(n, sampling)?
        .into_iter()
        .map(|p| z + p * eps)
        .collect();
    DiscreteMeasure::new(points, vec![PI / n as f64; n], 1.0 + eps)
}
