//! Particle advection in dual space by `U = J[X − ∇P*(X)]`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};
use crate::measure::{support_bound, DiscreteMeasure, QuadratureGrid};
use crate::ot::{solve_semidiscrete, OtSolution, SolverOptions};
use crate::sum::{KahanSum, KahanSum2};
use crate::vec2::Vec2;

/// Quarter turn `J(a, b) = (−b, a)`.
#[inline]
pub fn j(v: Vec2) -> Vec2 {
    v.perp()
}

/// Componentwise cutoff `H(X) = (ϱ(|X_1|) X_1, ϱ(|X_2|) X_2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffProfile {
    pub r: f64,
}

impl CutoffProfile {
    pub fn new(r: f64) -> Self {
        CutoffProfile { r }
    }

    /// Smoothstep ramp from 1 on `[0, R]` down to 0 on `[R + 1, ∞)`.
    pub fn rho(&self, s: f64) -> f64 {
        let u = (s.abs() - self.r).clamp(0.0, 1.0);
        1.0 - u * u * (3.0 - 2.0 * u)
    }

    pub fn apply(&self, x: Vec2) -> Vec2 {
        Vec2::new(self.rho(x.x) * x.x, self.rho(x.y) * x.y)
    }
}

/// Unnormalized C² bump `(1 − r²)³` on the unit ball.
#[inline]
pub fn bump(r: f64) -> f64 {
    if r < 1.0 {
        let s = 1.0 - r * r;
        s * s * s
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsOptions {
    /// Time step; defaults to `1e-2·min(1, 1/(S + R(T) + 1))`.
    pub dt: Option<f64>,
    pub save_stride: usize,
    pub ot: SolverOptions,
    /// Apply the cutoff `H` to positions in the velocity.
    pub cutoff: bool,
    /// Mollification index `m`: average selections over radius `1/m`.
    pub mollifier: Option<u32>,
}

impl Default for DynamicsOptions {
    fn default() -> Self {
        DynamicsOptions {
            dt: None,
            save_stride: 1,
            ot: SolverOptions::default(),
            cutoff: true,
            mollifier: None,
        }
    }
}

pub fn default_dt(s: f64, r_t: f64) -> f64 {
    1e-2 * (1.0 / (s + r_t + 1.0)).min(1.0)
}

/// One saved time of a run.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub points: Vec<Vec2>,
    pub weights: Vec<f64>,
    pub centroids: Vec<Vec2>,
    pub density: Option<Arc<Vec<f64>>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunStats {
    pub steps: usize,
    pub solves: usize,
    pub newton_iterations: usize,
    pub max_newton_iterations: usize,
    pub max_mass_error: f64,
    pub max_speed: f64,
    pub max_radius: f64,
    pub repaired_cells: usize,
}

impl RunStats {
    fn record(&mut self, sol: &OtSolution) {
        self.solves += 1;
        self.newton_iterations += sol.report.iterations;
        self.max_newton_iterations = self.max_newton_iterations.max(sol.report.iterations);
        self.max_mass_error = self.max_mass_error.max(sol.report.max_mass_error);
        self.repaired_cells += sol.report.repaired_cells;
    }
}

/// Particle state plus saved history.
#[derive(Clone, Debug)]
pub struct FlowState {
    pub t: f64,
    pub step: usize,
    pub points: Vec<Vec2>,
    pub masses: Vec<f64>,
    pub weights: Vec<f64>,
    pub centroids: Vec<Vec2>,
    /// Per-node source density; `None` is Lebesgue measure.
    pub density: Option<Arc<Vec<f64>>>,
    pub s: f64,
    /// Support radius `R(T)` for the configured horizon.
    pub r_t: f64,
    pub profile: CutoffProfile,
    pub history: Vec<Snapshot>,
    pub stats: RunStats,
}

impl FlowState {
    /// Solves for the initial weights and records the `t = 0` snapshot.
    pub fn new(
        grid: &QuadratureGrid,
        alpha0: &DiscreteMeasure,
        horizon: f64,
        ot: &SolverOptions,
    ) -> Result<Self> {
        Self::with_density(grid, alpha0, horizon, ot, None)
    }

    pub fn with_density(
        grid: &QuadratureGrid,
        alpha0: &DiscreteMeasure,
        horizon: f64,
        ot: &SolverOptions,
        density: Option<Arc<Vec<f64>>>,
    ) -> Result<Self> {
        if !(horizon >= 0.0) {
            return Err(SgError::InvalidArgument(format!(
                "horizon must be nonnegative, got {horizon}"
            )));
        }
        let s = grid.domain.s;
        let r_t = support_bound(alpha0.r0, s, horizon);
        let sol = solve_semidiscrete(
            grid,
            &alpha0.points,
            &alpha0.masses,
            density.as_deref().map(|d| &d[..]),
            None,
            ot,
        )
        .map_err(|e| e.context("initial transport solve"))?;
        let mut stats = RunStats::default();
        stats.record(&sol);
        stats.max_radius = alpha0.points.iter().map(|p| p.norm()).fold(0.0, f64::max);
        let mut state = FlowState {
            t: 0.0,
            step: 0,
            points: alpha0.points.clone(),
            masses: alpha0.masses.clone(),
            weights: sol.weights.0,
            centroids: sol.tess.cell_centroids,
            density,
            s,
            r_t,
            profile: CutoffProfile::new(r_t),
            history: Vec::new(),
            stats,
        };
        state.save_snapshot();
        Ok(state)
    }

    /// Builds a state from recorded snapshots, for post-processing of stored runs.
    pub fn from_history(
        masses: Vec<f64>,
        s: f64,
        r_t: f64,
        history: Vec<Snapshot>,
    ) -> Result<Self> {
        let last = history
            .last()
            .ok_or_else(|| SgError::InvalidArgument("history must not be empty".into()))?
            .clone();
        Ok(FlowState {
            t: last.t,
            step: last.step,
            points: last.points,
            masses,
            weights: last.weights,
            centroids: last.centroids,
            density: last.density,
            s,
            r_t,
            profile: CutoffProfile::new(r_t),
            history,
            stats: RunStats::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().copied().collect::<KahanSum>().value()
    }

    /// Records the current state unless this step is already saved.
    pub fn save_snapshot(&mut self) {
        if self.history.last().is_some_and(|s| s.step == self.step) {
            return;
        }
        self.history.push(Snapshot {
            step: self.step,
            t: self.t,
            points: self.points.clone(),
            weights: self.weights.clone(),
            centroids: self.centroids.clone(),
            density: self.density.clone(),
        });
    }

    /// Saved snapshot at time `t`.
    pub fn snapshot(&self, t: f64) -> Result<&Snapshot> {
        let tol = 1e-9 * t.abs().max(1.0);
        self.history
            .iter()
            .find(|s| (s.t - t).abs() <= tol)
            .ok_or(SgError::TimeNotSaved { t })
    }

    pub fn saved_times(&self) -> Vec<f64> {
        self.history.iter().map(|s| s.t).collect()
    }

    /// `U_i = J(H(X_i) − c_i)`, or `J(X_i − c_i)` with the cutoff disabled.
    pub fn dual_velocity(&self, i: usize, cutoff: bool) -> Result<Vec2> {
        let c = self.centroids[i];
        if !c.is_finite() {
            return Err(SgError::DegenerateCell { index: i });
        }
        let x = if cutoff {
            self.profile.apply(self.points[i])
        } else {
            self.points[i]
        };
        Ok(j(x - c))
    }

    pub fn mollified_velocity(&self, i: usize, m: u32, cutoff: bool) -> Result<Vec2> {
        let v = velocities(
            &self.points,
            &self.centroids,
            &self.masses,
            self.profile,
            cutoff,
            Some(m),
        )?;
        Ok(v[i])
    }

    pub fn velocities(&self, opts: &DynamicsOptions) -> Result<Vec<Vec2>> {
        velocities(
            &self.points,
            &self.centroids,
            &self.masses,
            self.profile,
            opts.cutoff,
            opts.mollifier,
        )
    }

    fn solve(
        &mut self,
        grid: &QuadratureGrid,
        points: &[Vec2],
        init: &[f64],
        ot: &SolverOptions,
    ) -> Result<OtSolution> {
        let sol = solve_semidiscrete(
            grid,
            points,
            &self.masses,
            self.density.as_deref().map(|d| &d[..]),
            Some(init),
            ot,
        )?;
        self.stats.record(&sol);
        Ok(sol)
    }

    /// One midpoint step of size `dt`; a negative `dt` integrates backward.
    pub fn step(&mut self, grid: &QuadratureGrid, dt: f64, opts: &DynamicsOptions) -> Result<()> {
        let context = |e: SgError, stage: &str, step: usize, t: f64| {
            e.context(format!("{stage} of step {step} at t={t}"))
        };
        let (step, t) = (self.step + 1, self.t);
        let bound = self.s + self.r_t + 1.0;
        let u0 = self
            .velocities(opts)
            .map_err(|e| context(e, "velocity", step, t))?;
        let mid: Vec<Vec2> = self
            .points
            .iter()
            .zip(&u0)
            .map(|(x, u)| *x + *u * (0.5 * dt))
            .collect();
        let weights = self.weights.clone();
        let sm = self
            .solve(grid, &mid, &weights, &opts.ot)
            .map_err(|e| context(e, "midpoint solve", step, t))?;
        let um = velocities(
            &mid,
            &sm.tess.cell_centroids,
            &self.masses,
            self.profile,
            opts.cutoff,
            opts.mollifier,
        )
        .map_err(|e| context(e, "midpoint velocity", step, t))?;
        let speed = u0.iter().chain(&um).map(|u| u.norm()).fold(0.0, f64::max);
        self.stats.max_speed = self.stats.max_speed.max(speed);
        if speed > bound * (1.0 + 1e-12) {
            return Err(SgError::Invariant(format!(
                "speed {speed} exceeds S + R(T) + 1 = {bound} in step {step}"
            )));
        }
        let next: Vec<Vec2> = self
            .points
            .iter()
            .zip(&um)
            .map(|(x, u)| *x + *u * dt)
            .collect();
        let s1 = self
            .solve(grid, &next, &sm.weights.0, &opts.ot)
            .map_err(|e| context(e, "end solve", step, t))?;
        let radius = next.iter().map(|p| p.norm()).fold(0.0, f64::max);
        self.stats.max_radius = self.stats.max_radius.max(radius);
        let slack = 10.0 * dt.abs() * bound;
        if radius > self.r_t + slack {
            return Err(SgError::Invariant(format!(
                "support radius {radius} exceeds R(T) + slack = {} in step {step}",
                self.r_t + slack
            )));
        }
        self.points = next;
        self.weights = s1.weights.0;
        self.centroids = s1.tess.cell_centroids;
        self.step = step;
        self.stats.steps += 1;
        Ok(())
    }

    /// Takes `n` steps of size `dt` starting from the current time, saving every
    /// `save_stride` steps and at the end.
    pub fn advance(
        &mut self,
        grid: &QuadratureGrid,
        n: usize,
        dt: f64,
        opts: &DynamicsOptions,
    ) -> Result<()> {
        let stride = opts.save_stride.max(1);
        let (t0, k0) = (self.t, self.step);
        for k in 1..=n {
            self.step(grid, dt, opts)?;
            self.t = t0 + k as f64 * dt;
            debug!("step {} t={:.6}", self.step, self.t);
            if (self.step - k0).is_multiple_of(stride) || k == n {
                self.save_snapshot();
            }
        }
        Ok(())
    }

    /// Advances to `t_end` with the configured or default time step,
    /// shortened so that a whole number of steps lands on `t_end`.
    pub fn advance_to(
        &mut self,
        grid: &QuadratureGrid,
        t_end: f64,
        opts: &DynamicsOptions,
    ) -> Result<()> {
        let span = t_end - self.t;
        if span <= 0.0 {
            return Ok(());
        }
        let (n, dt) = step_plan(
            span,
            opts.dt.unwrap_or_else(|| default_dt(self.s, self.r_t)),
        )?;
        self.advance(grid, n, dt, opts)
    }

    /// Index form of `Φ*_t`: particles keep their labels, so it is the identity.
    pub fn inverse_flow(&self, t: f64) -> Result<Vec<usize>> {
        self.snapshot(t)?;
        Ok((0..self.len()).collect())
    }

    /// Writes `t,i,X1,X2,c1,c2,psi` for every saved snapshot.
    pub fn write_trajectory_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "t,i,X1,X2,c1,c2,psi")?;
        for s in &self.history {
            for (i, ((x, c), p)) in s
                .points
                .iter()
                .zip(&s.centroids)
                .zip(&s.weights)
                .enumerate()
            {
                writeln!(w, "{},{i},{},{},{},{},{}", s.t, x.x, x.y, c.x, c.y, p)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `Σ m_i X_i` at the current time.
    pub fn first_moment(&self) -> Vec2 {
        let mut acc = KahanSum2::default();
        for (x, m) in self.points.iter().zip(&self.masses) {
            acc.add(*x * *m);
        }
        acc.value()
    }
}

/// Number of steps and the adjusted step size covering `span`.
pub fn step_plan(span: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(SgError::InvalidArgument(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let n = ((span / dt) - 1e-9).ceil().max(1.0) as usize;
    Ok((n, span / n as f64))
}

/// Runs from `alpha0` to time `t_end`.
pub fn run(
    grid: &QuadratureGrid,
    alpha0: &DiscreteMeasure,
    t_end: f64,
    opts: &DynamicsOptions,
) -> Result<FlowState> {
    let mut state = FlowState::new(grid, alpha0, t_end, &opts.ot)?;
    state.advance_to(grid, t_end, opts)?;
    Ok(state)
}

/// Dual velocities of all particles.
///
/// With a mollifier index `m`, each selection `c_i` is replaced by the average
/// of `c_j` over particles within `1/m` of `X_i`, weighted by bump values times
/// masses.
pub fn velocities(
    points: &[Vec2],
    centroids: &[Vec2],
    masses: &[f64],
    profile: CutoffProfile,
    cutoff: bool,
    mollifier: Option<u32>,
) -> Result<Vec<Vec2>> {
    if let Some(index) = centroids.iter().position(|c| !c.is_finite()) {
        return Err(SgError::DegenerateCell { index });
    }
    let position = |x: Vec2| if cutoff { profile.apply(x) } else { x };
    let Some(m) = mollifier else {
        return Ok(points
            .iter()
            .zip(centroids)
            .map(|(x, c)| j(position(*x) - *c))
            .collect());
    };
    if m == 0 {
        return Err(SgError::InvalidArgument(
            "mollification index must be at least 1".into(),
        ));
    }
    let radius = 1.0 / m as f64;
    let bin = |p: Vec2| ((p.x / radius).floor() as i64, (p.y / radius).floor() as i64);
    let mut bins: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        bins.entry(bin(*p)).or_default().push(i);
    }
    Ok(points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let (bx, by) = bin(*x);
            let mut total = KahanSum::new();
            let mut acc = KahanSum2::default();
            let mut terms = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let Some(list) = bins.get(&(bx + dx, by + dy)) else {
                        continue;
                    };
                    for &k in list {
                        let w = bump(x.dist(points[k]) / radius) * masses[k];
                        if w > 0.0 {
                            total.add(w);
                            acc.add(centroids[k] * w);
                            terms += 1;
                        }
                    }
                }
            }
            let c = if terms <= 1 {
                centroids[i]
            } else {
                acc.value() / total.value()
            };
            j(position(*x) - c)
        })
        .collect())
}
