//! Shallow-water variant: transport weighted by the height `h = P − |x|²/2`.

use std::path::Path;
use std::sync::Arc;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_plan, DynamicsOptions, FlowState};
use crate::error::{Result, SgError};
use crate::measure::{DiscreteMeasure, QuadratureGrid};
use crate::ot::{solve_semidiscrete, OtSolution, SolverOptions};
use crate::physical::{pushforward_bin_stat, PhysicalFlowField};
use crate::sum::{ksum, KahanSum};
use crate::vec2::Vec2;

/// `(X − c)^⊥`, the same operator as `J` in the plane.
#[inline]
pub fn sw_dual_velocity(x: Vec2, c: Vec2) -> Vec2 {
    (x - c).perp()
}

/// Nonnegative height samples, one per quadrature node.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightField {
    pub values: Vec<f64>,
}

impl HeightField {
    pub fn new(grid: &QuadratureGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(SgError::MismatchedGrids(format!(
                "{} heights for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(node) = values.iter().position(|h| !(*h >= 0.0) || !h.is_finite()) {
            return Err(SgError::InvalidArgument(format!(
                "height at node {node} must be finite and nonnegative"
            )));
        }
        Ok(HeightField { values })
    }

    pub fn from_fn(grid: &QuadratureGrid, f: impl Fn(Vec2) -> f64) -> Result<Self> {
        Self::new(grid, grid.nodes.iter().map(|x| f(*x)).collect())
    }

    pub fn constant(grid: &QuadratureGrid, h: f64) -> Result<Self> {
        Self::new(grid, vec![h; grid.len()])
    }

    pub fn total(&self, grid: &QuadratureGrid) -> f64 {
        grid.integrate(&self.values)
    }

    /// CSV with columns `x,y,h`.
    pub fn write_csv(&self, grid: &QuadratureGrid, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "h"])?;
        for (x, h) in grid.nodes.iter().zip(&self.values) {
            w.write_record(&[x.x.to_string(), x.y.to_string(), h.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Transport solve with cell masses `∫_cell h dx`.
pub fn solve_weighted_ot(
    grid: &QuadratureGrid,
    h: &HeightField,
    mu: &DiscreteMeasure,
    init: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<OtSolution> {
    let (supply, demand) = (h.total(grid), mu.total_mass());
    if !((supply - demand).abs() <= 0.01 * demand) {
        return Err(SgError::InvalidArgument(format!(
            "height integral {supply} and particle mass {demand} differ by more than 1%"
        )));
    }
    solve_semidiscrete(grid, &mu.points, &mu.masses, Some(&h.values), init, opts).map_err(|e| {
        match e {
            SgError::DegenerateCell { index } => SgError::ZeroMassRegion { index },
            other => other,
        }
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyOptions {
    /// Relaxation factor in `(0, 1]`.
    pub damping: f64,
    pub max_outer: usize,
    /// Stop when the relative L¹ change of `h` drops to this level.
    pub tol: f64,
    pub ot: SolverOptions,
}

impl Default for ConsistencyOptions {
    fn default() -> Self {
        ConsistencyOptions {
            damping: 0.5,
            max_outer: 20,
            tol: 1e-6,
            ot: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyStatus {
    Converged,
    NonConvergence,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OuterRecord {
    pub iter: usize,
    /// `∫|h̃ − h| / M` for the undamped update `h̃`.
    pub residual: f64,
    /// `∫|h_new − h| / M`.
    pub change: f64,
    pub clamped_nodes: usize,
    pub shift: f64,
    pub renormalization: f64,
    pub newton_iterations: usize,
}

#[derive(Clone, Debug)]
pub struct ConsistencyReport {
    pub status: ConsistencyStatus,
    pub h: HeightField,
    pub weights: Vec<f64>,
    pub history: Vec<OuterRecord>,
    /// Transport failure that ended the iteration early.
    pub failure: Option<String>,
}

impl ConsistencyReport {
    /// Whether the residual fell at each of the first `k` iterations.
    pub fn monotone_for(&self, k: usize) -> bool {
        self.history.len() > k
            && self.history[..=k]
                .windows(2)
                .all(|w| w[1].residual < w[0].residual)
    }
}

/// Height consistent with a potential: `max(P − |x|²/2 + C, 0)` with `C`
/// fixed by `∫ h = mass`. Returns the field, `C`, clamped node count and the
/// final multiplicative renormalization.
pub fn height_from_potential(
    grid: &QuadratureGrid,
    p: &[f64],
    mass: f64,
) -> Result<(Vec<f64>, f64, usize, f64)> {
    let q: Vec<f64> = p
        .iter()
        .zip(&grid.nodes)
        .map(|(p, x)| p - 0.5 * x.norm_sq())
        .collect();
    let w = grid.node_weight();
    let integral = |c: f64| ksum(q.iter().map(|v| (v + c).max(0.0) * w));
    let qmax = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let qmin = q.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (-qmax, -qmin + mass / grid.total_weight());
    if !(integral(hi) >= mass) {
        return Err(SgError::BracketFailure { expansions: 0 });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if integral(mid) < mass {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = hi;
    let mut h: Vec<f64> = q.iter().map(|v| (v + c).max(0.0)).collect();
    let clamped = q.iter().filter(|v| **v + c < 0.0).count();
    let total = grid.integrate(&h);
    let factor = mass / total;
    h.iter_mut().for_each(|v| *v *= factor);
    Ok((h, c, clamped, factor))
}

/// Alternates weighted transport solves with `h ← (1 − d) h + d·max(P − |x|²/2 + C, 0)`.
pub fn sw_consistency_iterate(
    grid: &QuadratureGrid,
    mu: &DiscreteMeasure,
    h0: &HeightField,
    init: Option<&[f64]>,
    opts: &ConsistencyOptions,
) -> Result<ConsistencyReport> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(SgError::InvalidArgument(format!(
            "damping must lie in (0, 1], got {}",
            opts.damping
        )));
    }
    let mass = h0.total(grid);
    let w = grid.node_weight();
    let mut h = h0.clone();
    let mut weights = init.map(|p| p.to_vec());
    let mut history = Vec::new();
    let mut status = ConsistencyStatus::NonConvergence;
    let mut failure = None;
    for iter in 1..=opts.max_outer {
        let sol = match solve_weighted_ot(grid, &h, mu, weights.as_deref(), &opts.ot) {
            Ok(sol) => sol,
            Err(e)
                if e.is_nonconvergence() || matches!(e.root(), SgError::ZeroMassRegion { .. }) =>
            {
                info!("consistency iteration {iter} stopped: {e}");
                failure = Some(format!("consistency iteration {iter}: {e}"));
                break;
            }
            Err(e) => return Err(e.context(format!("consistency iteration {iter}"))),
        };
        let (target, shift, clamped_nodes, renormalization) =
            height_from_potential(grid, &sol.tess.scores, mass)?;
        let mut residual = KahanSum::new();
        let mut change = KahanSum::new();
        let mut next = Vec::with_capacity(h.values.len());
        for (old, new) in h.values.iter().zip(&target) {
            let v = ((1.0 - opts.damping) * old + opts.damping * new).max(0.0);
            residual.add((new - old).abs() * w);
            change.add((v - old).abs() * w);
            next.push(v);
        }
        let record = OuterRecord {
            iter,
            residual: residual.value() / mass,
            change: change.value() / mass,
            clamped_nodes,
            shift,
            renormalization,
            newton_iterations: sol.report.iterations,
        };
        debug!(
            "consistency {iter}: residual {:.3e} change {:.3e} clamped {clamped_nodes} renormalization {renormalization}",
            record.residual, record.change
        );
        let done = record.change <= opts.tol;
        history.push(record);
        h = HeightField { values: next };
        weights = Some(sol.weights.0);
        if done {
            status = ConsistencyStatus::Converged;
            break;
        }
    }
    if status == ConsistencyStatus::NonConvergence {
        info!(
            "height consistency not reached after {} outer iterations",
            opts.max_outer
        );
    }
    Ok(ConsistencyReport {
        status,
        h,
        weights: weights.unwrap_or_default(),
        history,
        failure,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShallowOptions {
    pub dynamics: DynamicsOptions,
    pub consistency: ConsistencyOptions,
    /// Outer consistency iterations after every time step.
    pub outer_per_step: usize,
}

impl Default for ShallowOptions {
    fn default() -> Self {
        ShallowOptions {
            dynamics: DynamicsOptions::default(),
            consistency: ConsistencyOptions::default(),
            outer_per_step: 2,
        }
    }
}

/// Shallow-water run: each step advects with the current height, then
/// relaxes the height toward consistency with the new potential.
pub fn sw_run(
    grid: &QuadratureGrid,
    mu: &DiscreteMeasure,
    h0: &HeightField,
    t_end: f64,
    opts: &ShallowOptions,
) -> Result<(FlowState, Vec<ConsistencyStatus>)> {
    let mut state = FlowState::with_density(
        grid,
        mu,
        t_end,
        &opts.dynamics.ot,
        Some(Arc::new(h0.values.clone())),
    )?;
    let mut statuses = Vec::new();
    sw_advance(&mut state, grid, t_end, opts, &mut statuses)?;
    Ok((state, statuses))
}

/// The stepping loop of [`sw_run`] from `state.t` to `t_end`. On error the
/// state holds the last completed step.
pub fn sw_advance(
    state: &mut FlowState,
    grid: &QuadratureGrid,
    t_end: f64,
    opts: &ShallowOptions,
    statuses: &mut Vec<ConsistencyStatus>,
) -> Result<()> {
    let span = t_end - state.t;
    if span <= 0.0 {
        return Ok(());
    }
    let dt = opts
        .dynamics
        .dt
        .unwrap_or_else(|| crate::dynamics::default_dt(state.s, state.r_t));
    let (n, dt) = step_plan(span, dt)?;
    let stride = opts.dynamics.save_stride.max(1);
    let consistency = ConsistencyOptions {
        max_outer: opts.outer_per_step,
        ..opts.consistency.clone()
    };
    let t0 = state.t;
    let mut trial = state.clone();
    for k in 1..=n {
        trial.step(grid, dt, &opts.dynamics)?;
        trial.t = t0 + k as f64 * dt;
        let current = DiscreteMeasure::from_parts(trial.points.clone(), trial.masses.clone())?;
        let h = HeightField {
            values: trial.density.as_deref().cloned().unwrap_or_default(),
        };
        let report = sw_consistency_iterate(grid, &current, &h, Some(&trial.weights), &consistency)
            .map_err(|e| e.context(format!("height update after step {k}")))?;
        if let Some(msg) = &report.failure {
            return Err(SgError::NonConvergence {
                iterations: report.history.len(),
                max_error: f64::NAN,
                target: opts.consistency.tol,
            }
            .context(msg.clone()));
        }
        let sol = solve_weighted_ot(
            grid,
            &report.h,
            &current,
            Some(&report.weights),
            &opts.dynamics.ot,
        )
        .map_err(|e| e.context(format!("weighted solve after step {k}")))?;
        statuses.push(report.status);
        trial.weights = sol.weights.0;
        trial.centroids = sol.tess.cell_centroids;
        trial.density = Some(Arc::new(report.h.values));
        if k % stride == 0 || k == n {
            trial.save_snapshot();
        }
        state.clone_from(&trial);
    }
    Ok(())
}

/// Binned comparison of `h_0` pushed through `F` against `h_t`.
pub fn weighted_pushforward_stat(
    field: &PhysicalFlowField,
    grid: &QuadratureGrid,
    bins: usize,
    h0: &HeightField,
    ht: &HeightField,
) -> Result<f64> {
    pushforward_bin_stat(field, grid, bins, Some(&h0.values), Some(&ht.values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::PhysicalDomain;
    use std::f64::consts::PI;

    #[test]
    fn perp_velocity() {
        assert_eq!(
            sw_dual_velocity(Vec2::new(0.4, 0.2), Vec2::new(0.4, 0.2)),
            Vec2::ZERO
        );
        assert_eq!(
            sw_dual_velocity(Vec2::new(1.0, 0.0), Vec2::ZERO),
            Vec2::new(0.0, 1.0)
        );
    }

    #[test]
    fn negative_height_is_rejected() {
        let grid = PhysicalDomain::unit_disk(16).quadrature();
        assert!(HeightField::constant(&grid, -1.0).is_err());
    }

    #[test]
    fn height_from_flat_potential_is_a_paraboloid() {
        let grid = PhysicalDomain::unit_disk(96).quadrature();
        let p = vec![0.0; grid.len()];
        let (h, c, clamped, factor) = height_from_potential(&grid, &p, PI).unwrap();
        assert_eq!(clamped, 0);
        assert!((grid.integrate(&h) - PI).abs() < 1e-12);
        assert!((factor - 1.0).abs() < 1e-12);
        // ∫ (C − r²/2) over the unit disk is π(C − 1/4)
        assert!((c - 1.25).abs() < 0.01, "{c}");
    }

    #[test]
    fn single_particle_is_a_fixed_point() {
        let grid = PhysicalDomain::unit_disk(64).quadrature();
        let mu = DiscreteMeasure::new(vec![Vec2::ZERO], vec![PI], 0.0).unwrap();
        let h0 = HeightField::constant(&grid, 1.0).unwrap();
        let opts = ConsistencyOptions {
            damping: 1.0,
            ..Default::default()
        };
        let rep = sw_consistency_iterate(&grid, &mu, &h0, None, &opts).unwrap();
        assert_eq!(rep.status, ConsistencyStatus::Converged);
        assert!(rep.history.len() <= 3);
        let again = sw_consistency_iterate(&grid, &mu, &rep.h, None, &opts).unwrap();
        assert!(again.history[0].change <= 1e-12);
    }
}
