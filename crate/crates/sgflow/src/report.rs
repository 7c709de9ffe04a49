//! Invariant checks shared by every run.

use serde::Serialize;
use sgflow_core::dynamics::FlowState;
use sgflow_core::measure::lr_distance;
use sgflow_core::physical::{
    bin_tolerance, inverse_after_forward, mean_cell_diameter, measure_preservation_stat,
    reconstruct_f, z_residual, TestFunctionSet,
};
use sgflow_core::{GridField, QuadratureGrid, SgError};

use crate::config::DiagnosticsSpec;
use crate::error::Result;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(value: f64, bound: f64) -> Self {
        Check {
            value,
            bound,
            pass: value <= bound,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InvariantReport {
    /// `|Σ m(T) − Σ m(0)|`, required to vanish.
    pub mass: Check,
    /// Largest particle radius against `R(T)` plus ten steps at top speed.
    pub support: Check,
    pub speed: Check,
    /// Worst bin statistic over the saved times.
    pub measure_preservation: Check,
    /// `‖F*_T ∘ F_T − id‖_{L¹}/|Ω|` against twice the mean cell diameter.
    pub inverse: Check,
    /// Against `C (Δ² + tol)` with `Δ` the largest gap between saved times;
    /// `None` with fewer than three saved times.
    pub z_residual: Option<Check>,
    pub mean_cell_diameter: f64,
    pub max_mass_error: f64,
    pub pass: bool,
}

pub fn invariant_report(
    state: &FlowState,
    initial_mass: f64,
    grid: &QuadratureGrid,
    diag: &DiagnosticsSpec,
    dt: f64,
    tol: f64,
) -> Result<InvariantReport> {
    let mass = Check {
        value: (state.total_mass() - initial_mass).abs(),
        bound: 0.0,
        pass: state.total_mass() == initial_mass,
    };
    let cap = state.s + state.r_t + 1.0;
    let support = Check::at_most(state.stats.max_radius, state.r_t + 10.0 * dt * cap);
    let speed = Check::at_most(state.stats.max_speed, cap);

    let f0 = reconstruct_f(state, grid, 0.0)?;
    let diameter = mean_cell_diameter(grid, &f0.cell_index, state.len());
    let mut worst: f64 = 0.0;
    for t in state.saved_times() {
        let f = reconstruct_f(state, grid, t)?;
        worst = worst.max(measure_preservation_stat(&f, grid, diag.bins)?);
    }
    let measure_preservation = Check::at_most(
        worst,
        diag.measure_tolerance
            .max(bin_tolerance(grid, diag.bins, diameter)),
    );

    let identity = GridField::from_nodes(grid, |_, x| Some(x));
    let comp = inverse_after_forward(state, grid, state.t)?;
    let area = grid.total_weight();
    let inverse = Check::at_most(
        lr_distance(&comp.to_grid_field(grid), &identity, 1.0, None)? / area,
        2.0 * diameter,
    );

    let tests = TestFunctionSet {
        degree: diag.test_degree,
        ..Default::default()
    };
    let spacing = state
        .saved_times()
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max);
    let z_residual = match z_residual(state, grid, &tests) {
        Ok(r) => Some(Check::at_most(
            r.max_abs,
            diag.residual_constant * (spacing * spacing + tol),
        )),
        Err(SgError::InsufficientHistory { .. }) => None,
        Err(e) => return Err(e.into()),
    };

    let pass = mass.pass
        && support.pass
        && speed.pass
        && measure_preservation.pass
        && inverse.pass
        && z_residual.as_ref().is_none_or(|c| c.pass);
    Ok(InvariantReport {
        mass,
        support,
        speed,
        measure_preservation,
        inverse,
        z_residual,
        mean_cell_diameter: diameter,
        max_mass_error: state.stats.max_mass_error,
        pass,
    })
}
