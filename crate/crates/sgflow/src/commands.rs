//! Subcommands.

use std::path::PathBuf;
use std::sync::Arc;

use log::{info, warn};
use serde_json::{json, Value};
use sgflow_core::dynamics::{default_dt, step_plan, DynamicsOptions, FlowState};
use sgflow_core::measure::lr_distance;
use sgflow_core::orlicz::{build_dominating_n, luxemburg_norm, DominationStatus, NFunction};
use sgflow_core::physical::{bin_tolerance, inverse_f, mean_cell_diameter, reconstruct_f};
use sgflow_core::potential::{ConvexPotential, LegendreDual};
use sgflow_core::shallow::{
    sw_advance, sw_consistency_iterate, weighted_pushforward_stat, ConsistencyStatus, HeightField,
    ShallowOptions,
};
use sgflow_core::vortex::{
    angular_rate, best_rotation_angle, exact_f, exact_phi, fit_rotation_rate, sample_patch,
};
use sgflow_core::{DiscreteMeasure, GridField, PhysicalDomain, QuadratureGrid, Vec2};

use crate::config::{
    DensitySpec, ExperimentConfig, FamilySpec, HeightSpec, MeasureSpec, SweepGenerator,
};
use crate::error::{CliError, Result};
use crate::measures::{build_measure, l1_gap, mollified_density, mollified_measure, subsample};
use crate::output::{manifest, num, OutDir, RunFacts};
use crate::report::invariant_report;

/// A parsed command line: configuration, output directory and effective seed.
pub struct Invocation {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Invocation {
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        let out = out.or_else(|| cfg.output.clone()).ok_or_else(|| {
            CliError::Invalid("at `output`: no output directory; pass --out or set `output`".into())
        })?;
        let seed = seed.unwrap_or(cfg.seed);
        Ok(Invocation { cfg, out, seed })
    }

    fn facts(&self, state: &FlowState, r0: f64) -> Result<RunFacts> {
        let (steps, dt) = plan(&self.cfg.dynamics(), state, self.cfg.horizon)?;
        Ok(RunFacts {
            seed: self.seed,
            s: state.s,
            r0,
            r_t: state.r_t,
            dt,
            steps,
        })
    }
}

fn plan(opts: &DynamicsOptions, state: &FlowState, horizon: f64) -> Result<(usize, f64)> {
    let dt = opts.dt.unwrap_or_else(|| default_dt(state.s, state.r_t));
    if horizon <= 0.0 {
        return Ok((0, dt));
    }
    Ok(step_plan(horizon, dt)?)
}

fn status_of(e: &CliError) -> &'static str {
    if e.exit_code() == 3 {
        "nonconvergence"
    } else {
        "failed"
    }
}

/// Writes the manifest of a failed command and hands the error back.
fn fail<T>(
    out: &OutDir,
    command: &str,
    inv: &Invocation,
    facts: Option<&RunFacts>,
    error: CliError,
    partial: Value,
) -> Result<T> {
    let m = manifest(
        command,
        &inv.cfg,
        facts,
        status_of(&error),
        Some(error.to_string()),
        partial,
    )?;
    out.write_json("manifest.json", &m)?;
    Err(error)
}

fn grid_of(domain: &PhysicalDomain) -> QuadratureGrid {
    domain.quadrature()
}

/// Runs from `mu`, saving at every time in `times` as well as on the configured stride.
fn run_through(
    grid: &QuadratureGrid,
    mu: &DiscreteMeasure,
    times: &[f64],
    horizon: f64,
    opts: &DynamicsOptions,
) -> Result<FlowState> {
    let mut state = FlowState::new(grid, mu, horizon, &opts.ot)?;
    let dt = opts.dt.unwrap_or_else(|| default_dt(state.s, state.r_t));
    let opts = DynamicsOptions {
        dt: Some(dt),
        ..opts.clone()
    };
    let mut stops: Vec<f64> = times
        .iter()
        .copied()
        .filter(|t| *t > 0.0 && *t < horizon)
        .collect();
    stops.push(horizon);
    stops.sort_by(f64::total_cmp);
    stops.dedup();
    for t in stops {
        state.advance_to(grid, t, &opts)?;
    }
    Ok(state)
}

fn lq_norm(spec: &MeasureSpec, mu: &DiscreteMeasure, q: f64) -> Option<f64> {
    match spec {
        MeasureSpec::VortexPatch { epsilon, .. } => {
            let e2 = epsilon * epsilon;
            Some((std::f64::consts::PI * e2).powf(1.0 / q) / e2)
        }
        MeasureSpec::DensityGrid { count, radius, .. } => {
            let cell = std::f64::consts::PI * radius * radius / *count as f64;
            let sum: f64 = mu.masses.iter().map(|m| (m / cell).powf(q) * cell).sum();
            Some(sum.powf(1.0 / q))
        }
        MeasureSpec::File { .. } => None,
    }
}

pub fn run(inv: &Invocation) -> Result<()> {
    let cfg = &inv.cfg;
    let out = OutDir::create(&inv.out)?;
    let grid = grid_of(&cfg.domain);
    let mu = build_measure(&cfg.measure, grid.total_weight())?;
    let opts = cfg.dynamics();
    let mut state = match FlowState::new(&grid, &mu, cfg.horizon, &cfg.ot) {
        Ok(s) => s,
        Err(e) => return fail(&out, "run", inv, None, e.into(), Value::Null),
    };
    let facts = inv.facts(&state, mu.r0)?;
    let outcome = state.advance_to(&grid, cfg.horizon, &opts);
    state
        .write_trajectory_csv(&out.file("trajectory.csv"))
        .map_err(CliError::from)?;
    if let Err(e) = outcome {
        let partial = json!({"reached_t": state.t, "stats": state.stats});
        return fail(&out, "run", inv, Some(&facts), e.into(), partial);
    }
    reconstruct_f(&state, &grid, state.t)?.write_csv(&grid, &out.file("flow.csv"))?;
    inverse_f(&state, &grid, state.t)?.write_csv(&grid, &out.file("inverse_flow.csv"))?;
    let report = invariant_report(
        &state,
        mu.total_mass(),
        &grid,
        &cfg.diagnostics,
        facts.dt,
        cfg.ot.tol,
    )?;
    if !report.pass {
        warn!(
            "invariant check failed: {}",
            serde_json::to_string(&report)?
        );
    }
    let results = json!({
        "particles": mu.len(),
        "saved_times": state.saved_times(),
        "stats": state.stats,
        "invariants": report,
        "initial_lq_norm": lq_norm(&cfg.measure, &mu, cfg.q),
    });
    out.write_json(
        "manifest.json",
        &manifest("run", cfg, Some(&facts), "ok", None, results)?,
    )
}

struct Member {
    label: String,
    parameter: f64,
    measure: DiscreteMeasure,
    /// Indices into the reference measure for subsamples.
    index: Option<Vec<usize>>,
}

pub fn stability(inv: &Invocation) -> Result<()> {
    let cfg = &inv.cfg;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Invalid("at `sweep`: required by the stability command".into()))?;
    let out = OutDir::create(&inv.out)?;
    let grid = grid_of(&cfg.domain);
    let total = grid.total_weight();
    let mut members = Vec::new();
    let reference = match &sweep.generator {
        SweepGenerator::Mollify { widths } => {
            let MeasureSpec::DensityGrid { density, .. } = &cfg.measure else {
                return Err(CliError::Invalid(
                    "at `sweep.generator`: mollify needs a density_grid measure".into(),
                ));
            };
            let base = build_measure(&cfg.measure, total)?;
            for &w in widths {
                members.push(Member {
                    label: format!("width={w}"),
                    parameter: w,
                    measure: mollified_measure(&base, density, w)?,
                    index: None,
                });
            }
            Some(base)
        }
        SweepGenerator::Subsample { counts } => {
            let base = build_measure(&cfg.measure, total)?;
            for (k, &c) in counts.iter().enumerate() {
                let (measure, idx) = subsample(&base, c, inv.seed.wrapping_add(k as u64))?;
                members.push(Member {
                    label: format!("count={c}"),
                    parameter: c as f64,
                    measure,
                    index: Some(idx),
                });
            }
            Some(base)
        }
        SweepGenerator::Vortex {
            epsilons,
            n,
            sampling,
        } => {
            for &e in epsilons {
                members.push(Member {
                    label: format!("epsilon={e}"),
                    parameter: e,
                    measure: sample_patch(e, 0.0, *n, *sampling)?,
                    index: None,
                });
            }
            None
        }
    };
    let opts = cfg.dynamics();
    let horizon = cfg.horizon;
    let reference_run = match &reference {
        Some(mu) => match run_through(&grid, mu, &sweep.times, horizon, &opts) {
            Ok(s) => Some(s),
            Err(e) => {
                return fail(
                    &out,
                    "stability",
                    inv,
                    None,
                    e,
                    json!({"failed_member": "reference"}),
                )
            }
        },
        None => None,
    };
    let mut runs = Vec::new();
    for m in &members {
        info!("stability member {}", m.label);
        match run_through(&grid, &m.measure, &sweep.times, horizon, &opts) {
            Ok(s) => runs.push(s),
            Err(e) => {
                return fail(
                    &out,
                    "stability",
                    inv,
                    None,
                    e,
                    json!({"failed_member": m.label, "completed": runs.len()}),
                )
            }
        }
    }

    let exponential = NFunction::exponential()?;
    let weights = vec![grid.node_weight(); grid.len()];
    let vortex = matches!(sweep.generator, SweepGenerator::Vortex { .. });
    let mut header: Vec<String> = ["member", "parameter", "n", "l1_gap"]
        .map(String::from)
        .to_vec();
    for &r in &sweep.norms {
        for &t in &sweep.times {
            header.push(format!("gap_r{r}_t{t}"));
        }
    }
    header.extend(["sup_phi_gap", "orlicz_gap"].map(String::from));
    if vortex {
        header.extend(["fitted_rate", "exact_rate"].map(String::from));
    }
    let mut rows = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); sweep.norms.len() * sweep.times.len()];
    for (k, (m, st)) in members.iter().zip(&runs).enumerate() {
        let mut row = vec![
            m.label.clone(),
            num(m.parameter),
            m.measure.len().to_string(),
        ];
        let other = match (&reference, &reference_run) {
            (Some(mu), Some(rs)) => Some((mu, rs)),
            _ if k > 0 => Some((&members[k - 1].measure, &runs[k - 1])),
            _ => None,
        };
        match other {
            Some((mu, rs)) => {
                row.push(num(l1_gap(&m.measure, mu, 20)));
                let mut c = 0;
                for &r in &sweep.norms {
                    for &t in &sweep.times {
                        let a = reconstruct_f(st, &grid, t)?.to_grid_field(&grid);
                        let b = reconstruct_f(rs, &grid, t)?.to_grid_field(&grid);
                        let g = lr_distance(&a, &b, r, None)?;
                        columns[c].push(g);
                        c += 1;
                        row.push(num(g));
                    }
                }
                let sup = match &m.index {
                    Some(idx) => idx
                        .iter()
                        .enumerate()
                        .map(|(i, &j)| st.points[i].dist(rs.points[j]))
                        .fold(0.0, f64::max),
                    None if st.len() == rs.len() => st
                        .points
                        .iter()
                        .zip(&rs.points)
                        .map(|(a, b)| a.dist(*b))
                        .fold(0.0, f64::max),
                    None => f64::NAN,
                };
                row.push(if sup.is_nan() {
                    String::new()
                } else {
                    num(sup)
                });
                let a = reconstruct_f(st, &grid, horizon)?;
                let b = reconstruct_f(rs, &grid, horizon)?;
                let diff: Vec<f64> = a
                    .images
                    .iter()
                    .zip(&b.images)
                    .map(|(x, y)| x.dist(*y))
                    .collect();
                row.push(num(luxemburg_norm(&diff, &weights, &exponential)?));
            }
            None => row.extend(std::iter::repeat_n(
                String::new(),
                header.len() - 3 - if vortex { 2 } else { 0 },
            )),
        }
        if vortex {
            row.push(num(fitted_rate(st, &grid)?));
            row.push(num(angular_rate(m.parameter)));
        }
        rows.push(row);
    }
    out.write_table("stability.csv", &header, &rows)?;

    let mut trend = serde_json::Map::new();
    let mut c = 0;
    for &r in &sweep.norms {
        for &t in &sweep.times {
            let g = &columns[c];
            c += 1;
            let increases = g.windows(2).filter(|w| w[1] > w[0]).count();
            let ratio = match (g.first(), g.last()) {
                (Some(a), Some(b)) if *a > 0.0 => b / a,
                _ => f64::NAN,
            };
            trend.insert(
                format!("r{r}_t{t}"),
                json!({"increases": increases, "final_over_first": ratio}),
            );
        }
    }
    let facts = reference_run
        .as_ref()
        .or(runs.first())
        .map(|s| {
            inv.facts(
                s,
                s.history[0]
                    .points
                    .iter()
                    .map(|p| p.norm())
                    .fold(0.0, f64::max),
            )
        })
        .transpose()?;
    let results = json!({
        "members": members.iter().map(|m| m.label.clone()).collect::<Vec<_>>(),
        "gaps_against": if reference.is_some() { "reference" } else { "previous member" },
        "trend": trend,
    });
    out.write_json(
        "manifest.json",
        &manifest("stability", cfg, facts.as_ref(), "ok", None, results)?,
    )
}

fn fitted_rate(state: &FlowState, grid: &QuadratureGrid) -> Result<f64> {
    let mut times = Vec::new();
    let mut angles = Vec::new();
    for t in state.saved_times() {
        let f = reconstruct_f(state, grid, t)?;
        times.push(t);
        angles.push(best_rotation_angle(&grid.nodes, &f.images, 1.0));
    }
    Ok(fit_rotation_rate(&times, &angles))
}

/// Largest particle distance from the exact dual flow at the current time.
fn phi_error(state: &FlowState, mu: &DiscreteMeasure, eps: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (x, y0) in state.points.iter().zip(&mu.points) {
        worst = worst.max(x.dist(exact_phi(*y0, state.t, eps)?));
    }
    Ok(worst)
}

pub fn vortex_validate(inv: &Invocation) -> Result<()> {
    let cfg = &inv.cfg;
    let spec = cfg.vortex.as_ref().ok_or_else(|| {
        CliError::Invalid("at `vortex`: required by the vortex-validate command".into())
    })?;
    let out = OutDir::create(&inv.out)?;
    let grid = grid_of(&cfg.domain);
    let opts = cfg.dynamics();
    let t = cfg.horizon;
    let header: Vec<String> = [
        "epsilon",
        "n",
        "phi_error",
        "phi_error_over_epsilon",
        "f_l2_error",
        "fitted_rate",
        "exact_rate",
        "rate_error",
    ]
    .map(String::from)
    .to_vec();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut facts = None;
    for &eps in &spec.epsilons {
        let mu = sample_patch(eps, 0.0, spec.n, spec.sampling)?;
        let state = match run_through(&grid, &mu, &[], t, &opts) {
            Ok(s) => s,
            Err(e) => {
                return fail(
                    &out,
                    "vortex-validate",
                    inv,
                    None,
                    e,
                    json!({"failed_epsilon": eps, "rows": rows}),
                )
            }
        };
        if facts.is_none() {
            facts = Some(inv.facts(&state, mu.r0)?);
        }
        let perr = phi_error(&state, &mu, eps)?;
        let f = reconstruct_f(&state, &grid, t)?.to_grid_field(&grid);
        let exact = GridField::from_nodes(&grid, |_, x| Some(exact_f(x, t, eps)));
        let l2 = lr_distance(&f, &exact, 2.0, None)?;
        let rate = fitted_rate(&state, &grid)?;
        let exact_rate = angular_rate(eps);
        let rate_error = if exact_rate != 0.0 {
            ((rate - exact_rate) / exact_rate).abs()
        } else {
            rate.abs()
        };
        rows.push(vec![
            num(eps),
            spec.n.to_string(),
            num(perr),
            num(perr / eps),
            num(l2),
            num(rate),
            num(exact_rate),
            num(rate_error),
        ]);
        summary.push(json!({
            "epsilon": eps, "phi_error": perr, "f_l2_error": l2,
            "fitted_rate": rate, "exact_rate": exact_rate, "rate_error": rate_error,
        }));
    }
    out.write_table("vortex.csv", &header, &rows)?;

    let mut order = Value::Null;
    if !spec.dt_values.is_empty() {
        let eps = spec.epsilons[0];
        let mu = sample_patch(eps, 0.0, spec.n, spec.sampling)?;
        let mut finals = Vec::new();
        for &dt in &spec.dt_values {
            let o = DynamicsOptions {
                dt: Some(dt),
                ..opts.clone()
            };
            let state = match run_through(&grid, &mu, &[], t, &o) {
                Ok(s) => s,
                Err(e) => {
                    return fail(
                        &out,
                        "vortex-validate",
                        inv,
                        facts.as_ref(),
                        e,
                        json!({"failed_dt": dt}),
                    )
                }
            };
            finals.push((dt, phi_error(&state, &mu, eps)?, state.points));
        }
        let mut table = Vec::new();
        let mut orders = Vec::new();
        let mut diffs = Vec::new();
        for k in 0..finals.len() {
            let diff = finals.get(k + 1).map(|next| {
                finals[k]
                    .2
                    .iter()
                    .zip(&next.2)
                    .map(|(a, b)| a.dist(*b))
                    .fold(0.0, f64::max)
            });
            diffs.push(diff);
        }
        for k in 0..finals.len() {
            let p = match (diffs[k], diffs.get(k + 1).copied().flatten()) {
                (Some(a), Some(b)) if a > 0.0 && b > 0.0 => {
                    let o = (a / b).ln() / (finals[k].0 / finals[k + 1].0).ln();
                    orders.push(o);
                    Some(o)
                }
                _ => None,
            };
            table.push(vec![
                num(finals[k].0),
                num(finals[k].1),
                diffs[k].map(num).unwrap_or_default(),
                p.map(num).unwrap_or_default(),
            ]);
        }
        out.write_table(
            "order.csv",
            &["dt", "phi_error", "successive_difference", "observed_order"].map(String::from),
            &table,
        )?;
        order = json!({"epsilon": eps, "observed_orders": orders});
    }
    let results = json!({"epsilons": summary, "time_order": order});
    out.write_json(
        "manifest.json",
        &manifest("vortex-validate", cfg, facts.as_ref(), "ok", None, results)?,
    )
}

/// Samples a density at the nodes, moving samples off a point singularity by a quarter spacing.
fn sample_density(density: &DensitySpec, grid: &QuadratureGrid, width: Option<f64>) -> Vec<f64> {
    let h = grid.spacing();
    grid.nodes
        .iter()
        .map(|x| {
            let mut y = *x;
            if let DensitySpec::Power { center, .. } = density {
                if y.dist(*center) < 0.25 * h {
                    y = *center + Vec2::new(0.25 * h, 0.0);
                }
            }
            match width {
                Some(w) => mollified_density(density, y, w),
                None => density.eval(y),
            }
        })
        .collect()
}

pub fn orlicz_demo(inv: &Invocation) -> Result<()> {
    let cfg = &inv.cfg;
    let spec = cfg.orlicz.as_ref().ok_or_else(|| {
        CliError::Invalid("at `orlicz`: required by the orlicz-demo command".into())
    })?;
    let out = OutDir::create(&inv.out)?;
    let grid = PhysicalDomain::unit_disk(spec.n_q).quadrature();
    let weights = vec![grid.node_weight(); grid.len()];
    let mut family: Vec<(String, Vec<f64>)> = Vec::new();
    match &spec.family {
        FamilySpec::Mollified { density, widths } => {
            for &w in widths {
                family.push((
                    format!("width={w}"),
                    sample_density(density, &grid, Some(w)),
                ));
            }
            family.push(("limit".into(), sample_density(density, &grid, None)));
        }
        FamilySpec::Vortex { epsilons } => {
            for &e in epsilons {
                let f = grid
                    .nodes
                    .iter()
                    .map(|x| if x.norm() < e { 1.0 / (e * e) } else { 0.0 })
                    .collect();
                family.push((format!("epsilon={e}"), f));
            }
        }
        FamilySpec::Single { density } => {
            family.push(("single".into(), sample_density(density, &grid, None)))
        }
    }
    let functions: Vec<Vec<f64>> = family.iter().map(|(_, f)| f.clone()).collect();
    let dom = build_dominating_n(&functions, &weights)?;
    let powers = [1.5, 2.0, 3.0]
        .into_iter()
        .map(|p| Ok((p, NFunction::power(p, 1.0)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut header: Vec<String> = ["member", "l1"].map(String::from).to_vec();
    header.extend(powers.iter().map(|(p, _)| format!("lp_{p}")));
    header.push("luxemburg".into());
    let mut rows = Vec::new();
    for (label, f) in &family {
        let mut row = vec![
            label.clone(),
            num(f.iter().zip(&weights).map(|(v, w)| v.abs() * w).sum()),
        ];
        for (_, a) in &powers {
            row.push(num(luxemburg_norm(f, &weights, a)?));
        }
        row.push(match &dom.function {
            Some(a) => num(luxemburg_norm(f, &weights, a)?),
            None => String::new(),
        });
        rows.push(row);
    }
    out.write_table("orlicz_members.csv", &header, &rows)?;
    if let Some(a) = &dom.function {
        a.write_csv(
            std::fs::File::create(out.file("nfunction.csv"))
                .map_err(CliError::io("writing nfunction.csv"))?,
        )?;
    }
    let status = match dom.status {
        DominationStatus::Built => "built",
        DominationStatus::TailsDoNotDecay => "not_uniformly_integrable",
    };
    let results = json!({
        "domination": status,
        "bound": dom.bound,
        "delta_constant": dom.delta_constant,
        "base_level": dom.base_level,
        "tails": dom.tails,
        "members": family.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>(),
    });
    out.write_json(
        "manifest.json",
        &manifest("orlicz-demo", cfg, None, status, None, results)?,
    )
}

fn height_field(spec: &HeightSpec, grid: &QuadratureGrid) -> Result<HeightField> {
    let f = |x: Vec2| match spec {
        HeightSpec::Constant { value } => *value,
        HeightSpec::Linear { base, gradient } => (base + gradient.dot(x)).max(0.0),
        HeightSpec::Gaussian {
            center,
            sigma,
            floor,
        } => DensitySpec::Gaussian {
            center: *center,
            sigma: *sigma,
            floor: *floor,
        }
        .eval(x),
    };
    HeightField::from_fn(grid, f).map_err(|e| CliError::Invalid(format!("at `shallow.h0`: {e}")))
}

pub fn shallow_run(inv: &Invocation) -> Result<()> {
    let cfg = &inv.cfg;
    let spec = cfg.shallow.as_ref().ok_or_else(|| {
        CliError::Invalid("at `shallow`: required by the shallow-run command".into())
    })?;
    let out = OutDir::create(&inv.out)?;
    let grid = grid_of(&cfg.domain);
    let h0 = height_field(&spec.h0, &grid)?;
    let fluid = h0.total(&grid);
    if !(fluid > 0.0) {
        return Err(CliError::Invalid(
            "at `shallow.h0`: height integrates to zero".into(),
        ));
    }
    let mut mu = build_measure(&cfg.measure, fluid)?;
    let factor = fluid / mu.total_mass();
    if (factor - 1.0).abs() > 0.01 {
        warn!("rescaling particle masses by {factor:.6} to the fluid volume {fluid:.6}");
    }
    if factor != 1.0 {
        let masses = mu.masses.iter().map(|m| m * factor).collect();
        mu = DiscreteMeasure::new(mu.points.clone(), masses, mu.r0)?;
    }
    let opts = ShallowOptions {
        dynamics: cfg.dynamics(),
        consistency: spec.consistency.clone(),
        outer_per_step: spec.outer_per_step,
    };
    let initial = sw_consistency_iterate(&grid, &mu, &h0, None, &spec.consistency)?;
    let initial_summary = json!({
        "status": initial.status,
        "failure": initial.failure,
        "iterations": initial.history.len(),
        "residuals": initial.history.iter().map(|r| r.residual).collect::<Vec<_>>(),
        "monotone_after_3": initial.monotone_for(3),
    });
    let density = Some(Arc::new(h0.values.clone()));
    let mut state = match FlowState::with_density(&grid, &mu, cfg.horizon, &cfg.ot, density) {
        Ok(s) => s,
        Err(e) => {
            return fail(
                &out,
                "shallow-run",
                inv,
                None,
                e.into(),
                json!({"initial_consistency": initial_summary}),
            )
        }
    };
    let facts = inv.facts(&state, mu.r0)?;
    let mut statuses = Vec::new();
    let outcome = sw_advance(&mut state, &grid, cfg.horizon, &opts, &mut statuses);
    state
        .write_trajectory_csv(&out.file("trajectory.csv"))
        .map_err(CliError::from)?;
    let ht = HeightField {
        values: state
            .density
            .as_deref()
            .cloned()
            .unwrap_or_else(|| h0.values.clone()),
    };
    ht.write_csv(&grid, &out.file("height.csv"))?;
    if let Err(e) = outcome {
        let partial = json!({"reached_t": state.t, "initial_consistency": initial_summary});
        return fail(&out, "shallow-run", inv, Some(&facts), e.into(), partial);
    }
    let f0 = reconstruct_f(&state, &grid, 0.0)?;
    let ft = reconstruct_f(&state, &grid, state.t)?;
    ft.write_csv(&grid, &out.file("flow.csv"))?;
    let bins = cfg.diagnostics.bins;
    let diameter = mean_cell_diameter(&grid, &f0.cell_index, state.len());
    let converged = statuses
        .iter()
        .filter(|s| **s == ConsistencyStatus::Converged)
        .count();
    let results = json!({
        "initial_consistency": initial_summary,
        "steps_converged": converged,
        "steps_not_converged": statuses.len() - converged,
        "fluid_volume": {"initial": fluid, "final": ht.total(&grid)},
        "weighted_pushforward": {
            "initial": weighted_pushforward_stat(&f0, &grid, bins, &h0, &h0)?,
            "final": weighted_pushforward_stat(&ft, &grid, bins, &h0, &ht)?,
            "tolerance": bin_tolerance(&grid, bins, diameter),
        },
        "stats": state.stats,
    });
    out.write_json(
        "manifest.json",
        &manifest("shallow-run", cfg, Some(&facts), "ok", None, results)?,
    )
}

pub fn dump_potential(inv: &Invocation) -> Result<()> {
    let cfg = &inv.cfg;
    let out = OutDir::create(&inv.out)?;
    let grid = grid_of(&cfg.domain);
    let mu = build_measure(&cfg.measure, grid.total_weight())?;
    let state = match run_through(&grid, &mu, &[], cfg.horizon, &cfg.dynamics()) {
        Ok(s) => s,
        Err(e) => return fail(&out, "dump-potential", inv, None, e, Value::Null),
    };
    let pot = ConvexPotential::with_density(
        &grid,
        state.points.clone(),
        state.weights.clone(),
        state.density.as_deref().map(|d| &d[..]),
    )?;
    std::fs::write(out.file("potential.json"), pot.to_json()? + "\n")
        .map_err(CliError::io("writing potential.json"))?;
    pot.write_csv(&grid, &out.file("potential.csv"))?;
    let dual = LegendreDual::new(&pot);
    let rows: Vec<Vec<String>> = (0..pot.len())
        .map(|i| {
            let g = dual.selections[i];
            vec![
                i.to_string(),
                num(dual.slopes[i].x),
                num(dual.slopes[i].y),
                num(state.masses[i]),
                num(dual.values[i]),
                num(g.x),
                num(g.y),
            ]
        })
        .collect();
    out.write_table(
        "legendre.csv",
        &[
            "i",
            "X1",
            "X2",
            "mass",
            "P_star",
            "grad_P_star_x",
            "grad_P_star_y",
        ]
        .map(String::from),
        &rows,
    )?;
    let facts = inv.facts(&state, mu.r0)?;
    let results = json!({"t": state.t, "particles": pot.len()});
    out.write_json(
        "manifest.json",
        &manifest("dump-potential", cfg, Some(&facts), "ok", None, results)?,
    )
}
