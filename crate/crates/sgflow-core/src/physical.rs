//! Lagrangian flow in physical space, `F_t = ∇P*_t ∘ Φ_t ∘ ∇P_0`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{j, FlowState, Snapshot};
use crate::error::{Result, SgError};
use crate::measure::{GridField, PhysicalDomain, QuadratureGrid};
use crate::ot::tessellate_weighted;
use crate::search::PowerSearch;
use crate::sum::{ksum, KahanSum};
use crate::vec2::Vec2;

/// Per-node images of a flow map with the label of each node's cell.
#[derive(Clone, Debug)]
pub struct PhysicalFlowField {
    pub domain: PhysicalDomain,
    pub t: f64,
    pub images: Vec<Vec2>,
    pub cell_index: Vec<u32>,
}

impl PhysicalFlowField {
    pub fn to_grid_field(&self, grid: &QuadratureGrid) -> GridField<Vec2> {
        GridField::from_node_values(grid, &self.images)
    }

    /// CSV with columns `x,y,Fx,Fy,cell_index`, one row per node.
    pub fn write_csv(&self, grid: &QuadratureGrid, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "Fx", "Fy", "cell_index"])?;
        for ((x, f), c) in grid.nodes.iter().zip(&self.images).zip(&self.cell_index) {
            w.write_record(&[
                x.x.to_string(),
                x.y.to_string(),
                f.x.to_string(),
                f.y.to_string(),
                c.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Node-to-particle assignment of a snapshot.
pub fn assignment(grid: &QuadratureGrid, snap: &Snapshot) -> Vec<u32> {
    tessellate_weighted(grid, &snap.points, &snap.weights, None).assignment
}

fn initial(state: &FlowState) -> Result<&Snapshot> {
    state
        .history
        .first()
        .filter(|s| s.step == 0)
        .ok_or(SgError::InsufficientHistory { needed: 1, have: 0 })
}

fn map_cells(
    grid: &QuadratureGrid,
    t: f64,
    cells: Vec<u32>,
    targets: &[Vec2],
) -> Result<PhysicalFlowField> {
    let mut images = Vec::with_capacity(cells.len());
    for &i in &cells {
        let c = targets[i as usize];
        if !c.is_finite() {
            return Err(SgError::DegenerateCell { index: i as usize });
        }
        images.push(c);
    }
    Ok(PhysicalFlowField {
        domain: grid.domain.clone(),
        t,
        images,
        cell_index: cells,
    })
}

/// `F_t`: each node goes to the selection of the particle whose initial cell holds it.
pub fn reconstruct_f(
    state: &FlowState,
    grid: &QuadratureGrid,
    t: f64,
) -> Result<PhysicalFlowField> {
    let snap = state.snapshot(t)?;
    let cells = assignment(grid, initial(state)?);
    map_cells(grid, snap.t, cells, &snap.centroids)
}

/// `F*_t`: each node goes to the initial selection of the particle whose cell holds it at `t`.
pub fn inverse_f(state: &FlowState, grid: &QuadratureGrid, t: f64) -> Result<PhysicalFlowField> {
    let snap = state.snapshot(t)?;
    let cells = assignment(grid, snap);
    map_cells(grid, snap.t, cells, &initial(state)?.centroids)
}

/// `F*_t ∘ F_t` at every node, evaluating `F*_t` at the off-grid points `F_t(x)`.
pub fn inverse_after_forward(
    state: &FlowState,
    grid: &QuadratureGrid,
    t: f64,
) -> Result<PhysicalFlowField> {
    let forward = reconstruct_f(state, grid, t)?;
    let snap = state.snapshot(t)?;
    let search = PowerSearch::new(&snap.points, &snap.weights);
    let cells: Vec<u32> = forward
        .images
        .par_iter()
        .map(|y| search.argmax(*y, 0).0 as u32)
        .collect();
    map_cells(grid, snap.t, cells, &initial(state)?.centroids)
}

/// Mean over nonempty cells of the largest distance between two nodes of the cell.
pub fn mean_cell_diameter(grid: &QuadratureGrid, cells: &[u32], n: usize) -> f64 {
    let mut members: Vec<Vec<Vec2>> = vec![Vec::new(); n];
    for (k, &i) in cells.iter().enumerate() {
        members[i as usize].push(grid.nodes[k]);
    }
    let diams: Vec<f64> = members
        .into_par_iter()
        .filter(|m| !m.is_empty())
        .map(|m| {
            let hull = convex_hull(m);
            let mut d: f64 = 0.0;
            for (a, p) in hull.iter().enumerate() {
                for q in &hull[a + 1..] {
                    d = d.max(p.dist(*q));
                }
            }
            d
        })
        .collect();
    ksum(diams.iter().copied()) / diams.len().max(1) as f64
}

fn convex_hull(mut pts: Vec<Vec2>) -> Vec<Vec2> {
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vec2> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vec2>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 {
                let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
                if (b - a).cross(p - a) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Largest relative deviation between pushed and reference bin masses.
///
/// The domain's bounding box is cut into `bins × bins` boxes. Node `k` sends
/// `source[k]·h²` to the box containing its image, and the reference mass of a
/// box is `Σ reference[k]·h²` over the nodes inside it (both default to 1).
/// Deviations are divided by the mean reference mass of the boxes that meet
/// the domain.
pub fn pushforward_bin_stat(
    field: &PhysicalFlowField,
    grid: &QuadratureGrid,
    bins: usize,
    source: Option<&[f64]>,
    reference: Option<&[f64]>,
) -> Result<f64> {
    if bins == 0 {
        return Err(SgError::InvalidArgument(
            "bin count must be positive".into(),
        ));
    }
    if field.images.len() != grid.len() {
        return Err(SgError::MismatchedGrids(
            "flow field and grid differ".into(),
        ));
    }
    let (lo, hi) = grid.domain.bounding_box();
    let size = hi - lo;
    let bin_of = |p: Vec2| {
        let bx = (((p.x - lo.x) / size.x * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        let by = (((p.y - lo.y) / size.y * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        by * bins + bx
    };
    let w = grid.node_weight();
    let mut pushed = vec![KahanSum::new(); bins * bins];
    let mut refm = vec![KahanSum::new(); bins * bins];
    for k in 0..grid.len() {
        pushed[bin_of(field.images[k])].add(w * source.map_or(1.0, |s| s[k]));
        refm[bin_of(grid.nodes[k])].add(w * reference.map_or(1.0, |s| s[k]));
    }
    let occupied: Vec<usize> = (0..bins * bins)
        .filter(|&b| refm[b].value() > 0.0)
        .collect();
    let mean = ksum(occupied.iter().map(|&b| refm[b].value())) / occupied.len().max(1) as f64;
    if !(mean > 0.0) {
        return Err(SgError::ZeroMassRegion { index: 0 });
    }
    Ok((0..bins * bins)
        .map(|b| (pushed[b].value() - refm[b].value()).abs() / mean)
        .fold(0.0, f64::max))
}

/// Allowance for `pushforward_bin_stat` when mass moves by up to `diameter`:
/// twice the ratio of `diameter` to the bin width.
pub fn bin_tolerance(grid: &QuadratureGrid, bins: usize, diameter: f64) -> f64 {
    let (lo, hi) = grid.domain.bounding_box();
    let width = (hi.x - lo.x).min(hi.y - lo.y) / bins as f64;
    2.0 * diameter / width
}

/// Measure-preservation statistic of `F` against Lebesgue measure.
pub fn measure_preservation_stat(
    field: &PhysicalFlowField,
    grid: &QuadratureGrid,
    bins: usize,
) -> Result<f64> {
    pushforward_bin_stat(field, grid, bins, None, None)
}

/// `Z(x, t) = X_{i(x)}(t)` where `i(x)` labels the initial cell of `x`.
pub fn z_field(state: &FlowState, grid: &QuadratureGrid, t: f64) -> Result<PhysicalFlowField> {
    let snap = state.snapshot(t)?;
    let cells = assignment(grid, initial(state)?);
    map_cells(grid, snap.t, cells, &snap.points)
}

/// Test functions `φ(x, t) = s·x^a y^b e_k · (1 − (t/T)²)³` for `a + b ≤ degree`, `k ∈ {1, 2}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestFunctionSet {
    pub degree: u32,
    /// End of the time bump; defaults to the last saved time.
    pub horizon: Option<f64>,
    pub scale: f64,
}

impl Default for TestFunctionSet {
    fn default() -> Self {
        TestFunctionSet {
            degree: 2,
            horizon: None,
            scale: 1.0,
        }
    }
}

impl TestFunctionSet {
    pub fn monomials(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for total in 0..=self.degree {
            for a in (0..=total).rev() {
                out.push((a, total - a));
            }
        }
        out
    }
}

pub fn time_bump(t: f64, horizon: f64) -> (f64, f64) {
    let u = t / horizon;
    if !(0.0..1.0).contains(&u) {
        return (0.0, 0.0);
    }
    let s = 1.0 - u * u;
    (s * s * s, -6.0 * u * s * s / horizon)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualReport {
    pub max_abs: f64,
    /// One entry per (monomial, component), components alternating.
    pub values: Vec<f64>,
    pub horizon: f64,
    pub saved_times: usize,
}

/// Weak-form residual `∫∫ [Z·∂_tφ + J(Z − F)·φ] dx dt + ∫ ∇P_0·φ(x, 0) dx`.
///
/// `Z` and `F` are constant on initial cells and interpolated linearly in time
/// between saved snapshots; each interval uses 4-point Gauss quadrature.
pub fn z_residual(
    state: &FlowState,
    grid: &QuadratureGrid,
    tests: &TestFunctionSet,
) -> Result<ResidualReport> {
    let have = state.history.len();
    if have < 3 {
        return Err(SgError::InsufficientHistory { needed: 3, have });
    }
    let first = initial(state)?;
    let horizon = tests.horizon.unwrap_or(state.history[have - 1].t);
    if !(horizon > 0.0) {
        return Err(SgError::InvalidArgument(format!(
            "time bump horizon must be positive, got {horizon}"
        )));
    }
    let monos = tests.monomials();
    let n = state.len();
    // spatial moments of each initial cell
    let cells = assignment(grid, first);
    let w = grid.node_weight();
    let mut moments = vec![vec![KahanSum::new(); n]; monos.len()];
    for (k, &i) in cells.iter().enumerate() {
        let x = grid.nodes[k];
        for (q, &(a, b)) in monos.iter().enumerate() {
            moments[q][i as usize].add(tests.scale * w * x.x.powi(a as i32) * x.y.powi(b as i32));
        }
    }
    let moments: Vec<Vec<f64>> = moments
        .iter()
        .map(|m| m.iter().map(|s| s.value()).collect())
        .collect();

    const GAUSS: [(f64, f64); 4] = [
        (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
        (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
        (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
        (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    ];
    let mut acc = vec![KahanSum::new(); 2 * monos.len()];
    let mut field = vec![Vec2::ZERO; n];
    for pair in state.history.windows(2) {
        let (s0, s1) = (&pair[0], &pair[1]);
        let (t0, t1) = (s0.t, s1.t);
        if t0 >= horizon {
            break;
        }
        let len = t1.min(horizon) - t0;
        for &(node, weight) in &GAUSS {
            let tau = t0 + 0.5 * len * (node + 1.0);
            let lam = (tau - t0) / (t1 - t0);
            let (b, db) = time_bump(tau, horizon);
            for i in 0..n {
                let z = s0.points[i] * (1.0 - lam) + s1.points[i] * lam;
                let f = s0.centroids[i] * (1.0 - lam) + s1.centroids[i] * lam;
                field[i] = (z * db + j(z - f) * b) * (0.5 * len * weight);
            }
            accumulate(&mut acc, &moments, &field);
        }
    }
    let (b0, _) = time_bump(first.t, horizon);
    for (i, v) in field.iter_mut().enumerate() {
        *v = first.points[i] * b0;
    }
    accumulate(&mut acc, &moments, &field);
    let values: Vec<f64> = acc.iter().map(|s| s.value()).collect();
    Ok(ResidualReport {
        max_abs: values.iter().fold(0.0, |m, v| m.max(v.abs())),
        values,
        horizon,
        saved_times: have,
    })
}

fn accumulate(acc: &mut [KahanSum], moments: &[Vec<f64>], field: &[Vec2]) {
    for (q, m) in moments.iter().enumerate() {
        let (mut sx, mut sy) = (KahanSum::new(), KahanSum::new());
        for (mi, v) in m.iter().zip(field) {
            sx.add(mi * v.x);
            sy.add(mi * v.y);
        }
        acc[2 * q].add(sx.value());
        acc[2 * q + 1].add(sy.value());
    }
}
