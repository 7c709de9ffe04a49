//! Semidiscrete optimal transport between quadrature-Lebesgue (optionally
//! density-weighted) measure on the physical domain and a particle cloud.
//!
//! The cell of particle `i` is `{x : x·X_i − ψ_i ≥ x·X_j − ψ_j ∀j}`. Weights
//! are found by damped Newton ascent on the concave Kantorovich functional
//! `K(ψ) = Σ_i [ψ_i (mass_i(ψ) − m_i) − X_i·moment_i(ψ)]`, whose gradient is the
//! cell-mass error.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};
use crate::measure::{DiscreteMeasure, MassRule, QuadratureGrid};
use crate::search::PowerSearch;
use crate::sum::{ksum, KahanSum, KahanSum2};
use crate::vec2::Vec2;

const CHUNK: usize = 4096;
const MAX_HALVINGS: usize = 30;

/// Kantorovich weights `ψ`, gauge-fixed so that `ψ_0 = 0`. Serializes as a
/// plain JSON array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KantorovichWeights(pub Vec<f64>);

impl KantorovichWeights {
    pub fn zeros(n: usize) -> Self {
        KantorovichWeights(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn gauge_fixed(mut self) -> Self {
        gauge_fix(&mut self.0);
        self
    }
}

fn gauge_fix(psi: &mut [f64]) {
    if let Some(&p0) = psi.first() {
        for p in psi.iter_mut() {
            *p -= p0;
        }
    }
}

/// Assignment of quadrature nodes to Laguerre cells, with cell masses and
/// centroids. Empty cells have mass zero and a NaN centroid.
#[derive(Clone, Debug)]
pub struct LaguerreTessellation {
    pub assignment: Vec<u32>,
    pub cell_masses: Vec<f64>,
    pub cell_centroids: Vec<Vec2>,
    /// Mass-weighted first moments `Σ w x` per cell.
    pub cell_moments: Vec<Vec2>,
    /// Maximum affine score at each node, i.e. the potential `P(x_n)`.
    pub scores: Vec<f64>,
    /// Under the subpixel rule, contributions `(i, j, c)` to `∂mass_i/∂ψ_j = c`
    /// from pixels split between cells `i` and `j`.
    pub interfaces: Vec<(u32, u32, f64)>,
}

impl LaguerreTessellation {
    pub fn len(&self) -> usize {
        self.cell_masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_masses.is_empty()
    }

    pub fn empty_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.cell_masses
            .iter()
            .enumerate()
            .filter(|(_, m)| **m <= 0.0)
            .map(|(i, _)| i)
    }

    pub fn first_empty(&self) -> Option<usize> {
        self.empty_cells().next()
    }

    pub fn total_mass(&self) -> f64 {
        ksum(self.cell_masses.iter().copied())
    }
}

/// Tessellate the quadrature grid for `mu` and weights `w`.
pub fn tessellate(
    grid: &QuadratureGrid,
    mu: &DiscreteMeasure,
    w: &KantorovichWeights,
) -> LaguerreTessellation {
    tessellate_weighted(grid, &mu.points, w.as_slice(), None)
}

/// Tessellation with optional per-node density multiplying the node weights.
pub fn tessellate_weighted(
    grid: &QuadratureGrid,
    points: &[Vec2],
    psi: &[f64],
    density: Option<&[f64]>,
) -> LaguerreTessellation {
    let search = PowerSearch::new(points, psi);
    let nodes = &grid.nodes;
    let mut assignment = vec![0u32; nodes.len()];
    let mut scores = vec![0.0f64; nodes.len()];
    assignment
        .par_chunks_mut(CHUNK)
        .zip(scores.par_chunks_mut(CHUNK))
        .enumerate()
        .for_each(|(c, (assign, score))| {
            let offset = c * CHUNK;
            let mut hint = 0usize;
            for (k, (a, s)) in assign.iter_mut().zip(score.iter_mut()).enumerate() {
                let (i, v) = search.argmax(nodes[offset + k], hint);
                hint = i;
                *a = i as u32;
                *s = v;
            }
        });
    summarize(grid, points, psi, &search, assignment, scores, density)
}

/// `(cell, mass, moment)` contributed by one node or pixel piece.
type Share = (u32, f64, Vec2);
/// `(a, b, coupling)` for a shared edge between cells `a < b`.
type Interface = (u32, u32, f64);

fn summarize(
    grid: &QuadratureGrid,
    points: &[Vec2],
    psi: &[f64],
    search: &PowerSearch,
    assignment: Vec<u32>,
    scores: Vec<f64>,
    density: Option<&[f64]>,
) -> LaguerreTessellation {
    let n = points.len();
    let w = grid.node_weight();
    let h = grid.spacing();
    let rule = grid.rule;
    let chunks: Vec<(Vec<Share>, Vec<Interface>)> = (0..assignment.len().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut shares = Vec::with_capacity(CHUNK);
            let mut interfaces = Vec::new();
            let mut others: Vec<u32> = Vec::with_capacity(8);
            let mut corners = HashMap::new();
            for k in c * CHUNK..((c + 1) * CHUNK).min(assignment.len()) {
                let ik = assignment[k];
                let wk = match density {
                    Some(d) => w * d[k],
                    None => w,
                };
                let x = grid.nodes[k];
                if rule == MassRule::Subpixel {
                    others.clear();
                    others.push(ik);
                    for k2 in grid.neighbors(k) {
                        let j = assignment[k2];
                        if !others.contains(&j) {
                            others.push(j);
                        }
                    }
                    for y in grid.missing_neighbors(k) {
                        let j = search.argmax(y, ik as usize).0 as u32;
                        if !others.contains(&j) {
                            others.push(j);
                        }
                    }
                    if others.len() > 1 {
                        complete_candidates(x, h, points, psi, search, &mut corners, &mut others);
                        let scale = wk / (h * h);
                        for &a in &others {
                            let a = a as usize;
                            let piece = clip_pixel(x, h, points, psi, a, &others, |b, len| {
                                if a < b {
                                    interfaces.push((
                                        a as u32,
                                        b as u32,
                                        scale * len / points[a].dist(points[b]),
                                    ));
                                }
                            });
                            if let Some((area, centroid)) = piece {
                                shares.push((
                                    a as u32,
                                    scale * area,
                                    (x + centroid) * (scale * area),
                                ));
                            }
                        }
                        continue;
                    }
                }
                shares.push((ik, wk, x * wk));
            }
            (shares, interfaces)
        })
        .collect();
    let mut mass = vec![KahanSum::new(); n];
    let mut moment = vec![KahanSum2::default(); n];
    let mut interfaces = Vec::new();
    for (shares, pairs) in chunks {
        for (i, m, mo) in shares {
            mass[i as usize].add(m);
            moment[i as usize].add(mo);
        }
        interfaces.extend(pairs);
    }
    let cell_masses: Vec<f64> = mass.iter().map(|m| m.value()).collect();
    let cell_moments: Vec<Vec2> = moment.iter().map(|m| m.value()).collect();
    let cell_centroids = cell_masses
        .iter()
        .zip(&cell_moments)
        .map(|(&m, &mo)| {
            if m > 0.0 {
                mo / m
            } else {
                Vec2::new(f64::NAN, f64::NAN)
            }
        })
        .collect();
    LaguerreTessellation {
        assignment,
        cell_masses,
        cell_centroids,
        cell_moments,
        scores,
        interfaces,
    }
}

/// Cell centroids, the selection from `∂P*(X_i)` used throughout.
pub fn cell_centroid_map(tess: &LaguerreTessellation) -> Result<Vec<Vec2>> {
    if let Some(index) = tess.first_empty() {
        return Err(SgError::DegenerateCell { index });
    }
    Ok(tess.cell_centroids.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Relative mass tolerance: stop when `max_i |mass_i − m_i| ≤ tol · Σ m`.
    pub tol: f64,
    pub max_iter: usize,
    /// Optional CSV log of `iter, max_mass_error, step`.
    pub log_path: Option<PathBuf>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-3,
            max_iter: 200,
            log_path: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub max_mass_error: f64,
    pub step: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub max_mass_error: f64,
    /// Number of cells that were empty and repaired by coordinate ascent.
    pub repaired_cells: usize,
    /// Factor applied to the target masses to match the quadrature total.
    pub mass_rescale: f64,
    pub history: Vec<IterationRecord>,
}

#[derive(Clone, Debug)]
pub struct OtSolution {
    pub weights: KantorovichWeights,
    pub tess: LaguerreTessellation,
    /// Target masses after rescaling to the quadrature total.
    pub targets: Vec<f64>,
    pub report: SolveReport,
}

/// Solve `∇P ♯ χ_Ω = μ` on the quadrature grid from a cold start.
pub fn solve_weights(
    grid: &QuadratureGrid,
    mu: &DiscreteMeasure,
    opts: &SolverOptions,
) -> Result<OtSolution> {
    solve_semidiscrete(grid, &mu.points, &mu.masses, None, None, opts)
}

/// Cold-start weights: the Voronoi diagram of the particle cloud shrunk
/// affinely into the domain, which has no empty cells in the continuum.
pub fn cold_start(grid: &QuadratureGrid, points: &[Vec2], masses: &[f64]) -> Vec<f64> {
    let total = ksum(masses.iter().copied());
    let bx = ksum(points.iter().zip(masses).map(|(p, m)| p.x * m)) / total;
    let by = ksum(points.iter().zip(masses).map(|(p, m)| p.y * m)) / total;
    let bary = Vec2::new(bx, by);
    let spread = points.iter().map(|p| p.dist(bary)).fold(0.0, f64::max);
    if spread == 0.0 {
        return vec![0.0; points.len()];
    }
    let s = 0.9 * grid.domain.inradius() / spread;
    let c = grid.domain.center();
    points
        .iter()
        .map(|p| (c + (*p - bary) * s).norm_sq() / (2.0 * s))
        .collect()
}

/// General solver: optional per-node `density` and optional warm start.
pub fn solve_semidiscrete(
    grid: &QuadratureGrid,
    points: &[Vec2],
    masses: &[f64],
    density: Option<&[f64]>,
    init: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<OtSolution> {
    let n = points.len();
    if n == 0 || masses.len() != n {
        return Err(SgError::InvalidArgument(
            "points and masses must be nonempty and of equal length".into(),
        ));
    }
    if let Some(d) = density {
        if d.len() != grid.len() {
            return Err(SgError::MismatchedGrids(format!(
                "density has {} entries for {} nodes",
                d.len(),
                grid.len()
            )));
        }
    }
    let source_total = match density {
        Some(d) => grid.integrate(d),
        None => grid.total_weight(),
    };
    let target_total = ksum(masses.iter().copied());
    if !(source_total > 0.0) {
        return Err(SgError::ZeroMassRegion { index: 0 });
    }
    let rescale = source_total / target_total;
    if (rescale - 1.0).abs() > 0.01 {
        warn!(
            "target mass {target_total:.6} differs from domain mass {source_total:.6} by more than 1%; rescaling"
        );
    }
    let targets: Vec<f64> = masses.iter().map(|m| m * rescale).collect();
    let abs_tol = opts.tol * source_total;

    let warm = init.filter(|p| p.len() == n);
    let mut psi: Vec<f64> = match warm {
        Some(p) => p.to_vec(),
        None => cold_start(grid, points, &targets),
    };
    let mut log = match &opts.log_path {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(f, "iter,max_mass_error,step")?;
            Some(f)
        }
        None => None,
    };

    let mut tess = tessellate_weighted(grid, points, &psi, density);
    if warm.is_some() {
        // a stale warm start can be far worse than the cold start
        let largest = targets.iter().copied().fold(0.0, f64::max);
        if max_error(&tess.cell_masses, &targets) > largest {
            let cold = cold_start(grid, points, &targets);
            let t = tessellate_weighted(grid, points, &cold, density);
            if max_error(&t.cell_masses, &targets) < max_error(&tess.cell_masses, &targets) {
                psi = cold;
                tess = t;
            }
        }
    }
    let mut report = SolveReport {
        mass_rescale: rescale,
        ..Default::default()
    };
    report.repaired_cells +=
        repair_empty_cells(grid, points, &mut psi, &targets, density, &mut tess)?;
    if report.repaired_cells > 0 {
        tess = tessellate_weighted(grid, points, &psi, density);
    }

    let mut iter = 0;
    loop {
        let max_err = max_error(&tess.cell_masses, &targets);
        report.max_mass_error = max_err;
        if max_err <= abs_tol {
            break;
        }
        if iter >= opts.max_iter {
            return Err(SgError::NonConvergence {
                iterations: iter,
                max_error: max_err,
                target: abs_tol,
            });
        }
        iter += 1;

        let residual: Vec<f64> = tess
            .cell_masses
            .iter()
            .zip(&targets)
            .map(|(a, b)| a - b)
            .collect();
        let lap = mass_jacobian(grid, points, &tess, density);
        let delta = lap.solve(&residual);
        let k0 = dual_functional(points, &psi, &targets, &tess);
        let r0 = l2_error(&tess.cell_masses, &targets);

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = psi.iter().zip(&delta).map(|(p, d)| p + step * d).collect();
            let t = tessellate_weighted(grid, points, &trial, density);
            let improved = dual_functional(points, &trial, &targets, &t) > k0
                || l2_error(&t.cell_masses, &targets) <= (1.0 - 0.5 * step) * r0;
            if t.first_empty().is_none() && improved {
                accepted = Some((trial, t));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, t)) = accepted else {
            debug!("line search failed at iteration {iter} with max error {max_err:.3e}");
            return Err(SgError::NonConvergence {
                iterations: iter,
                max_error: max_err,
                target: abs_tol,
            });
        };
        psi = trial;
        tess = t;
        let new_err = max_error(&tess.cell_masses, &targets);
        report.history.push(IterationRecord {
            iter,
            max_mass_error: new_err,
            step,
        });
        if let Some(f) = log.as_mut() {
            writeln!(f, "{iter},{new_err:e},{step}")?;
        }
    }
    if let Some(f) = log.as_mut() {
        f.flush()?;
    }
    if let Some(index) = tess.first_empty() {
        return Err(SgError::DegenerateCell { index });
    }
    report.iterations = iter;
    gauge_fix(&mut psi);
    Ok(OtSolution {
        weights: KantorovichWeights(psi),
        tess,
        targets,
        report,
    })
}

/// Lloyd-type relaxation: repeatedly moves every point to the centroid of its
/// cell in the optimal partition for the given masses.
pub fn relax_centroidal(
    grid: &QuadratureGrid,
    mut points: Vec<Vec2>,
    masses: &[f64],
    iterations: usize,
    opts: &SolverOptions,
) -> Result<Vec<Vec2>> {
    let mut psi: Option<Vec<f64>> = None;
    for it in 0..iterations {
        let sol = solve_semidiscrete(grid, &points, masses, None, psi.as_deref(), opts)
            .map_err(|e| e.context(format!("centroidal relaxation step {it}")))?;
        points = sol.tess.cell_centroids;
        psi = Some(sol.weights.0);
    }
    Ok(points)
}

const CAP: usize = 24;
const SIDE: usize = usize::MAX;

/// Convex polygon relative to a pixel centre; each vertex carries the label
/// of the edge leaving it (`SIDE` for the pixel boundary).
struct Piece {
    verts: [(Vec2, usize); CAP],
    len: usize,
}

/// Part of the `h × h` pixel centred at `x` where `a` has the largest score
/// among `candidates`, in coordinates relative to `x`.
fn clip_piece(
    x: Vec2,
    h: f64,
    points: &[Vec2],
    psi: &[f64],
    a: usize,
    candidates: &[u32],
) -> Option<Piece> {
    let r = 0.5 * h;
    let mut poly = Piece {
        verts: [(Vec2::ZERO, SIDE); CAP],
        len: 4,
    };
    poly.verts[..4].copy_from_slice(&[
        (Vec2::new(-r, -r), SIDE),
        (Vec2::new(r, -r), SIDE),
        (Vec2::new(r, r), SIDE),
        (Vec2::new(-r, r), SIDE),
    ]);
    let mut next = [(Vec2::ZERO, SIDE); CAP];
    let sa = x.dot(points[a]) - psi[a];
    for &b in candidates {
        let b = b as usize;
        if b == a {
            continue;
        }
        // a wins where u·dir + gap ≥ 0
        let dir = points[a] - points[b];
        let gap = sa - (x.dot(points[b]) - psi[b]);
        let f = |u: Vec2| u.dot(dir) + gap;
        let len = poly.len;
        let mut m = 0;
        for k in 0..len {
            let (p, label) = poly.verts[k];
            let q = poly.verts[(k + 1) % len].0;
            let (fp, fq) = (f(p), f(q));
            if fp >= 0.0 {
                next[m] = (p, label);
                m += 1;
                if fq < 0.0 {
                    next[m] = (p + (q - p) * (fp / (fp - fq)), b);
                    m += 1;
                }
            } else if fq >= 0.0 {
                next[m] = (p + (q - p) * (fp / (fp - fq)), label);
                m += 1;
            }
            if m + 2 > CAP {
                break;
            }
        }
        if m < 3 {
            return None;
        }
        poly.len = m;
        poly.verts[..m].copy_from_slice(&next[..m]);
    }
    Some(poly)
}

/// As [`clip_piece`], returning `(area, centroid − x)`. `edge(b, len)`
/// receives the length of each side of the piece shared with cell `b`.
fn clip_pixel(
    x: Vec2,
    h: f64,
    points: &[Vec2],
    psi: &[f64],
    a: usize,
    candidates: &[u32],
    mut edge: impl FnMut(usize, f64),
) -> Option<(f64, Vec2)> {
    let poly = clip_piece(x, h, points, psi, a, candidates)?;
    let len = poly.len;
    let mut area2 = 0.0;
    let mut c = Vec2::ZERO;
    for k in 0..len {
        let (p, label) = poly.verts[k];
        let q = poly.verts[(k + 1) % len].0;
        let cross = p.x * q.y - q.x * p.y;
        area2 += cross;
        c += (p + q) * cross;
        if label != SIDE {
            edge(label, p.dist(q));
        }
    }
    if area2 <= 0.0 {
        return None;
    }
    Some((0.5 * area2, c / (3.0 * area2)))
}

/// Adds to `candidates` every cell that meets the pixel centred at `x`.
///
/// A missing piece can only beat the candidates' maximum somewhere in the
/// pixel if it does so at a vertex of their clipped pieces, so the vertices
/// are checked against the full diagram until none is won by an outsider.
fn complete_candidates(
    x: Vec2,
    h: f64,
    points: &[Vec2],
    psi: &[f64],
    search: &PowerSearch,
    corners: &mut HashMap<(i64, i64), u32>,
    candidates: &mut Vec<u32>,
) {
    let r = 0.5 * h;
    let mut settled: Vec<Vec2> = Vec::with_capacity(16);
    let mut checked = 0;
    'outer: while checked < candidates.len() {
        let a = candidates[checked] as usize;
        checked += 1;
        let Some(poly) = clip_piece(x, h, points, psi, a, candidates) else {
            continue;
        };
        for &(v, _) in &poly.verts[..poly.len] {
            let y = x + v;
            if settled.iter().any(|s| s.dist(y) <= 1e-12 * h) {
                continue;
            }
            let j = if v.x.abs() == r && v.y.abs() == r {
                let key = ((y.x / r).round() as i64, (y.y / r).round() as i64);
                *corners
                    .entry(key)
                    .or_insert_with(|| search.argmax(y, a).0 as u32)
            } else {
                search.argmax(y, a).0 as u32
            };
            if !candidates.contains(&j) && search.score(y, j as usize) > y.dot(points[a]) - psi[a] {
                candidates.push(j);
                checked = 0;
                continue 'outer;
            }
            settled.push(y);
        }
    }
}

/// Split of the pixel centred at `x` among `candidates` by largest score:
/// `(cell, area fraction, centroid)` for every nonempty piece.
pub fn pixel_shares(
    x: Vec2,
    h: f64,
    points: &[Vec2],
    psi: &[f64],
    candidates: &[u32],
) -> Vec<(usize, f64, Vec2)> {
    candidates
        .iter()
        .filter_map(|&a| {
            clip_pixel(x, h, points, psi, a as usize, candidates, |_, _| {})
                .map(|(area, c)| (a as usize, area / (h * h), x + c))
        })
        .collect()
}

fn l2_error(masses: &[f64], targets: &[f64]) -> f64 {
    ksum(masses.iter().zip(targets).map(|(a, b)| (a - b) * (a - b))).sqrt()
}

fn max_error(masses: &[f64], targets: &[f64]) -> f64 {
    masses
        .iter()
        .zip(targets)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// `K(ψ)`; concave, with gradient `mass(ψ) − m`.
pub fn dual_functional(
    points: &[Vec2],
    psi: &[f64],
    targets: &[f64],
    tess: &LaguerreTessellation,
) -> f64 {
    ksum(
        (0..points.len()).map(|i| {
            psi[i] * (tess.cell_masses[i] - targets[i]) - points[i].dot(tess.cell_moments[i])
        }),
    )
}

/// Coordinate ascent on empty cells: lower `ψ_i` until the cell captures
/// roughly its target mass, taking the nodes where it gains the most.
fn repair_empty_cells(
    grid: &QuadratureGrid,
    points: &[Vec2],
    psi: &mut [f64],
    targets: &[f64],
    density: Option<&[f64]>,
    tess: &mut LaguerreTessellation,
) -> Result<usize> {
    let w = grid.node_weight();
    let mut repaired = 0;
    let max_rounds = 4 * points.len() + 8;
    for _ in 0..max_rounds {
        let empty: Vec<usize> = tess.empty_cells().collect();
        if empty.is_empty() {
            return Ok(repaired);
        }
        let mut assignment = std::mem::take(&mut tess.assignment);
        let mut scores = std::mem::take(&mut tess.scores);
        let mut gains: Vec<(f64, usize)> = Vec::with_capacity(grid.len());
        for &i in &empty {
            // deficit of piece i below the current maximum at each node
            gains.clear();
            gains.extend(
                grid.nodes
                    .iter()
                    .zip(&scores)
                    .enumerate()
                    .map(|(k, (x, s))| (s - (x.dot(points[i]) - psi[i]), k)),
            );
            gains.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut captured = 0.0;
            let mut count = 0;
            for &(_, k) in gains.iter() {
                captured += w * density.map_or(1.0, |d| d[k]);
                count += 1;
                if captured >= targets[i] {
                    break;
                }
            }
            if captured <= 0.0 {
                return Err(SgError::ZeroMassRegion { index: i });
            }
            let d_in = gains[count - 1].0;
            let shift = match gains.get(count) {
                Some(&(d_out, _)) if d_out > d_in => 0.5 * (d_in + d_out),
                _ => d_in + 1e-12 * (1.0 + d_in.abs()),
            };
            psi[i] -= shift;
            for &(d, k) in gains.iter() {
                if d >= shift {
                    break;
                }
                assignment[k] = i as u32;
                scores[k] = grid.nodes[k].dot(points[i]) - psi[i];
            }
            repaired += 1;
        }
        let search = PowerSearch::new(points, psi);
        *tess = summarize(grid, points, psi, &search, assignment, scores, density);
    }
    let index = tess.first_empty().unwrap_or(0);
    Err(SgError::DegenerateCell { index })
}

/// Sparse symmetric `A = −∂mass/∂ψ`: a weighted graph Laplacian with edge
/// weight `∫_{∂C_i ∩ ∂C_j} ρ / |X_i − X_j|` between neighbouring cells.
#[derive(Clone, Debug)]
pub struct BoundaryLaplacian {
    n: usize,
    diag: Vec<f64>,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Estimate shared boundary lengths from lattice edges whose endpoints lie in
/// different cells. A straight interface with unit normal `n` crosses
/// `L (|n_x| + |n_y|) / h` lattice edges per length `L`.
pub fn boundary_laplacian(
    grid: &QuadratureGrid,
    points: &[Vec2],
    assignment: &[u32],
    density: Option<&[f64]>,
) -> BoundaryLaplacian {
    let h = grid.spacing();
    let mut pairs: Vec<(u32, u32, f64)> = Vec::new();
    for (k1, k2, _) in grid.edges() {
        let (a, b) = (assignment[k1], assignment[k2]);
        if a == b {
            continue;
        }
        let rho = density.map_or(1.0, |d| 0.5 * (d[k1] + d[k2]));
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        pairs.push((lo, hi, rho));
    }
    pairs.sort_unstable_by_key(|x| (x.0, x.1));

    let n = points.len();
    let mut couplings = Vec::new();
    let mut idx = 0;
    while idx < pairs.len() {
        let (a, b) = (pairs[idx].0, pairs[idx].1);
        let mut acc = KahanSum::new();
        while idx < pairs.len() && pairs[idx].0 == a && pairs[idx].1 == b {
            acc.add(pairs[idx].2);
            idx += 1;
        }
        let (a, b) = (a as usize, b as usize);
        let d = points[a] - points[b];
        let len = d.norm();
        if len == 0.0 {
            continue;
        }
        let normal = d / len;
        let boundary = h * acc.value() / (normal.x.abs() + normal.y.abs());
        couplings.push((a, b, boundary / len));
    }
    BoundaryLaplacian::from_couplings(n, &couplings)
}

/// Newton matrix for the grid's mass rule: the exact derivative of subpixel
/// masses, or the boundary-length estimate for nodal masses.
pub fn mass_jacobian(
    grid: &QuadratureGrid,
    points: &[Vec2],
    tess: &LaguerreTessellation,
    density: Option<&[f64]>,
) -> BoundaryLaplacian {
    if grid.rule == MassRule::Nodal {
        return boundary_laplacian(grid, points, &tess.assignment, density);
    }
    let mut pairs = tess.interfaces.clone();
    pairs.sort_unstable_by_key(|x| (x.0, x.1));
    let mut couplings = Vec::new();
    let mut idx = 0;
    while idx < pairs.len() {
        let (a, b) = (pairs[idx].0, pairs[idx].1);
        let mut acc = KahanSum::new();
        while idx < pairs.len() && pairs[idx].0 == a && pairs[idx].1 == b {
            acc.add(pairs[idx].2);
            idx += 1;
        }
        couplings.push((a as usize, b as usize, acc.value()));
    }
    BoundaryLaplacian::from_couplings(points.len(), &couplings)
}

impl BoundaryLaplacian {
    fn from_couplings(n: usize, couplings: &[(usize, usize, f64)]) -> Self {
        let mut diag = vec![0.0; n];
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(a, b, c) in couplings {
            diag[a] += c;
            diag[b] += c;
            adj[a].push((b, c));
            adj[b].push((a, c));
        }
        let mut row_start = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_start.push(0);
        for row in adj {
            for (j, c) in row {
                cols.push(j);
                vals.push(c);
            }
            row_start.push(cols.len());
        }
        BoundaryLaplacian {
            n,
            diag,
            row_start,
            cols,
            vals,
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let mut s = self.diag[i] * x[i];
            for k in self.row_start[i]..self.row_start[i + 1] {
                s -= self.vals[k] * x[self.cols[k]];
            }
            out[i] = s;
        }
    }

    /// `∂mass_i/∂ψ_j` as a dense entry (tests and diagnostics).
    pub fn mass_derivative(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return -self.diag[i];
        }
        (self.row_start[i]..self.row_start[i + 1])
            .find(|&k| self.cols[k] == j)
            .map_or(0.0, |k| self.vals[k])
    }

    /// Minimum-norm-ish solution of `A δ = r` by Jacobi-preconditioned CG
    /// on the zero-mean subspace, with `δ_0 = 0` afterwards.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mean = ksum(rhs.iter().copied()) / n as f64;
        let b: Vec<f64> = rhs.iter().map(|r| r - mean).collect();
        let max_diag = self.diag.iter().copied().fold(0.0, f64::max);
        if max_diag == 0.0 {
            return vec![0.0; n];
        }
        let reg = 1e-12 * max_diag;
        let precond: Vec<f64> = self
            .diag
            .iter()
            .map(|&d| {
                if d > 0.0 {
                    1.0 / (d + reg)
                } else {
                    1.0 / max_diag
                }
            })
            .collect();
        let apply = |x: &[f64], out: &mut [f64]| {
            self.apply(x, out);
            for i in 0..n {
                out[i] += reg * x[i];
            }
        };
        let mut x = vec![0.0; n];
        let mut r = b.clone();
        let mut z: Vec<f64> = r.iter().zip(&precond).map(|(a, p)| a * p).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz = dot(&r, &z);
        let b_norm = dot(&b, &b).sqrt();
        if b_norm == 0.0 {
            return x;
        }
        for _ in 0..(10 * n).max(100) {
            apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            if dot(&r, &r).sqrt() <= 1e-11 * b_norm {
                break;
            }
            for i in 0..n {
                z[i] = r[i] * precond[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        let x0 = x[0];
        x.iter_mut().for_each(|v| *v -= x0);
        x
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
