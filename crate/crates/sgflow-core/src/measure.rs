//! Physical domains, quadrature grids, discrete measures and grid fields.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};
use crate::search::PowerSearch;
use crate::sum::{ksum, KahanSum};
use crate::vec2::Vec2;

/// Shape of the physical domain. Disks are centered at the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Disk { radius: f64 },
    Rectangle { min: Vec2, max: Vec2 },
}

/// A bounded physical domain inside the ball `B(0, s)`, together with the
/// resolution of its quadrature grid (`n_q` nodes per axis over `[-s, s]^2`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalDomain {
    pub shape: Shape,
    pub s: f64,
    pub n_q: usize,
}

impl PhysicalDomain {
    pub fn new(shape: Shape, s: f64, n_q: usize) -> Result<Self> {
        let d = PhysicalDomain { shape, s, n_q };
        d.validate()?;
        Ok(d)
    }

    /// The unit disk with `S = 1`.
    pub fn unit_disk(n_q: usize) -> Self {
        PhysicalDomain {
            shape: Shape::Disk { radius: 1.0 },
            s: 1.0,
            n_q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(SgError::InvalidDomain(format!(
                "S must be positive, got {}",
                self.s
            )));
        }
        if self.n_q < 2 {
            return Err(SgError::InvalidDomain(format!(
                "n_q must be at least 2, got {}",
                self.n_q
            )));
        }
        let slack = 1e-12 * self.s;
        match &self.shape {
            Shape::Disk { radius } => {
                if !(*radius > 0.0) || *radius > self.s + slack {
                    return Err(SgError::InvalidDomain(format!(
                        "disk radius {radius} must lie in (0, S={}]",
                        self.s
                    )));
                }
            }
            Shape::Rectangle { min, max } => {
                if !(min.x < max.x && min.y < max.y) {
                    return Err(SgError::InvalidDomain(
                        "rectangle min must be below max".into(),
                    ));
                }
                for c in [*min, *max, Vec2::new(min.x, max.y), Vec2::new(max.x, min.y)] {
                    if c.norm() > self.s + slack {
                        return Err(SgError::InvalidDomain(format!(
                            "rectangle corner ({}, {}) lies outside B(0, S={})",
                            c.x, c.y, self.s
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, p: Vec2) -> bool {
        match &self.shape {
            Shape::Disk { radius } => p.norm_sq() <= radius * radius,
            Shape::Rectangle { min, max } => {
                p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y
            }
        }
    }

    /// Exact Lebesgue measure `|Ω|`.
    pub fn area(&self) -> f64 {
        match &self.shape {
            Shape::Disk { radius } => std::f64::consts::PI * radius * radius,
            Shape::Rectangle { min, max } => (max.x - min.x) * (max.y - min.y),
        }
    }

    pub fn center(&self) -> Vec2 {
        match &self.shape {
            Shape::Disk { .. } => Vec2::ZERO,
            Shape::Rectangle { min, max } => (*min + *max) * 0.5,
        }
    }

    /// Radius of the largest ball about [`center`](Self::center) inside the domain.
    pub fn inradius(&self) -> f64 {
        match &self.shape {
            Shape::Disk { radius } => *radius,
            Shape::Rectangle { min, max } => 0.5 * (max.x - min.x).min(max.y - min.y),
        }
    }

    pub fn bounding_box(&self) -> (Vec2, Vec2) {
        match &self.shape {
            Shape::Disk { radius } => (Vec2::new(-radius, -radius), Vec2::new(*radius, *radius)),
            Shape::Rectangle { min, max } => (*min, *max),
        }
    }

    /// Grid spacing `h_q = 2S / n_q`.
    #[inline]
    pub fn spacing(&self) -> f64 {
        2.0 * self.s / self.n_q as f64
    }

    /// Position of lattice node `(i, j)` (cell centers of the `n_q × n_q` grid).
    #[inline]
    pub fn lattice_point(&self, i: usize, j: usize) -> Vec2 {
        let h = self.spacing();
        Vec2::new(
            -self.s + (i as f64 + 0.5) * h,
            -self.s + (j as f64 + 0.5) * h,
        )
    }

    pub fn quadrature(&self) -> QuadratureGrid {
        QuadratureGrid::new(self.clone())
    }
}

const NO_NODE: u32 = u32::MAX;

/// How a quadrature node's weight is attributed to Laguerre cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassRule {
    /// Each node's whole weight goes to its argmax cell.
    Nodal,
    /// Nodes near a cell interface split their weight by the exact fraction
    /// of their pixel on each side of the interface line, which makes cell
    /// masses continuous in the weights.
    #[default]
    Subpixel,
}

/// Uniform masked quadrature on a [`PhysicalDomain`].
///
/// Nodes are the lattice cell centers lying in the domain, each with weight
/// `h_q^2`. Lattice order is row-major with `x` varying fastest.
#[derive(Clone, Debug)]
pub struct QuadratureGrid {
    pub domain: PhysicalDomain,
    pub nodes: Vec<Vec2>,
    pub lattice_index: Vec<usize>,
    lattice_to_node: Vec<u32>,
    h: f64,
    pub rule: MassRule,
}

impl QuadratureGrid {
    pub fn new(domain: PhysicalDomain) -> Self {
        let n = domain.n_q;
        let mut nodes = Vec::new();
        let mut lattice_index = Vec::new();
        let mut lattice_to_node = vec![NO_NODE; n * n];
        for j in 0..n {
            for i in 0..n {
                let p = domain.lattice_point(i, j);
                if domain.contains(p) {
                    lattice_to_node[j * n + i] = nodes.len() as u32;
                    nodes.push(p);
                    lattice_index.push(j * n + i);
                }
            }
        }
        let h = domain.spacing();
        QuadratureGrid {
            domain,
            nodes,
            lattice_index,
            lattice_to_node,
            h,
            rule: MassRule::default(),
        }
    }

    pub fn with_rule(mut self, rule: MassRule) -> Self {
        self.rule = rule;
        self
    }

    /// Nodes among the 8 lattice neighbours of node `k`.
    pub fn neighbors(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbor_slots(k).filter_map(|slot| slot.ok())
    }

    /// Positions of the lattice neighbours of node `k` that lie outside the domain.
    pub fn missing_neighbors(&self, k: usize) -> impl Iterator<Item = Vec2> + '_ {
        self.neighbor_slots(k).filter_map(|slot| slot.err())
    }

    fn neighbor_slots(
        &self,
        k: usize,
    ) -> impl Iterator<Item = std::result::Result<usize, Vec2>> + '_ {
        let n = self.domain.n_q as isize;
        let l = self.lattice_index[k] as isize;
        let (i, j) = (l % n, l / n);
        let x = self.nodes[k];
        let h = self.spacing();
        const OFFSETS: [(isize, isize); 8] = [
            (-1, -1),
            (0, -1),
            (1, -1),
            (-1, 0),
            (1, 0),
            (-1, 1),
            (0, 1),
            (1, 1),
        ];
        OFFSETS.iter().map(move |&(di, dj)| {
            let (a, b) = (i + di, j + dj);
            let inside = if a < 0 || b < 0 {
                None
            } else {
                self.node_at(a as usize, b as usize)
            };
            inside.ok_or_else(|| x + Vec2::new(di as f64 * h, dj as f64 * h))
        })
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        self.h
    }

    #[inline]
    pub fn node_weight(&self) -> f64 {
        self.h * self.h
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Quadrature approximation of `|Ω|`.
    pub fn total_weight(&self) -> f64 {
        let w = self.node_weight();
        ksum(self.nodes.iter().map(|_| w))
    }

    /// Node index of lattice point `(i, j)`, if it lies in the domain.
    #[inline]
    pub fn node_at(&self, i: usize, j: usize) -> Option<usize> {
        let n = self.domain.n_q;
        if i >= n || j >= n {
            return None;
        }
        match self.lattice_to_node[j * n + i] {
            NO_NODE => None,
            k => Some(k as usize),
        }
    }

    /// Pairs of lattice-adjacent nodes; `true` marks a horizontal edge.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
        let n = self.domain.n_q;
        self.lattice_index
            .iter()
            .enumerate()
            .flat_map(move |(k, &l)| {
                let (i, j) = (l % n, l / n);
                let right = self.node_at(i + 1, j).map(|r| (k, r, true));
                let up = self.node_at(i, j + 1).map(|u| (k, u, false));
                right.into_iter().chain(up)
            })
    }

    /// Integral of nodal samples against the quadrature weights.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        let w = self.node_weight();
        ksum(values.iter().map(|v| v * w))
    }

    /// Nodal values spread onto the full lattice, zero outside the domain.
    pub fn to_lattice(&self, node_values: &[f64]) -> Vec<f64> {
        let n = self.domain.n_q;
        let mut out = vec![0.0; n * n];
        for (&l, &v) in self.lattice_index.iter().zip(node_values) {
            out[l] = v;
        }
        out
    }
}

/// A finite weighted particle cloud `Σ m_i δ_{X_i}` supported in `B(0, R0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub points: Vec<Vec2>,
    pub masses: Vec<f64>,
    #[serde(rename = "R0")]
    pub r0: f64,
}

impl DiscreteMeasure {
    /// Validates the data and separates coincident particles by a
    /// deterministic jitter of size `1e-9 · max(R0, 1)`.
    pub fn new(points: Vec<Vec2>, masses: Vec<f64>, r0: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(SgError::InvalidMeasure("no particles".into()));
        }
        if points.len() != masses.len() {
            return Err(SgError::InvalidMeasure(format!(
                "{} points but {} masses",
                points.len(),
                masses.len()
            )));
        }
        if let Some(i) = masses.iter().position(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(SgError::InvalidMeasure(format!(
                "mass of particle {i} must be positive and finite, got {}",
                masses[i]
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(SgError::InvalidMeasure(format!(
                "particle {i} has a non-finite position"
            )));
        }
        if !(r0 >= 0.0 && r0.is_finite()) {
            return Err(SgError::InvalidMeasure(format!(
                "R0 must be finite and nonnegative, got {r0}"
            )));
        }
        let scale = r0.max(1.0);
        if let Some(i) = points.iter().position(|p| p.norm() > r0 + 1e-12 * scale) {
            return Err(SgError::InvalidMeasure(format!(
                "particle {i} at distance {} exceeds R0 = {r0}",
                points[i].norm()
            )));
        }
        let mut points = points;
        separate_coincident(&mut points, 1e-9 * scale);
        let r0 = points.iter().map(|p| p.norm()).fold(r0, f64::max);
        Ok(DiscreteMeasure { points, masses, r0 })
    }

    /// Like [`new`](Self::new) with `R0` taken as the largest particle radius.
    pub fn from_parts(points: Vec<Vec2>, masses: Vec<f64>) -> Result<Self> {
        let r0 = points.iter().map(|p| p.norm()).fold(0.0, f64::max);
        Self::new(points, masses, r0)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        total_mass(self)
    }

    /// Mass-weighted mean position.
    pub fn barycenter(&self) -> Vec2 {
        let m = self.total_mass();
        let x = ksum(self.points.iter().zip(&self.masses).map(|(p, w)| p.x * w));
        let y = ksum(self.points.iter().zip(&self.masses).map(|(p, w)| p.y * w));
        Vec2::new(x / m, y / m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: DiscreteMeasure = serde_json::from_str(s)?;
        Self::new(raw.points, raw.masses, raw.r0)
    }
}

fn separate_coincident(points: &mut [Vec2], magnitude: f64) {
    const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;
    for _round in 0..8 {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| {
            points[a]
                .x
                .total_cmp(&points[b].x)
                .then(points[a].y.total_cmp(&points[b].y))
                .then(a.cmp(&b))
        });
        let mut moved = false;
        for w in order.windows(2) {
            let (a, b) = (w[0], w[1]);
            if points[a] == points[b] {
                let angle = GOLDEN_ANGLE * b as f64;
                points[b] += Vec2::new(angle.cos(), angle.sin()) * magnitude;
                moved = true;
            }
        }
        if !moved {
            return;
        }
    }
}

/// `Σ m_i`, compensated.
pub fn total_mass(mu: &DiscreteMeasure) -> f64 {
    ksum(mu.masses.iter().copied())
}

/// Support radius bound `R(T) = R0 e^T + (e^T - 1) S` for the dual measure.
pub fn support_bound(r0: f64, s: f64, t: f64) -> f64 {
    r0 * t.exp() + t.exp_m1() * s
}

/// Values a [`GridField`] can hold.
pub trait FieldValue: Copy + Send + Sync {
    const DIM: usize;
    fn components(self) -> [f64; 2];
    fn distance(self, other: Self) -> f64;
}

impl FieldValue for f64 {
    const DIM: usize = 1;
    fn components(self) -> [f64; 2] {
        [self, 0.0]
    }
    fn distance(self, other: f64) -> f64 {
        (self - other).abs()
    }
}

impl FieldValue for Vec2 {
    const DIM: usize = 2;
    fn components(self) -> [f64; 2] {
        [self.x, self.y]
    }
    fn distance(self, other: Vec2) -> f64 {
        self.dist(other)
    }
}

/// Samples on the full `n_q × n_q` lattice of a domain, with a defined-mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField<T> {
    pub domain: PhysicalDomain,
    pub values: Vec<T>,
    pub defined: Vec<bool>,
}

impl<T: FieldValue + Default> GridField<T> {
    /// Evaluate `f` at every quadrature node; lattice points outside the
    /// domain, or where `f` returns `None`, are undefined.
    pub fn from_nodes(grid: &QuadratureGrid, mut f: impl FnMut(usize, Vec2) -> Option<T>) -> Self {
        let n = grid.domain.n_q;
        let mut values = vec![T::default(); n * n];
        let mut defined = vec![false; n * n];
        for (k, (&p, &l)) in grid.nodes.iter().zip(&grid.lattice_index).enumerate() {
            if let Some(v) = f(k, p) {
                values[l] = v;
                defined[l] = true;
            }
        }
        GridField {
            domain: grid.domain.clone(),
            values,
            defined,
        }
    }

    /// Build from values listed per quadrature node.
    pub fn from_node_values(grid: &QuadratureGrid, node_values: &[T]) -> Self {
        Self::from_nodes(grid, |k, _| Some(node_values[k]))
    }

    pub fn get(&self, lattice: usize) -> Option<T> {
        self.defined[lattice].then(|| self.values[lattice])
    }

    /// Values at the quadrature nodes of `grid` (which must share the domain).
    pub fn node_values(&self, grid: &QuadratureGrid) -> Vec<Option<T>> {
        grid.lattice_index.iter().map(|&l| self.get(l)).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["x", "y", "v1"];
        if T::DIM == 2 {
            header.push("v2");
        }
        header.push("defined");
        w.write_record(&header)?;
        let n = self.domain.n_q;
        for (l, (v, d)) in self.values.iter().zip(&self.defined).enumerate() {
            let p = self.domain.lattice_point(l % n, l / n);
            let mut rec = vec![p.x.to_string(), p.y.to_string()];
            let c = v.components();
            for comp in c.iter().take(T::DIM) {
                rec.push(if *d { comp.to_string() } else { String::new() });
            }
            rec.push(if *d { "1".into() } else { "0".into() });
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(Σ w |F - G|^r h_q^2)^{1/r}` over lattice points where both fields are defined.
///
/// `weight` is indexed by lattice point and defaults to 1.
pub fn lr_distance<T: FieldValue>(
    f: &GridField<T>,
    g: &GridField<T>,
    r: f64,
    weight: Option<&[f64]>,
) -> Result<f64> {
    if f.domain != g.domain {
        return Err(SgError::MismatchedGrids(
            "fields live on different domains".into(),
        ));
    }
    if f.defined != g.defined {
        return Err(SgError::MismatchedGrids("defined-masks differ".into()));
    }
    if !(r >= 1.0) {
        return Err(SgError::InvalidArgument(format!(
            "exponent r must be >= 1, got {r}"
        )));
    }
    if let Some(w) = weight {
        if w.len() != f.values.len() {
            return Err(SgError::MismatchedGrids(format!(
                "weight has {} entries, lattice has {}",
                w.len(),
                f.values.len()
            )));
        }
    }
    let h2 = f.domain.spacing().powi(2);
    let mut acc = KahanSum::new();
    for l in 0..f.values.len() {
        if !f.defined[l] {
            continue;
        }
        let d = f.values[l].distance(g.values[l]);
        let w = weight.map_or(1.0, |w| w[l]);
        acc.add(w * d.powf(r) * h2);
    }
    Ok(acc.value().max(0.0).powf(1.0 / r))
}

/// Nodal samples convolved with the bump `(1 − r²/δ²)³` of radius `δ = width`,
/// the kernel renormalized over the nodes it reaches. A width below the grid
/// spacing returns the samples unchanged.
pub fn mollify_nodes(grid: &QuadratureGrid, values: &[f64], width: f64) -> Result<Vec<f64>> {
    if values.len() != grid.len() {
        return Err(SgError::MismatchedGrids(format!(
            "{} samples for {} nodes",
            values.len(),
            grid.len()
        )));
    }
    if !(width >= 0.0) {
        return Err(SgError::InvalidArgument(format!(
            "mollifier width must be nonnegative, got {width}"
        )));
    }
    let h = grid.spacing();
    if width <= h {
        return Ok(values.to_vec());
    }
    let reach = (width / h).floor() as isize;
    let n = grid.domain.n_q as isize;
    let mut stencil = Vec::new();
    for dj in -reach..=reach {
        for di in -reach..=reach {
            let r2 = ((di * di + dj * dj) as f64) * h * h / (width * width);
            if r2 < 1.0 {
                let s = 1.0 - r2;
                stencil.push((di, dj, s * s * s));
            }
        }
    }
    Ok((0..grid.len())
        .into_par_iter()
        .map(|k| {
            let l = grid.lattice_index[k] as isize;
            let (i, j) = (l % n, l / n);
            let (mut num, mut den) = (KahanSum::new(), KahanSum::new());
            for &(di, dj, w) in &stencil {
                let (a, b) = (i + di, j + dj);
                if a < 0 || b < 0 {
                    continue;
                }
                if let Some(k2) = grid.node_at(a as usize, b as usize) {
                    num.add(w * values[k2]);
                    den.add(w);
                }
            }
            num.value() / den.value()
        })
        .collect())
}

/// Total-variation mismatch between the empirical pushforward of
/// `source_weights` under `map` and `target`.
///
/// Each node's weight is sent to the target particle nearest to the node's
/// image (ties to the lowest index); the result is `Σ_i |pushed_i - m_i|`.
/// `source_weights` is indexed by lattice point.
pub fn pushforward_discrepancy(
    map: &GridField<Vec2>,
    source_weights: &[f64],
    target: &DiscreteMeasure,
) -> Result<f64> {
    if source_weights.len() != map.values.len() {
        return Err(SgError::MismatchedGrids(format!(
            "{} source weights for {} lattice points",
            source_weights.len(),
            map.values.len()
        )));
    }
    let psi: Vec<f64> = target.points.iter().map(|p| 0.5 * p.norm_sq()).collect();
    let search = PowerSearch::new(&target.points, &psi);
    let mut pushed = vec![KahanSum::new(); target.len()];
    let mut hint = 0usize;
    for (l, &w) in source_weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        if !map.defined[l] {
            return Err(SgError::UndefinedSample { node: l });
        }
        let (i, _) = search.argmax(map.values[l], hint);
        hint = i;
        pushed[i].add(w);
    }
    Ok(ksum(
        pushed
            .iter()
            .zip(&target.masses)
            .map(|(p, m)| (p.value() - m).abs()),
    ))
}
