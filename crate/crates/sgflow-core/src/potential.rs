//! The convex modified pressure `P(x) = max_i (x·X_i − ψ_i)` and its Legendre
//! transform.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};
use crate::measure::{PhysicalDomain, QuadratureGrid};
use crate::ot::{tessellate_weighted, LaguerreTessellation, OtSolution};
use crate::search::PowerSearch;
use crate::vec2::Vec2;

/// Max-affine convex potential with a cached tessellation of its domain.
#[derive(Clone, Debug)]
pub struct ConvexPotential {
    pub slopes: Vec<Vec2>,
    psi: Vec<f64>,
    pub domain: PhysicalDomain,
    pub tess: LaguerreTessellation,
    search: PowerSearch,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PotentialJson {
    slopes: Vec<Vec2>,
    intercepts: Vec<f64>,
    gauge: f64,
}

impl ConvexPotential {
    pub fn new(grid: &QuadratureGrid, slopes: Vec<Vec2>, psi: Vec<f64>) -> Result<Self> {
        Self::with_density(grid, slopes, psi, None)
    }

    /// As [`ConvexPotential::new`], with cell masses taken against a per-node density.
    pub fn with_density(
        grid: &QuadratureGrid,
        slopes: Vec<Vec2>,
        psi: Vec<f64>,
        density: Option<&[f64]>,
    ) -> Result<Self> {
        if slopes.is_empty() || slopes.len() != psi.len() {
            return Err(SgError::InvalidArgument(
                "slopes and weights must be nonempty and of equal length".into(),
            ));
        }
        if slopes.iter().any(|p| !p.is_finite()) || psi.iter().any(|v| !v.is_finite()) {
            return Err(SgError::InvalidArgument(
                "potential data must be finite".into(),
            ));
        }
        let tess = tessellate_weighted(grid, &slopes, &psi, density);
        let search = PowerSearch::new(&slopes, &psi);
        Ok(ConvexPotential {
            slopes,
            psi,
            domain: grid.domain.clone(),
            tess,
            search,
        })
    }

    pub fn from_solution(
        slopes: Vec<Vec2>,
        sol: &OtSolution,
        grid: &QuadratureGrid,
    ) -> Result<Self> {
        let search = PowerSearch::new(&slopes, sol.weights.as_slice());
        Ok(ConvexPotential {
            psi: sol.weights.as_slice().to_vec(),
            slopes,
            domain: grid.domain.clone(),
            tess: sol.tess.clone(),
            search,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.psi
    }

    pub fn len(&self) -> usize {
        self.slopes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slopes.is_empty()
    }

    /// Index of the dominant affine piece at `x`, lowest index on ties.
    pub fn argmax(&self, x: Vec2) -> usize {
        self.search.argmax(x, 0).0
    }

    pub fn eval(&self, x: Vec2) -> f64 {
        self.search.argmax(x, 0).1
    }

    pub fn grad(&self, x: Vec2) -> Vec2 {
        self.slopes[self.argmax(x)]
    }

    pub fn to_json(&self) -> Result<String> {
        let gauge = self.psi[0];
        let json = PotentialJson {
            slopes: self.slopes.clone(),
            intercepts: self.psi.iter().map(|p| gauge - p).collect(),
            gauge,
        };
        Ok(serde_json::to_string_pretty(&json)?)
    }

    pub fn from_json(grid: &QuadratureGrid, text: &str) -> Result<Self> {
        let json: PotentialJson = serde_json::from_str(text)?;
        let psi = json.intercepts.iter().map(|c| json.gauge - c).collect();
        Self::new(grid, json.slopes, psi)
    }

    /// Samples `P` and `∇P` at every quadrature node as CSV `x,y,P,dPx,dPy`.
    pub fn write_csv(&self, grid: &QuadratureGrid, path: &Path) -> Result<()> {
        check_grid(&self.domain, grid)?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "P", "dPx", "dPy"])?;
        for (k, x) in grid.nodes.iter().enumerate() {
            let i = self.tess.assignment[k] as usize;
            let g = self.slopes[i];
            w.write_record(&[
                x.x.to_string(),
                x.y.to_string(),
                self.tess.scores[k].to_string(),
                g.x.to_string(),
                g.y.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_grid(domain: &PhysicalDomain, grid: &QuadratureGrid) -> Result<()> {
    if *domain != grid.domain {
        return Err(SgError::MismatchedGrids(
            "potential was built on a different domain".into(),
        ));
    }
    Ok(())
}

/// `P*(Y) = max over nodes x of x·Y − P(x)`.
pub fn legendre_numeric(
    pot: &ConvexPotential,
    grid: &QuadratureGrid,
    ys: &[Vec2],
) -> Result<Vec<f64>> {
    check_grid(&pot.domain, grid)?;
    let nodes = &grid.nodes;
    let p = &pot.tess.scores;
    Ok(ys
        .par_iter()
        .map(|y| {
            nodes
                .iter()
                .zip(p)
                .map(|(x, px)| x.dot(*y) - px)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Values of `P*` at the particles and the centroid selection from each subdifferential.
#[derive(Clone, Debug)]
pub struct LegendreDual {
    pub values: Vec<f64>,
    pub selections: Vec<Vec2>,
    pub slopes: Vec<Vec2>,
}

impl LegendreDual {
    pub fn new(pot: &ConvexPotential) -> Self {
        LegendreDual {
            values: pot.psi.clone(),
            selections: pot.tess.cell_centroids.clone(),
            slopes: pot.slopes.clone(),
        }
    }

    /// `∇P*(X_i)`, the centroid of cell `i`.
    pub fn grad_p_star(&self, i: usize) -> Result<Vec2> {
        let c = self.selections[i];
        if !c.is_finite() {
            return Err(SgError::DegenerateCell { index: i });
        }
        Ok(c)
    }

    /// `∇P*` away from the particles: the selection of the nearest particle.
    pub fn grad_p_star_at(&self, y: Vec2) -> Result<Vec2> {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, x) in self.slopes.iter().enumerate() {
            let d = (y - *x).norm_sq();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        self.grad_p_star(best)
    }

    /// `P*(Y)`: the stored value at a particle, a node maximization elsewhere.
    pub fn value_at(&self, pot: &ConvexPotential, grid: &QuadratureGrid, y: Vec2) -> Result<f64> {
        if let Some(i) = self.slopes.iter().position(|x| *x == y) {
            return Ok(self.values[i]);
        }
        Ok(legendre_numeric(pot, grid, &[y])?[0])
    }
}

/// `P(x) + P*(Y) − x·Y`, nonnegative by Fenchel–Young.
pub fn fenchel_gap(
    pot: &ConvexPotential,
    dual: &LegendreDual,
    grid: &QuadratureGrid,
    x: Vec2,
    y: Vec2,
) -> Result<f64> {
    Ok(pot.eval(x) + dual.value_at(pot, grid, y)? - x.dot(y))
}
