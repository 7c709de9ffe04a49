//! Exact argmax queries for max-affine functions `x ↦ max_i (x·X_i − ψ_i)`.
//!
//! For any `s > 0` and shift `v`, the argmax equals the power-diagram cell of
//! the site `Y_i = s X_i + v` with weight `ω_i = |Y_i|² − 2sψ_i`. Lifting the
//! sites to `(Y_i, sqrt(Ω − ω_i))`, `Ω = max ω_i`, turns the query into a 3D
//! nearest-neighbour search for `(x, 0)`. `s` and `v` are fitted by least
//! squares to flatten the weights, which keeps the kd-tree bounds tight.
//! Candidate pieces are always compared through the affine score itself, so
//! results coincide with a brute-force scan including the lowest-index tie
//! break.

use crate::vec2::Vec2;

const LEAF_SIZE: usize = 8;
const STACK: usize = 128;

#[derive(Clone, Debug)]
struct KdNode {
    lo: [f64; 3],
    hi: [f64; 3],
    // Leaf: range into `order`. Inner: children indices.
    start: u32,
    end: u32,
    left: u32,
    right: u32,
}

#[derive(Clone, Debug)]
pub struct PowerSearch {
    slopes: Vec<Vec2>,
    intercepts: Vec<f64>,
    lifted: Vec<[f64; 3]>,
    order: Vec<u32>,
    nodes: Vec<KdNode>,
    scale: f64,
    shift: Vec2,
    w_max: f64,
}

impl PowerSearch {
    /// Index structure for `max_i (x·slopes_i − psi_i)`.
    pub fn new(slopes: &[Vec2], psi: &[f64]) -> Self {
        assert_eq!(slopes.len(), psi.len());
        assert!(!slopes.is_empty(), "no affine pieces");
        let (scale, shift) = fit_site_map(slopes, psi);
        let sites: Vec<Vec2> = slopes.iter().map(|p| *p * scale + shift).collect();
        let w: Vec<f64> = sites
            .iter()
            .zip(psi)
            .map(|(y, s)| y.norm_sq() - 2.0 * scale * s)
            .collect();
        let w_max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lifted: Vec<[f64; 3]> = sites
            .iter()
            .zip(&w)
            .map(|(y, wi)| [y.x, y.y, (w_max - wi).max(0.0).sqrt()])
            .collect();
        let mut order: Vec<u32> = (0..slopes.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * slopes.len() / LEAF_SIZE + 1);
        build(&lifted, &mut order, 0, slopes.len(), &mut nodes);
        PowerSearch {
            slopes: slopes.to_vec(),
            intercepts: psi.to_vec(),
            lifted,
            order,
            nodes,
            scale,
            shift,
            w_max,
        }
    }

    pub fn len(&self) -> usize {
        self.slopes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slopes.is_empty()
    }

    #[inline]
    pub fn score(&self, x: Vec2, i: usize) -> f64 {
        x.dot(self.slopes[i]) - self.intercepts[i]
    }

    /// `(argmax, max)` of the affine scores at `x`; ties go to the lowest
    /// index. `hint` is any index, used only to seed the bound.
    pub fn argmax(&self, x: Vec2, hint: usize) -> (usize, f64) {
        let hint = if hint < self.len() { hint } else { 0 };
        let mut best_i = hint;
        let mut best_s = self.score(x, hint);
        // lifted distance D_i = base − 2s·score_i
        let base = x.norm_sq() - 2.0 * x.dot(self.shift) + self.w_max;
        let inv2s = 0.5 / self.scale;
        let slack = 1e-9 * (base.abs() + 1.0) * inv2s;
        let q = [x.x, x.y, 0.0];

        let mut stack = [(0u32, 0.0f64); STACK];
        let mut top = 1;
        stack[0] = (0, box_lower_bound(&self.nodes[0], &q));
        while top > 0 {
            top -= 1;
            let (ni, lb) = stack[top];
            // Upper bound on any score inside this box.
            if (base - lb) * inv2s < best_s - slack {
                continue;
            }
            let node = &self.nodes[ni as usize];
            if node.left == u32::MAX {
                for &id in &self.order[node.start as usize..node.end as usize] {
                    let i = id as usize;
                    let s = self.score(x, i);
                    if s > best_s || (s == best_s && i < best_i) {
                        best_s = s;
                        best_i = i;
                    }
                }
            } else {
                let l = node.left;
                let r = node.right;
                let lb_l = box_lower_bound(&self.nodes[l as usize], &q);
                let lb_r = box_lower_bound(&self.nodes[r as usize], &q);
                let (near, far) = if lb_l <= lb_r {
                    ((l, lb_l), (r, lb_r))
                } else {
                    ((r, lb_r), (l, lb_l))
                };
                stack[top] = far;
                stack[top + 1] = near;
                top += 2;
            }
        }
        (best_i, best_s)
    }

    /// Lifted coordinates, exposed for diagnostics.
    pub fn lifted_point(&self, i: usize) -> [f64; 3] {
        self.lifted[i]
    }
}

/// Least-squares `(s, v)` making `s²|X_i|² + 2s X_i·v − 2sψ_i` as constant as
/// possible over `i`; falls back to `s = 1, v = 0` when degenerate.
fn fit_site_map(slopes: &[Vec2], psi: &[f64]) -> (f64, Vec2) {
    // minimize Σ (s a_i + 2 X_i·v − 2ψ_i − κ)² over (s, v, κ), a_i = |X_i|²
    let n = slopes.len();
    if n < 4 {
        return (1.0, Vec2::ZERO);
    }
    let mut m = [[0.0f64; 4]; 4];
    let mut rhs = [0.0f64; 4];
    for (p, &ps) in slopes.iter().zip(psi) {
        let row = [p.norm_sq(), 2.0 * p.x, 2.0 * p.y, -1.0];
        let b = 2.0 * ps;
        for a in 0..4 {
            for c in 0..4 {
                m[a][c] += row[a] * row[c];
            }
            rhs[a] += row[a] * b;
        }
    }
    match solve4(m, rhs) {
        Some(sol) if sol[0].is_finite() && sol[0] > 1e-8 && sol[0] < 1e8 => {
            (sol[0], Vec2::new(sol[1], sol[2]))
        }
        _ => (1.0, Vec2::ZERO),
    }
}

fn solve4(mut m: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..4 {
        let piv = (col..4).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() <= 1e-13 * scale {
            return None;
        }
        m.swap(col, piv);
        b.swap(col, piv);
        for r in 0..4 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..4 {
                    m[r][c] -= f * m[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    Some([
        b[0] / m[0][0],
        b[1] / m[1][1],
        b[2] / m[2][2],
        b[3] / m[3][3],
    ])
}

#[inline]
fn box_lower_bound(node: &KdNode, q: &[f64; 3]) -> f64 {
    let mut d = 0.0;
    for k in 0..3 {
        let v = if q[k] < node.lo[k] {
            node.lo[k] - q[k]
        } else if q[k] > node.hi[k] {
            q[k] - node.hi[k]
        } else {
            0.0
        };
        d += v * v;
    }
    d
}

fn build(
    pts: &[[f64; 3]],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<KdNode>,
) -> u32 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &id in &order[start..end] {
        let p = pts[id as usize];
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let me = nodes.len() as u32;
    nodes.push(KdNode {
        lo,
        hi,
        start: start as u32,
        end: end as u32,
        left: u32::MAX,
        right: u32::MAX,
    });
    if end - start <= LEAF_SIZE {
        return me;
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        pts[a as usize][axis]
            .total_cmp(&pts[b as usize][axis])
            .then(a.cmp(&b))
    });
    let left = build(pts, order, start, mid, nodes);
    let right = build(pts, order, mid, end, nodes);
    nodes[me as usize].left = left;
    nodes[me as usize].right = right;
    me
}
