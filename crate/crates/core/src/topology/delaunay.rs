//! Exact planar Delaunay edges by incremental (Bowyer-Watson) insertion.
//!
//! The hull is closed with ghost triangles `[a, b, GHOST]` whose edge `a -> b`
//! has the triangulation on its right, so points outside the hull need no
//! bounding super-triangle. Orientation and in-circle tests use adaptive
//! exact predicates. A point exactly on a circumcircle is not in conflict,
//! which resolves co-circular ties by insertion order.

use std::collections::{BTreeSet, HashMap, HashSet};

use robust::{incircle, orient2d, Coord};

use crate::error::{Error, Result};

const GHOST: usize = usize::MAX;

fn c(p: [f64; 2]) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

fn orient(pts: &[[f64; 2]], a: usize, b: usize, p: usize) -> f64 {
    orient2d(c(pts[a]), c(pts[b]), c(pts[p]))
}

/// `p` lies strictly between `a` and `b`, given the three are collinear.
fn strictly_between(pts: &[[f64; 2]], a: usize, b: usize, p: usize) -> bool {
    let (pa, pb, pp) = (pts[a], pts[b], pts[p]);
    let along = |i: usize| {
        let lo = pa[i].min(pb[i]);
        let hi = pa[i].max(pb[i]);
        lo < pp[i] && pp[i] < hi
    };
    if pa[0] != pb[0] {
        along(0)
    } else {
        along(1)
    }
}

fn in_conflict(pts: &[[f64; 2]], t: &[usize; 3], p: usize) -> bool {
    if t[2] == GHOST {
        let o = orient(pts, t[0], t[1], p);
        o > 0.0 || (o == 0.0 && strictly_between(pts, t[0], t[1], p))
    } else {
        incircle(c(pts[t[0]]), c(pts[t[1]]), c(pts[t[2]]), c(pts[p])) > 0.0
    }
}

/// Delaunay edges `(u, v)` with `u < v`, sorted.
///
/// Exact duplicate points are rejected. When every point is collinear the
/// result is the path through the points in order along the line.
pub fn delaunay_exact_2d(points: &[[f64; 2]]) -> Result<Vec<(usize, usize)>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 points, got {n}")));
    }
    if let Some(p) = points.iter().flatten().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("point coordinate {p}")));
    }
    let mut seen = HashMap::with_capacity(n);
    for (i, p) in points.iter().enumerate() {
        if let Some(j) = seen.insert((p[0].to_bits(), p[1].to_bits()), i) {
            return Err(Error::InvalidParameter(format!("points {j} and {i} coincide")));
        }
    }
    if n == 2 {
        return Ok(vec![(0, 1)]);
    }
    let Some(k) = (2..n).find(|&k| orient(points, 0, 1, k) != 0.0) else {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            points[a][0]
                .total_cmp(&points[b][0])
                .then(points[a][1].total_cmp(&points[b][1]))
        });
        let mut edges: Vec<_> = order.windows(2).map(|w| (w[0].min(w[1]), w[0].max(w[1]))).collect();
        edges.sort_unstable();
        return Ok(edges);
    };

    let (a, b) = if orient(points, 0, 1, k) > 0.0 { (0, 1) } else { (1, 0) };
    let mut tris: Vec<[usize; 3]> = vec![[a, b, k], [b, a, GHOST], [k, b, GHOST], [a, k, GHOST]];

    for p in (2..n).filter(|&i| i != k) {
        let mut keep = Vec::with_capacity(tris.len() + 4);
        let mut cavity = Vec::new();
        for t in tris {
            if in_conflict(points, &t, p) {
                cavity.push(t);
            } else {
                keep.push(t);
            }
        }
        let directed: HashSet<(usize, usize)> = cavity
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .collect();
        for t in &cavity {
            for (u, v) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                if directed.contains(&(v, u)) {
                    continue;
                }
                keep.push(if u == GHOST {
                    [v, p, GHOST]
                } else if v == GHOST {
                    [p, u, GHOST]
                } else {
                    [u, v, p]
                });
            }
        }
        tris = keep;
    }

    let edges: BTreeSet<(usize, usize)> = tris
        .iter()
        .filter(|t| t[2] != GHOST)
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .map(|(u, v)| (u.min(v), u.max(v)))
        .collect();
    Ok(edges.into_iter().collect())
}

/// Brute-force certificate: some circle through `u` and `v` is free of other
/// points in its interior. Checks the circumcircles of `u, v, w` for every
/// third point `w`, plus the diametral circle.
pub fn edge_has_empty_circle(points: &[[f64; 2]], u: usize, v: usize) -> bool {
    let others: Vec<usize> = (0..points.len()).filter(|&w| w != u && w != v).collect();
    let empty = |inside: &dyn Fn(usize) -> bool| others.iter().all(|&w| !inside(w));
    // Diametral circle.
    let (pu, pv) = (points[u], points[v]);
    let m = [(pu[0] + pv[0]) / 2.0, (pu[1] + pv[1]) / 2.0];
    let r2 = ((pu[0] - pv[0]).powi(2) + (pu[1] - pv[1]).powi(2)) / 4.0;
    if empty(&|w| (points[w][0] - m[0]).powi(2) + (points[w][1] - m[1]).powi(2) < r2 * (1.0 - 1e-12)) {
        return true;
    }
    others.iter().any(|&w| {
        let o = orient(points, u, v, w);
        if o == 0.0 {
            return false;
        }
        let (a, b) = if o > 0.0 { (u, v) } else { (v, u) };
        empty(&|x| x != w && incircle(c(points[a]), c(points[b]), c(points[w]), c(points[x])) > 0.0)
    })
}
