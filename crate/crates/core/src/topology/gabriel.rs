//! Gabriel graph in any dimension.

use ndarray::{Array2, ArrayView1};

use crate::par;

/// Squared Euclidean distances, row-major `n x n`.
pub fn squared_distances(points: &Array2<f64>) -> Vec<f64> {
    let n = points.nrows();
    let rows: Vec<Vec<f64>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
    // Differences rather than |a|^2 + |b|^2 - 2ab: jittered near-duplicates
    // would cancel catastrophically.
    let out = par::map_range(n, |i| {
        rows.iter()
            .map(|r| rows[i].iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect::<Vec<f64>>()
    });
    out.concat()
}

/// Edges `(u, v)`, `u < v`, whose diametral open ball holds no other point.
///
/// A third point `w` lies strictly inside the ball on `uv` exactly when
/// `|uw|^2 + |vw|^2 < |uv|^2`. Candidates for `w` are scanned in order of
/// distance from `u`; only points closer to `u` than `v` can block.
pub fn gabriel_graph(points: &Array2<f64>) -> Vec<(usize, usize)> {
    let n = points.nrows();
    if n < 2 {
        return Vec::new();
    }
    let d = squared_distances(points);
    let rows = par::map_range(n, |u| {
        let du = &d[u * n..(u + 1) * n];
        let mut order: Vec<usize> = (0..n).filter(|&w| w != u).collect();
        order.sort_by(|&a, &b| du[a].total_cmp(&du[b]).then(a.cmp(&b)));
        let mut edges = Vec::new();
        for v in u + 1..n {
            let duv = du[v];
            let dv = &d[v * n..(v + 1) * n];
            let blocked = order
                .iter()
                .take_while(|&&w| du[w] < duv)
                .any(|&w| w != v && du[w] + dv[w] < duv);
            if !blocked {
                edges.push((u, v));
            }
        }
        edges
    });
    rows.concat()
}

/// Brute-force reference used by tests: O(n^3 d), no shortcuts.
pub fn gabriel_graph_naive(points: &Array2<f64>) -> Vec<(usize, usize)> {
    let n = points.nrows();
    let sq = |a: ArrayView1<f64>, b: ArrayView1<f64>| a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let duv = sq(points.row(u), points.row(v));
            let blocked = (0..n)
                .filter(|&w| w != u && w != v)
                .any(|w| sq(points.row(u), points.row(w)) + sq(points.row(v), points.row(w)) < duv);
            if !blocked {
                edges.push((u, v));
            }
        }
    }
    edges
}
