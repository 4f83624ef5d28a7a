//! Neighborhood graphs over unshifted and shifted embeddings, and the
//! integrity score: the fraction of graph edges joining the two sets.

mod delaunay;
mod gabriel;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use delaunay::{delaunay_exact_2d, edge_has_empty_circle};
pub use gabriel::{gabriel_graph, gabriel_graph_naive, squared_distances};

use crate::encoders::{EmbeddingSet, Origin};
use crate::error::{Error, Result};
use crate::rng;
use crate::shifts::ShiftSpec;

const JITTER_TAG: u64 = 0x6a69_7474;
const SPLIT_TAG: u64 = 0x7370_6c69;
const SUBSAMPLE_TAG: u64 = 0x7375_6273;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMethod {
    Exact2d,
    #[default]
    Gabriel,
}

impl fmt::Display for GraphMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphMethod::Exact2d => "exact2d",
            GraphMethod::Gabriel => "gabriel",
        })
    }
}

impl FromStr for GraphMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact2d" => Ok(GraphMethod::Exact2d),
            "gabriel" => Ok(GraphMethod::Gabriel),
            other => Err(Error::Parse(format!("unknown graph method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeClass {
    #[serde(rename = "homo_Z")]
    HomoZ,
    #[serde(rename = "homo_Zt")]
    HomoZt,
    #[serde(rename = "hetero")]
    Hetero,
}

impl EdgeClass {
    pub fn of(a: Origin, b: Origin) -> Self {
        match (a, b) {
            (Origin::Z, Origin::Z) => EdgeClass::HomoZ,
            (Origin::ZShifted, Origin::ZShifted) => EdgeClass::HomoZt,
            _ => EdgeClass::Hetero,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeClass::HomoZ => "homo_Z",
            EdgeClass::HomoZt => "homo_Zt",
            EdgeClass::Hetero => "hetero",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub origin: Origin,
    pub recording_id: String,
    pub epoch_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub homo_z: usize,
    pub homo_zt: usize,
    pub hetero: usize,
}

impl EdgeCounts {
    pub fn total(&self) -> usize {
        self.homo_z + self.homo_zt + self.hetero
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodGraph {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<(usize, usize)>,
    pub classes: Vec<EdgeClass>,
}

impl NeighborhoodGraph {
    pub fn from_edges(vertices: Vec<Vertex>, edges: Vec<(usize, usize)>) -> Self {
        let classes = edges
            .iter()
            .map(|&(u, v)| EdgeClass::of(vertices[u].origin, vertices[v].origin))
            .collect();
        Self {
            vertices,
            edges,
            classes,
        }
    }

    pub fn counts(&self) -> EdgeCounts {
        let mut c = EdgeCounts::default();
        for class in &self.classes {
            match class {
                EdgeClass::HomoZ => c.homo_z += 1,
                EdgeClass::HomoZt => c.homo_zt += 1,
                EdgeClass::Hetero => c.hetero += 1,
            }
        }
        c
    }
}

/// `1 - homogeneous / all` over the graph's edges.
pub fn quality(graph: &NeighborhoodGraph) -> Result<f64> {
    quality_of(&graph.counts())
}

pub fn quality_of(c: &EdgeCounts) -> Result<f64> {
    let total = c.total();
    if total == 0 {
        return Err(Error::NoEdges);
    }
    Ok(1.0 - (c.homo_z + c.homo_zt) as f64 / total as f64)
}

/// Moves exact duplicate points (all but the first occurrence) by
/// `1e-9 x` the bounding-box diagonal, in a direction keyed by point index.
pub fn jitter_duplicates(points: &mut Array2<f64>, seed: u64) {
    let (n, d) = points.dim();
    if n == 0 || d == 0 {
        return;
    }
    let mut diag2 = 0.0;
    for col in points.columns() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        diag2 += (hi - lo).powi(2);
    }
    let scale = if diag2 > 0.0 { 1e-9 * diag2.sqrt() } else { 1e-9 };
    let mut seen = HashMap::with_capacity(n);
    for i in 0..n {
        let key: Vec<u64> = points.row(i).iter().map(|v| v.to_bits()).collect();
        if seen.insert(key, i).is_none() {
            continue;
        }
        let mut r = rng::stream(seed, &[JITTER_TAG, i as u64]);
        let dir: Vec<f64> = (0..d).map(|_| r.random::<f64>() - 0.5).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        for (x, u) in points.row_mut(i).iter_mut().zip(&dir) {
            *x += scale * u / norm;
        }
    }
}

/// Projects rows onto their two leading principal axes.
pub fn project_pca2(points: &Array2<f64>) -> Array2<f64> {
    let (n, d) = points.dim();
    let mean = points.mean_axis(ndarray::Axis(0)).expect("non-empty point set");
    let centered = points - &mean;
    let cov = centered.t().dot(&centered) / n.max(1) as f64;
    let mut axes: Vec<Vec<f64>> = Vec::new();
    let mut deflated = cov.clone();
    for k in 0..2.min(d) {
        // Power iteration from a fixed start vector.
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i + k) % 7) as f64 * 0.1).collect();
        for _ in 0..500 {
            let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| deflated[[i, j]] * v[j]).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = next;
            if delta < 1e-13 {
                break;
            }
        }
        let lambda: f64 = (0..d)
            .map(|i| v[i] * (0..d).map(|j| deflated[[i, j]] * v[j]).sum::<f64>())
            .sum();
        for i in 0..d {
            for j in 0..d {
                deflated[[i, j]] -= lambda * v[i] * v[j];
            }
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; d]);
    }
    Array2::from_shape_fn((n, 2), |(i, k)| {
        centered.row(i).iter().zip(&axes[k]).map(|(a, b)| a * b).sum()
    })
}

/// Graph over tagged points. `Exact2d` needs two columns.
pub fn build_graph(
    points: &Array2<f64>,
    vertices: Vec<Vertex>,
    method: GraphMethod,
    seed: u64,
) -> Result<NeighborhoodGraph> {
    if points.nrows() != vertices.len() {
        return Err(Error::LengthMismatch(points.nrows(), vertices.len()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("graph point".into()));
    }
    let mut pts = points.clone();
    jitter_duplicates(&mut pts, seed);
    let edges = match method {
        GraphMethod::Gabriel => gabriel_graph(&pts),
        GraphMethod::Exact2d => {
            if pts.ncols() > 2 {
                return Err(Error::InvalidParameter(format!(
                    "exact2d needs at most 2 dimensions, got {} (enable projection)",
                    pts.ncols()
                )));
            }
            let flat: Vec<[f64; 2]> = pts
                .rows()
                .into_iter()
                .map(|r| [r[0], if r.len() > 1 { r[1] } else { 0.0 }])
                .collect();
            delaunay_exact_2d(&flat)?
        }
    };
    Ok(NeighborhoodGraph::from_edges(vertices, edges))
}

/// Graph over `Z` and `Z~` pooled, vertices in that order.
pub fn build_neighborhood_graph(
    z: &EmbeddingSet,
    zt: &EmbeddingSet,
    method: GraphMethod,
    project: bool,
    seed: u64,
) -> Result<NeighborhoodGraph> {
    if z.dim != zt.dim {
        return Err(Error::ShapeMismatch {
            expected: format!("{} dims", z.dim),
            got: format!("{} dims", zt.dim),
        });
    }
    let all: Vec<_> = z.embeddings.iter().chain(&zt.embeddings).collect();
    let mut points = Array2::from_shape_fn((all.len(), z.dim), |(i, j)| all[i].vector[j]);
    let vertices = z
        .embeddings
        .iter()
        .map(|e| (Origin::Z, e))
        .chain(zt.embeddings.iter().map(|e| (Origin::ZShifted, e)))
        .map(|(origin, e)| Vertex {
            origin,
            recording_id: e.recording_id.clone(),
            epoch_index: e.epoch_index,
        })
        .collect();
    if project && method == GraphMethod::Exact2d && z.dim > 2 {
        points = project_pca2(&points);
    }
    build_graph(&points, vertices, method, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegrityMode {
    #[default]
    Pooled,
    PerRecording,
}

impl FromStr for IntegrityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(IntegrityMode::Pooled),
            "per-recording" | "per_recording" => Ok(IntegrityMode::PerRecording),
            other => Err(Error::Parse(format!("unknown integrity mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrityConfig {
    pub method: GraphMethod,
    /// Maximum number of points per set.
    pub subsample: usize,
    pub mode: IntegrityMode,
    /// Project to the two leading principal axes before `exact2d`.
    pub project: bool,
    pub seed: u64,
}

impl Default for IntegrityConfig {
    fn default() -> Self {
        Self {
            method: GraphMethod::Gabriel,
            subsample: 500,
            mode: IntegrityMode::Pooled,
            project: true,
            seed: 0,
        }
    }
}

/// One integrity measurement, as written to the integrity JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrityResult {
    pub encoder: String,
    pub shift: String,
    pub method: GraphMethod,
    pub mode: IntegrityMode,
    #[serde(rename = "n_Z")]
    pub n_z: usize,
    #[serde(rename = "n_Zt")]
    pub n_zt: usize,
    pub edges: usize,
    #[serde(rename = "homo_Z")]
    pub homo_z: usize,
    #[serde(rename = "homo_Zt")]
    pub homo_zt: usize,
    pub hetero: usize,
    pub q: f64,
    /// Spread of the per-recording scores (per-recording mode only).
    pub q_sd: Option<f64>,
}

type Key = (String, usize);

fn keyed(set: &EmbeddingSet) -> BTreeMap<Key, &[f64]> {
    set.embeddings
        .iter()
        .map(|e| ((e.recording_id.clone(), e.epoch_index), e.vector.as_slice()))
        .collect()
}

fn subset(set: &EmbeddingSet, keys: &[Key], lookup: &BTreeMap<Key, &[f64]>) -> EmbeddingSet {
    let mut out = EmbeddingSet::new(set.encoder_id.clone(), set.dim);
    out.embeddings = keys
        .iter()
        .map(|k| crate::encoders::Embedding {
            vector: lookup[k].to_vec(),
            origin: Origin::Z,
            recording_id: k.0.clone(),
            epoch_index: k.1,
        })
        .collect();
    out
}

/// Uniform choice of up to `k` keys, returned in key order.
fn choose(keys: &[Key], k: usize, seed: u64, tag: &[u64]) -> Vec<Key> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    if k < keys.len() {
        let mut parts = vec![SUBSAMPLE_TAG];
        parts.extend_from_slice(tag);
        idx.shuffle(&mut rng::stream(seed, &parts));
        idx.truncate(k);
        idx.sort_unstable();
    }
    idx.into_iter().map(|i| keys[i].clone()).collect()
}

/// Builds the two sets compared for one group of keys.
fn sets_for(
    keys: &[Key],
    z: &EmbeddingSet,
    zt: &EmbeddingSet,
    zk: &BTreeMap<Key, &[f64]>,
    ztk: &BTreeMap<Key, &[f64]>,
    baseline: bool,
    cfg: &IntegrityConfig,
    tag: u64,
) -> (EmbeddingSet, EmbeddingSet) {
    if baseline {
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[SPLIT_TAG, tag]));
        let half = keys.len() / 2;
        let mut a: Vec<Key> = order[..half].iter().map(|&i| keys[i].clone()).collect();
        let mut b: Vec<Key> = order[half..2 * half].iter().map(|&i| keys[i].clone()).collect();
        a.sort();
        b.sort();
        let a = choose(&a, cfg.subsample, cfg.seed, &[tag, 0]);
        let b = choose(&b, cfg.subsample, cfg.seed, &[tag, 1]);
        (subset(z, &a, zk), subset(z, &b, zk))
    } else {
        let chosen = choose(keys, cfg.subsample, cfg.seed, &[tag]);
        (subset(z, &chosen, zk), subset(zt, &chosen, ztk))
    }
}

/// Integrity of `zt` (shifted) against `z` (unshifted) embeddings of the same
/// epochs. Only epochs present in both sets are used, and any subsample keeps
/// the pairing. Under `NoShift` the unshifted set is instead split into two
/// disjoint random halves.
pub fn integrity_score(
    z: &EmbeddingSet,
    zt: &EmbeddingSet,
    shift: &ShiftSpec,
    cfg: &IntegrityConfig,
) -> Result<IntegrityResult> {
    integrity_with_graphs(z, zt, shift, cfg).map(|(r, _)| r)
}

/// [`integrity_score`] plus the graphs it was computed on: one when pooled,
/// one per recording otherwise.
pub fn integrity_with_graphs(
    z: &EmbeddingSet,
    zt: &EmbeddingSet,
    shift: &ShiftSpec,
    cfg: &IntegrityConfig,
) -> Result<(IntegrityResult, Vec<NeighborhoodGraph>)> {
    let zk = keyed(z);
    let ztk = keyed(zt);
    let baseline = *shift == ShiftSpec::NoShift;
    let common: Vec<Key> = if baseline {
        zk.keys().cloned().collect()
    } else {
        zk.keys().filter(|k| ztk.contains_key(*k)).cloned().collect()
    };
    if common.len() < 10 {
        return Err(Error::InvalidParameter(format!(
            "integrity needs at least 10 paired epochs, got {}",
            common.len()
        )));
    }
    let graph_of =
        |a: &EmbeddingSet, b: &EmbeddingSet| build_neighborhood_graph(a, b, cfg.method, cfg.project, cfg.seed);
    let mut result = IntegrityResult {
        encoder: z.encoder_id.clone(),
        shift: shift.to_string(),
        method: cfg.method,
        mode: cfg.mode,
        n_z: 0,
        n_zt: 0,
        edges: 0,
        homo_z: 0,
        homo_zt: 0,
        hetero: 0,
        q: 0.0,
        q_sd: None,
    };
    let mut graphs = Vec::new();
    match cfg.mode {
        IntegrityMode::Pooled => {
            let (a, b) = sets_for(&common, z, zt, &zk, &ztk, baseline, cfg, 0);
            let g = graph_of(&a, &b)?;
            let c = g.counts();
            graphs.push(g);
            result.n_z = a.len();
            result.n_zt = b.len();
            result.edges = c.total();
            result.homo_z = c.homo_z;
            result.homo_zt = c.homo_zt;
            result.hetero = c.hetero;
            result.q = quality_of(&c)?;
        }
        IntegrityMode::PerRecording => {
            let mut groups: BTreeMap<&str, Vec<Key>> = BTreeMap::new();
            for k in &common {
                groups.entry(k.0.as_str()).or_default().push(k.clone());
            }
            let mut qs = Vec::new();
            for (keys, tag) in groups.values().zip(0u64..) {
                let (a, b) = sets_for(keys, z, zt, &zk, &ztk, baseline, cfg, tag + 1);
                if a.is_empty() || b.is_empty() {
                    continue;
                }
                let g = graph_of(&a, &b)?;
                let c = g.counts();
                graphs.push(g);
                result.n_z += a.len();
                result.n_zt += b.len();
                result.edges += c.total();
                result.homo_z += c.homo_z;
                result.homo_zt += c.homo_zt;
                result.hetero += c.hetero;
                qs.push(quality_of(&c)?);
            }
            if qs.is_empty() {
                return Err(Error::NoEdges);
            }
            let m = qs.iter().sum::<f64>() / qs.len() as f64;
            result.q = m;
            result.q_sd = Some((qs.iter().map(|q| (q - m).powi(2)).sum::<f64>() / qs.len() as f64).sqrt());
        }
    }
    Ok((result, graphs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Embedding;
    use rand_distr::{Distribution, StandardNormal};

    fn vertices(tags: &[Origin]) -> Vec<Vertex> {
        tags.iter()
            .enumerate()
            .map(|(i, &origin)| Vertex {
                origin,
                recording_id: "r".into(),
                epoch_index: i,
            })
            .collect()
    }

    fn cloud(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, &[7]);
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut r))
    }

    fn set_from(points: &Array2<f64>, origin: Origin) -> EmbeddingSet {
        let mut s = EmbeddingSet::new("test", points.ncols());
        for (i, row) in points.rows().into_iter().enumerate() {
            s.push(Embedding {
                vector: row.to_vec(),
                origin,
                recording_id: format!("rec{}", i / 6),
                epoch_index: i % 6,
            })
            .unwrap();
        }
        s
    }

    #[test]
    fn quality_endpoints_and_formula() {
        let tags = [Origin::Z, Origin::Z, Origin::ZShifted, Origin::ZShifted];
        let homo = NeighborhoodGraph::from_edges(vertices(&tags), vec![(0, 1), (2, 3)]);
        assert_eq!(quality(&homo).unwrap(), 0.0);
        let hetero = NeighborhoodGraph::from_edges(vertices(&tags), vec![(0, 2), (1, 3), (0, 3)]);
        assert_eq!(quality(&hetero).unwrap(), 1.0);
        let mixed = NeighborhoodGraph::from_edges(vertices(&tags), vec![(0, 1), (2, 3), (0, 1), (1, 2)]);
        assert_eq!(quality(&mixed).unwrap(), 0.25);
        let empty = NeighborhoodGraph::from_edges(vertices(&tags), vec![]);
        assert!(matches!(quality(&empty), Err(Error::NoEdges)));
    }

    #[test]
    fn single_origin_gives_zero() {
        let p = cloud(50, 3, 1);
        let g = build_graph(&p, vertices(&[Origin::Z; 50]), GraphMethod::Gabriel, 0).unwrap();
        assert_eq!(g.counts().homo_z, g.edges.len());
        assert_eq!(quality(&g).unwrap(), 0.0);
    }

    #[test]
    fn distant_clusters_are_nearly_separate() {
        let mut p = cloud(100, 2, 2);
        for mut row in p.rows_mut().into_iter().skip(50) {
            row[0] += 1000.0;
        }
        let mut tags = vec![Origin::Z; 50];
        tags.extend([Origin::ZShifted; 50]);
        for method in [GraphMethod::Gabriel, GraphMethod::Exact2d] {
            let g = build_graph(&p, vertices(&tags), method, 0).unwrap();
            let c = g.counts();
            // Delaunay bridges the two hulls with a strip of long edges.
            assert!(
                c.hetero <= if method == GraphMethod::Gabriel { 1 } else { 20 },
                "{method}: {c:?}"
            );
            assert!(quality(&g).unwrap() < 0.05);
        }
    }

    #[test]
    fn self_comparison_after_jitter_is_near_half() {
        let p = cloud(200, 10, 3);
        let z = set_from(&p, Origin::Z);
        let g = build_neighborhood_graph(&z, &z, GraphMethod::Gabriel, false, 4).unwrap();
        let q = quality(&g).unwrap();
        assert!((0.4..=0.6).contains(&q), "{q}");
    }

    #[test]
    fn quality_is_affine_invariant_and_symmetric() {
        let p = cloud(80, 2, 5);
        let tags: Vec<Origin> = (0..80)
            .map(|i| if i % 3 == 0 { Origin::Z } else { Origin::ZShifted })
            .collect();
        let g = build_graph(&p, vertices(&tags), GraphMethod::Exact2d, 0).unwrap();
        let moved = p.mapv(|v| 3.5 * v - 2.0);
        let g2 = build_graph(&moved, vertices(&tags), GraphMethod::Exact2d, 0).unwrap();
        assert_eq!(g.edges, g2.edges);
        let swapped: Vec<Origin> = tags
            .iter()
            .map(|t| if *t == Origin::Z { Origin::ZShifted } else { Origin::Z })
            .collect();
        let g3 = build_graph(&p, vertices(&swapped), GraphMethod::Exact2d, 0).unwrap();
        assert_eq!(quality(&g).unwrap(), quality(&g3).unwrap());
    }

    #[test]
    fn gabriel_is_a_delaunay_subgraph() {
        for seed in 0..5 {
            let p = cloud(100, 2, seed);
            let flat: Vec<[f64; 2]> = p.rows().into_iter().map(|r| [r[0], r[1]]).collect();
            let del = delaunay_exact_2d(&flat).unwrap();
            for e in gabriel_graph(&p) {
                assert!(del.binary_search(&e).is_ok(), "{e:?}");
            }
        }
    }

    #[test]
    fn exact2d_requires_projection_in_high_dimension() {
        let z = set_from(&cloud(30, 5, 6), Origin::Z);
        let zt = set_from(&cloud(30, 5, 7), Origin::ZShifted);
        assert!(build_neighborhood_graph(&z, &zt, GraphMethod::Exact2d, false, 0).is_err());
        let g = build_neighborhood_graph(&z, &zt, GraphMethod::Exact2d, true, 0).unwrap();
        assert!(!g.edges.is_empty());
    }

    #[test]
    fn pca_recovers_the_dominant_plane() {
        let mut r = rng::stream(8, &[]);
        let p = Array2::from_shape_fn((200, 4), |(_, j)| {
            let s: f64 = StandardNormal.sample(&mut r);
            s * [10.0, 0.01, 5.0, 0.01][j]
        });
        let proj = project_pca2(&p);
        let var = |k: usize| proj.column(k).iter().map(|v| v * v).sum::<f64>() / 200.0;
        assert!(var(0) > 50.0 && var(1) > 10.0, "{} {}", var(0), var(1));
    }

    #[test]
    fn integrity_baseline_and_pairing() {
        let p = cloud(120, 4, 9);
        let z = set_from(&p, Origin::Z);
        let cfg = IntegrityConfig::default();
        let base = integrity_score(&z, &z, &ShiftSpec::NoShift, &cfg).unwrap();
        assert_eq!(base.n_z, 60);
        assert_eq!(base.n_zt, 60);
        assert!((0.3..=0.7).contains(&base.q), "{}", base.q);
        assert_eq!(base.edges, base.homo_z + base.homo_zt + base.hetero);

        let far = set_from(&p.mapv(|v| v + 100.0), Origin::ZShifted);
        let shift = ShiftSpec::BroadbandNoise { sigma: 0.1, seed: 0 };
        let r = integrity_score(&z, &far, &shift, &cfg).unwrap();
        assert!(r.q < 0.05);
        let sub = IntegrityConfig {
            subsample: 30,
            ..cfg.clone()
        };
        let r = integrity_score(&z, &far, &shift, &sub).unwrap();
        assert_eq!((r.n_z, r.n_zt), (30, 30));

        let per = IntegrityConfig {
            mode: IntegrityMode::PerRecording,
            ..cfg
        };
        let r = integrity_score(&z, &z, &ShiftSpec::NoShift, &per).unwrap();
        assert!(r.q_sd.is_some());
        assert!((0.0..=1.0).contains(&r.q));
    }

    #[test]
    fn integrity_needs_ten_epochs() {
        let z = set_from(&cloud(8, 2, 1), Origin::Z);
        assert!(integrity_score(&z, &z, &ShiftSpec::NoShift, &IntegrityConfig::default()).is_err());
    }
}
