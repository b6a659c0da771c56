//! Behavioural similarity of point sets and linear probes.
//!
//! A [`SimilarityGraph`] is the complete graph over a point set with
//! Euclidean edge weights rescaled so that the shortest edge has weight 1.
//! [`shortest_path_kernel`] compares two such graphs edge by edge with a
//! vertex kernel on the endpoint labels and a Brownian ridge kernel
//! `k_e(x, y) = max(0, c − |x − y|) / c` on the weights, normalized by the
//! edge count of the first graph.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGraph {
    labels: Vec<usize>,
    /// Edge `(i, j)`, `i < j` in vertex order, stored row by row.
    weights: Vec<f64>,
}

fn edge_index(n: usize, i: usize, j: usize) -> usize {
    // row-major upper triangle without the diagonal
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

impl SimilarityGraph {
    /// Graph from explicit upper-triangle weights (already scaled).
    pub fn from_weights(labels: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let n = labels.len();
        if n < 2 {
            return Err(Error::Invalid("a similarity graph needs at least 2 vertices".into()));
        }
        ensure_len("edge weights", n * (n - 1) / 2, weights.len())?;
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Invalid("edge weights must be positive and finite".into()));
        }
        let mut seen = labels.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != n {
            return Err(Error::Invalid("vertex labels must be distinct".into()));
        }
        Ok(SimilarityGraph { labels, weights })
    }

    pub fn num_vertices(&self) -> usize {
        self.labels.len()
    }

    pub fn num_edges(&self) -> usize {
        self.weights.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight between vertices at positions `i != j`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.weights[edge_index(self.num_vertices(), a, b)]
    }
}

/// Complete graph over `points`, labelled `1..=n` in input order.
pub fn build_graph(points: &[Vec<f64>]) -> Result<SimilarityGraph> {
    build_graph_labeled(points, &(1..=points.len()).collect::<Vec<_>>())
}

/// Complete graph with caller-supplied vertex labels.
pub fn build_graph_labeled(points: &[Vec<f64>], labels: &[usize]) -> Result<SimilarityGraph> {
    let n = points.len();
    ensure_len("vertex labels", n, labels.len())?;
    if n < 2 {
        return Err(Error::Invalid("a similarity graph needs at least 2 points".into()));
    }
    let dim = points[0].len();
    let mut weights = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        ensure_len("point dimension", dim, points[i].len())?;
        for j in i + 1..n {
            let d = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            if d == 0.0 {
                return Err(Error::Invalid(format!("points {i} and {j} coincide")));
            }
            weights.push(d);
        }
    }
    let min = weights.iter().copied().fold(f64::INFINITY, f64::min);
    for w in &mut weights {
        *w /= min;
    }
    SimilarityGraph::from_weights(labels.to_vec(), weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VertexKernel {
    /// `k_v(x, y) = δ(x, y)`: edges are compared with their counterparts.
    #[default]
    Matching,
    /// `k_v(x, y) = 1 − δ(x, y)`.
    Complement,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    /// Ridge width; `None` uses the largest edge weight of either graph.
    pub c: Option<f64>,
    pub vertex: VertexKernel,
}

impl KernelConfig {
    fn width(&self, g1: &SimilarityGraph, g2: &SimilarityGraph) -> Result<f64> {
        let c = match self.c {
            Some(c) => c,
            None => g1
                .weights
                .iter()
                .chain(&g2.weights)
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
        };
        if !(c > 0.0) {
            return Err(Error::config("c", "ridge width must be positive"));
        }
        Ok(c)
    }
}

pub fn brownian_ridge(x: f64, y: f64, c: f64) -> f64 {
    (c - (x - y).abs()).max(0.0) / c
}

pub fn shortest_path_kernel(g1: &SimilarityGraph, g2: &SimilarityGraph, cfg: &KernelConfig) -> Result<f64> {
    let n = g1.num_vertices();
    ensure_len("vertex count", n, g2.num_vertices())?;
    let c = cfg.width(g1, g2)?;
    let pos2: HashMap<usize, usize> = g2.labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let total = match cfg.vertex {
        VertexKernel::Matching => {
            let mut total = 0.0;
            for i in 0..n {
                let pi = *pos2
                    .get(&g1.labels[i])
                    .ok_or_else(|| Error::Invalid(format!("label {} missing from the second graph", g1.labels[i])))?;
                for j in i + 1..n {
                    let pj = *pos2
                        .get(&g1.labels[j])
                        .ok_or_else(|| Error::Invalid(format!("label {} missing from the second graph", g1.labels[j])))?;
                    total += brownian_ridge(g1.weight(i, j), g2.weight(pi, pj), c);
                }
            }
            total
        }
        VertexKernel::Complement => {
            let mut total = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    let (a, b) = (g1.labels[i], g1.labels[j]);
                    let w = g1.weight(i, j);
                    for u in 0..n {
                        for v in u + 1..n {
                            let (x, y) = (g2.labels[u], g2.labels[v]);
                            if a != x && b != y {
                                total += brownian_ridge(w, g2.weight(u, v), c);
                            }
                        }
                    }
                }
            }
            total
        }
    };
    Ok(total / g1.num_edges() as f64)
}

/// Kernel between the graphs of paired latent and ground-truth samples.
pub fn behavioral_similarity(latents: &[Vec<f64>], gt: &[Vec<f64>], cfg: &KernelConfig) -> Result<f64> {
    ensure_len("paired samples", latents.len(), gt.len())?;
    shortest_path_kernel(&build_graph(latents)?, &build_graph(gt)?, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out R², pooled over the target columns.
    pub r2: f64,
    pub train: usize,
    pub test: usize,
    /// The design matrix was rank deficient and a pseudoinverse was used.
    pub rank_deficient: bool,
}

/// Ordinary least squares with intercept from latents to targets, scored by
/// R² on a held-out 20% split chosen by `seed`.
pub fn linear_probe(latents: &[Vec<f64>], targets: &[Vec<f64>], seed: u64) -> Result<ProbeReport> {
    let n = latents.len();
    ensure_len("probe targets", n, targets.len())?;
    if n == 0 {
        return Err(Error::Invalid("empty probe set".into()));
    }
    let d = latents[0].len();
    let k = targets[0].len();
    if n <= d + 1 {
        return Err(Error::Invalid(format!("{n} samples are too few for a {d}-dimensional probe")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "probe/split"));
    let n_test = (n / 5).max(1);
    let (test, train) = idx.split_at(n_test);
    let design = |rows: &[usize]| -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows.len(), d + 1);
        for (r, &i) in rows.iter().enumerate() {
            ensure_len("latent dimension", d, latents[i].len())?;
            for c in 0..d {
                m[(r, c)] = latents[i][c];
            }
            m[(r, d)] = 1.0;
        }
        Ok(m)
    };
    let response = |rows: &[usize]| -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows.len(), k);
        for (r, &i) in rows.iter().enumerate() {
            ensure_len("target dimension", k, targets[i].len())?;
            for c in 0..k {
                m[(r, c)] = targets[i][c];
            }
        }
        Ok(m)
    };
    let (x_tr, y_tr) = (design(train)?, response(train)?);
    let svd = x_tr.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * (train.len().max(d + 1)) as f64;
    let rank_deficient = svd.singular_values.iter().any(|&s| s <= tol);
    let beta = svd
        .solve(&y_tr, tol)
        .map_err(|e| Error::Invalid(format!("probe solve failed: {e}")))?;
    let (x_te, y_te) = (design(test)?, response(test)?);
    let pred = &x_te * &beta;
    let mut sse = 0.0;
    let mut sst = 0.0;
    for c in 0..k {
        let col = y_te.column(c);
        let mean = col.mean();
        for r in 0..test.len() {
            sse += (col[r] - pred[(r, c)]).powi(2);
            sst += (col[r] - mean).powi(2);
        }
    }
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else { 0.0 };
    Ok(ProbeReport {
        r2,
        train: train.len(),
        test: test.len(),
        rank_deficient,
    })
}

/// Least-squares fit `targets ≈ [latents, 1] β` on all samples (no split).
pub fn least_squares(latents: &[Vec<f64>], targets: &[f64]) -> Result<Vec<f64>> {
    ensure_len("targets", latents.len(), targets.len())?;
    let n = latents.len();
    let d = latents.first().map_or(0, Vec::len);
    let x = DMatrix::from_fn(n, d + 1, |r, c| if c < d { latents[r][c] } else { 1.0 });
    let y = DVector::from_column_slice(targets);
    let svd = x.svd(true, true);
    let beta = svd
        .solve(&y, 1e-12)
        .map_err(|e| Error::Invalid(format!("least squares failed: {e}")))?;
    Ok(beta.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_unit_edge() {
        let g = build_graph(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(g.weights(), &[1.0]);
    }

    #[test]
    fn line_weights() {
        let g = build_graph(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(g.weights(), &[1.0, 3.0, 2.0]);
    }

    #[test]
    fn duplicates_rejected() {
        assert!(build_graph(&[vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn worked_example() {
        let g1 = SimilarityGraph::from_weights(vec![1, 2, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let g2 = SimilarityGraph::from_weights(vec![1, 2, 3], vec![1.0, 2.0, 4.0]).unwrap();
        let cfg = KernelConfig {
            c: Some(2.0),
            ..Default::default()
        };
        let k = shortest_path_kernel(&g1, &g2, &cfg).unwrap();
        assert!((k - 2.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shifted_weights_give_zero() {
        let g1 = SimilarityGraph::from_weights(vec![1, 2, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let g2 = SimilarityGraph::from_weights(vec![1, 2, 3], vec![3.0, 4.0, 5.0]).unwrap();
        let cfg = KernelConfig {
            c: Some(2.0),
            ..Default::default()
        };
        assert_eq!(shortest_path_kernel(&g1, &g2, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn probe_recovers_copied_coordinate() {
        let mut r = rng::stream(1, "t");
        let z: Vec<Vec<f64>> = (0..100).map(|_| rng::normals(&mut r, 3)).collect();
        let t: Vec<Vec<f64>> = z.iter().map(|v| vec![v[1]]).collect();
        let rep = linear_probe(&z, &t, 0).unwrap();
        assert!((rep.r2 - 1.0).abs() < 1e-9);
        assert!(!rep.rank_deficient);
    }

    #[test]
    fn probe_flags_rank_deficiency() {
        let mut r = rng::stream(2, "t");
        let z: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let a = rng::normal(&mut r);
                vec![a, 2.0 * a]
            })
            .collect();
        let t: Vec<Vec<f64>> = z.iter().map(|v| vec![v[0]]).collect();
        let rep = linear_probe(&z, &t, 0).unwrap();
        assert!(rep.rank_deficient);
        assert!((rep.r2 - 1.0).abs() < 1e-9);
    }
}
