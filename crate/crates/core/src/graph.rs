//! Depth graphs over layers.
//!
//! One node per layer, chain edges between consecutive depths, and optional
//! semantic edges between layers whose averaged gradients point the same
//! way. Edges are unweighted. Two matrices come out of a graph:
//!
//! * the combinatorial Laplacian `L = D - A` (self-loops excluded), used for
//!   drift energy and smoothing;
//! * the GCN-normalised adjacency `S = D'^{-1/2} (A + I) D'^{-1/2}` where `D'`
//!   counts the self-loop, so isolated nodes still normalise to 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::SparseRows;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_COS_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Adjacency,
    Semantic,
}

impl EdgeKind {
    fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Adjacency => "adjacency",
            EdgeKind::Semantic => "semantic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    n: usize,
    /// Keyed by `(i, j)` with `i < j`.
    #[serde(with = "edge_list_serde")]
    edges: BTreeMap<(usize, usize), EdgeKind>,
    /// Cosines that produced semantic edges.
    pub semantic_cosines: Vec<((usize, usize), f64)>,
    /// Nodes skipped while adding semantic edges.
    pub warnings: Vec<String>,
}

// JSON maps need string keys, so edges travel as a list of pairs.
mod edge_list_serde {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::EdgeKind;

    type Edges = BTreeMap<(usize, usize), EdgeKind>;

    pub fn serialize<S: Serializer>(edges: &Edges, s: S) -> Result<S::Ok, S::Error> {
        edges.iter().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Edges, D::Error> {
        Ok(Vec::<((usize, usize), EdgeKind)>::deserialize(d)?
            .into_iter()
            .collect())
    }
}

impl LayerGraph {
    /// Graph with `n` nodes and no edges.
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            edges: BTreeMap::new(),
            semantic_cosines: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Path graph `0 - 1 - ... - (n-1)`.
    pub fn chain(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!(
                "a layer chain needs at least 2 nodes, got {n}"
            )));
        }
        let mut g = Self::empty(n);
        for i in 0..n - 1 {
            g.edges.insert((i, i + 1), EdgeKind::Adjacency);
        }
        Ok(g)
    }

    /// Inserts an undirected edge; self-loops are rejected, duplicates keep
    /// their original kind.
    pub fn add_edge(&mut self, i: usize, j: usize, kind: EdgeKind) -> Result<bool> {
        if i == j {
            return Err(Error::Domain(format!("self-loop ({i},{i}) is not stored")));
        }
        if i >= self.n || j >= self.n {
            return Err(Error::Domain(format!(
                "edge ({i},{j}) outside {} nodes",
                self.n
            )));
        }
        let key = (i.min(j), i.max(j));
        if self.edges.contains_key(&key) {
            return Ok(false);
        }
        self.edges.insert(key, kind);
        Ok(true)
    }

    pub fn n_layers(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = ((usize, usize), EdgeKind)> + '_ {
        self.edges.iter().map(|(k, v)| (*k, *v))
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains_key(&(i.min(j), i.max(j)))
    }

    pub fn semantic_edges(&self) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .filter(|(_, k)| **k == EdgeKind::Semantic)
            .map(|(e, _)| *e)
            .collect()
    }

    /// Neighbour counts, self-loop excluded.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in self.edges.keys() {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn max_degree(&self) -> usize {
        self.degrees().into_iter().max().unwrap_or(0)
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in self.edges.keys() {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Adds a semantic edge for every unconnected pair whose gradient cosine
    /// reaches `threshold`. Zero-norm gradients are skipped with a warning.
    pub fn add_semantic_edges(&self, grads: &[Vec<f64>], threshold: f64) -> Result<Self> {
        if grads.len() != self.n {
            return Err(Error::dim(
                "add_semantic_edges",
                (self.n, 1),
                (grads.len(), 1),
            ));
        }
        if !(threshold > -1.0 && threshold <= 1.0) {
            return Err(Error::Domain(format!(
                "cosine threshold must lie in (-1, 1], got {threshold}"
            )));
        }
        let mut out = self.clone();
        let norms: Vec<f64> = grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        for (i, n) in norms.iter().enumerate() {
            if *n == 0.0 || !n.is_finite() {
                out.warnings
                    .push(format!("node {i}: zero-norm gradient, no semantic edges"));
            }
        }
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) || norms[i] == 0.0 || norms[j] == 0.0 {
                    continue;
                }
                if grads[i].len() != grads[j].len() {
                    return Err(Error::dim(
                        "gradient cosine",
                        (1, grads[i].len()),
                        (1, grads[j].len()),
                    ));
                }
                let dot: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum();
                let cos = dot / (norms[i] * norms[j]);
                if cos >= threshold {
                    out.edges.insert((i, j), EdgeKind::Semantic);
                    out.semantic_cosines.push(((i, j), cos));
                }
            }
        }
        Ok(out)
    }

    /// `D - A`.
    pub fn laplacian(&self) -> Matrix {
        let mut lap = Matrix::zeros(self.n, self.n);
        for &(i, j) in self.edges.keys() {
            lap.set(i, j, -1.0);
            lap.set(j, i, -1.0);
            lap.set(i, i, lap.get(i, i) + 1.0);
            lap.set(j, j, lap.get(j, j) + 1.0);
        }
        lap
    }

    /// Entries `(i, j, 1/sqrt(d'_i d'_j))` over edges and self-loops.
    fn normalized_entries(&self) -> Vec<(usize, usize, f64)> {
        let deg: Vec<f64> = self.degrees().iter().map(|d| (*d + 1) as f64).collect();
        let mut entries = Vec::with_capacity(self.n + 2 * self.edges.len());
        for i in 0..self.n {
            entries.push((i, i, 1.0 / deg[i]));
        }
        for &(i, j) in self.edges.keys() {
            let w = 1.0 / (deg[i] * deg[j]).sqrt();
            entries.push((i, j, w));
            entries.push((j, i, w));
        }
        entries
    }

    /// Self-loop-inclusive symmetric normalised adjacency.
    pub fn normalized_adjacency(&self) -> Matrix {
        self.normalized_operator().to_dense()
    }

    /// The normalised adjacency as a sparse row operator for message passing.
    pub fn normalized_operator(&self) -> Rc<SparseRows> {
        Rc::new(
            SparseRows::new(self.n, self.normalized_entries()).expect("entries index valid nodes"),
        )
    }

    /// `I - S`.
    pub fn normalized_laplacian(&self) -> Matrix {
        Matrix::identity(self.n)
            .sub(&self.normalized_adjacency())
            .expect("same shape")
    }

    pub fn spectral_view(&self) -> SpectralView {
        let laplacian = self.laplacian();
        let lambda_max = lambda_max(&laplacian, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL).upper;
        SpectralView {
            normalized_adjacency: self.normalized_adjacency(),
            laplacian,
            lambda_max,
        }
    }

    /// One `i j kind` line per edge, 0-based node ids.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for (&(i, j), kind) in &self.edges {
            let _ = writeln!(s, "{i} {j} {}", kind.as_str());
        }
        s
    }

    pub fn from_edge_list(n: usize, text: &str) -> Result<Self> {
        let mut g = Self::empty(n);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || {
                Error::Config(format!(
                    "edge list line {}: cannot parse {line:?}",
                    lineno + 1
                ))
            };
            if parts.len() != 3 {
                return Err(bad());
            }
            let i: usize = parts[0].parse().map_err(|_| bad())?;
            let j: usize = parts[1].parse().map_err(|_| bad())?;
            let kind = match parts[2] {
                "adjacency" => EdgeKind::Adjacency,
                "semantic" => EdgeKind::Semantic,
                _ => return Err(bad()),
            };
            g.add_edge(i, j, kind)?;
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralView {
    pub laplacian: Matrix,
    pub normalized_adjacency: Matrix,
    pub lambda_max: f64,
}

pub const DEFAULT_POWER_ITERS: usize = 20_000;
pub const DEFAULT_POWER_TOL: f64 = 1e-10;

/// Largest-eigenvalue estimate for a symmetric PSD matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaMax {
    /// Rayleigh quotient of the final iterate; never exceeds the true value.
    pub estimate: f64,
    /// `estimate + residual` when converged, else the Gershgorin bound.
    pub upper: f64,
    /// `max_i sum_j |M_ij|`, which is `2 * max degree` for a Laplacian.
    pub gershgorin: f64,
    /// `|M v - rho v|` at the final iterate.
    pub residual: f64,
    pub iterations: usize,
    /// Set when power iteration did not converge and `upper` fell back to
    /// the Gershgorin bound.
    pub loose: bool,
}

impl LambdaMax {
    pub fn value(&self) -> f64 {
        if self.loose {
            self.gershgorin
        } else {
            self.estimate
        }
    }
}

/// Power iteration with a Rayleigh-residual stopping rule.
///
/// Stops once `residual <= tol * rho`; the interval `[rho, rho + residual]`
/// then brackets an eigenvalue, and from a generic start vector that
/// eigenvalue is the largest. The start vector is drawn from a fixed seed.
pub fn lambda_max(m: &Matrix, iters: usize, tol: f64) -> LambdaMax {
    let n = m.rows();
    let gershgorin = (0..n)
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let fallback = |residual: f64, iterations: usize| LambdaMax {
        estimate: gershgorin,
        upper: gershgorin,
        gershgorin,
        residual,
        iterations,
        loose: true,
    };
    if n == 0 || gershgorin == 0.0 {
        return LambdaMax {
            estimate: 0.0,
            upper: 0.0,
            gershgorin,
            residual: 0.0,
            iterations: 0,
            loose: false,
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = Matrix::random_normal(n, 1, 1.0, &mut rng);
    let norm = v.frobenius_norm();
    v = v.scale(1.0 / norm);
    let mut residual = f64::INFINITY;
    for it in 1..=iters {
        let mv = m.matmul(&v).expect("square matrix");
        let rho = v.dot(&mv).expect("same length");
        residual = mv.sub(&v.scale(rho)).expect("same shape").frobenius_norm();
        if residual <= tol * rho.abs().max(f64::MIN_POSITIVE) {
            return LambdaMax {
                estimate: rho,
                upper: (rho + residual).min(gershgorin),
                gershgorin,
                residual,
                iterations: it,
                loose: false,
            };
        }
        let norm = mv.frobenius_norm();
        if norm == 0.0 {
            return fallback(residual, it);
        }
        v = mv.scale(1.0 / norm);
    }
    fallback(residual, iters)
}

/// Eigenvalues of a symmetric matrix in ascending order (dense solver).
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.to_nalgebra());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    vals
}

/// Eigenpairs of a symmetric matrix, ascending; eigenvectors as columns.
pub fn symmetric_eigen(m: &Matrix) -> (Vec<f64>, Matrix) {
    let eig = nalgebra::SymmetricEigen::new(m.to_nalgebra());
    let mut order: Vec<usize> = (0..m.rows()).collect();
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = Matrix::zeros(m.rows(), m.rows());
    for (c, &i) in order.iter().enumerate() {
        for r in 0..m.rows() {
            vecs.set(r, c, eig.eigenvectors[(r, i)]);
        }
    }
    (vals, vecs)
}
