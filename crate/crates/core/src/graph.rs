//! Dense undirected graphs: adjacency matrices, self-loop augmentation,
//! symmetric degree normalization and index-based subgraph extraction.
//!
//! All matrices are dense `n x n` row-major `f64`. Node counts in this crate
//! stay in the low hundreds, so dense storage is the simpler choice.

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

/// Symmetric, nonnegative `n x n` adjacency matrix.
///
/// A freshly built graph has a zero diagonal; [`add_self_loops`] produces an
/// augmented matrix of the same type with ones on the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    n: usize,
    data: Vec<f64>,
}

impl Adjacency {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!(
                "adjacency buffer of length {} is not {n}x{n}",
                data.len()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let v = data[i * n + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Shape(format!(
                        "adjacency entry ({i},{j}) = {v} is not a nonnegative real"
                    )));
                }
                if (v - data[j * n + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::Shape(format!(
                        "adjacency is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Adjacency { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::Shape(format!(
                "row {i} has {} entries in a {n}-row adjacency",
                r.len()
            )));
        }
        Self::new(n, rows.concat())
    }

    pub fn zeros(n: usize) -> Self {
        Adjacency {
            n,
            data: vec![0.0; n * n],
        }
    }

    /// Unweighted graph from an undirected edge list. Self-edges are ignored.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = Self::zeros(n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Index(format!(
                    "edge ({i},{j}) out of range for {n} nodes"
                )));
            }
            if i != j {
                a.data[i * n + j] = 1.0;
                a.data[j * n + i] = 1.0;
            }
        }
        Ok(a)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Upper-triangle edge list `(i, j)` with `i < j` and a nonzero entry.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.get(i, j) != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn has_zero_diagonal(&self) -> bool {
        (0..self.n).all(|i| self.get(i, i) == 0.0)
    }
}

/// `D^-1/2 A D^-1/2` of a self-loop-augmented adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    data: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Rows and columns `idx` of the already-normalized matrix, without
    /// re-deriving degrees.
    pub fn extract(&self, idx: &[usize]) -> Result<Self> {
        let data = gather_square(&self.data, self.n, idx)?;
        Ok(NormalizedAdjacency {
            n: idx.len(),
            data,
        })
    }
}

/// Returns `a + I`.
pub fn add_self_loops(a: &Adjacency) -> Adjacency {
    let mut data = a.data.clone();
    for i in 0..a.n {
        data[i * a.n + i] += 1.0;
    }
    Adjacency { n: a.n, data }
}

/// Symmetric degree normalization: `out[i][j] = a[i][j] / sqrt(deg_i * deg_j)`.
pub fn sym_normalize(a_hat: &Adjacency) -> Result<NormalizedAdjacency> {
    let n = a_hat.n;
    let mut deg = Vec::with_capacity(n);
    for i in 0..n {
        let d: f64 = a_hat.data[i * n..(i + 1) * n].iter().sum();
        if d <= 0.0 {
            return Err(Error::DegenerateDegree { node: i });
        }
        deg.push(d);
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let a = a_hat.data[i * n + j];
            if a != 0.0 {
                data[i * n + j] = a / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    Ok(NormalizedAdjacency { n, data })
}

/// `sym_normalize(add_self_loops(a))`; cannot fail since every degree is at
/// least one after augmentation.
pub fn normalize_with_self_loops(a: &Adjacency) -> NormalizedAdjacency {
    sym_normalize(&add_self_loops(a)).expect("self-loops guarantee positive degree")
}

/// Induced subgraph on `idx`: `out[r][s] = a[idx[r]][idx[s]]`.
pub fn extract_subgraph(a: &Adjacency, idx: &[usize]) -> Result<Adjacency> {
    let data = gather_square(&a.data, a.n, idx)?;
    Ok(Adjacency {
        n: idx.len(),
        data,
    })
}

/// Checks that `idx` is strictly ascending and every entry is below `n`.
pub fn validate_ascending(idx: &[usize], n: usize) -> Result<()> {
    for (pos, &i) in idx.iter().enumerate() {
        if i >= n {
            return Err(Error::Index(format!("index {i} out of range for {n} nodes")));
        }
        if pos > 0 && idx[pos - 1] >= i {
            return Err(Error::Index(format!(
                "indices must be strictly ascending, got {} then {i}",
                idx[pos - 1]
            )));
        }
    }
    Ok(())
}

fn gather_square(data: &[f64], n: usize, idx: &[usize]) -> Result<Vec<f64>> {
    validate_ascending(idx, n)?;
    let k = idx.len();
    let mut out = Vec::with_capacity(k * k);
    for &r in idx {
        for &s in idx {
            out.push(data[r * n + s]);
        }
    }
    Ok(out)
}
