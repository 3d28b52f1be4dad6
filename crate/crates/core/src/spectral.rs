//! Symmetric eigensolver and positional encodings.
//!
//! Encodings are per-node: Laplacian eigenvectors (LPE), shortest-path
//! distance matrix eigenvectors (SPDE), and capped degree ids (DEG). Columns
//! of eigenvector encodings are sign-fixed so their largest-magnitude entry is
//! positive, with ties going to the lowest row index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{bfs_all_pairs, Graph, GraphError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectralError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |M[{i}][{j}] - M[{j}][{i}]| = {diff:e}")]
    Asymmetric { i: usize, j: usize, diff: f64 },
    #[error("Jacobi iteration did not converge in {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },
    #[error("encoding width must be at least 1")]
    InvalidWidth,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Matrix { rows: r, cols: c, data: rows.concat() }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigen-decomposition with eigenvalues ascending; column `i` of `vectors`
/// belongs to `values[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

pub const SYMMETRY_TOLERANCE: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 100;
/// Below this magnitude an eigenvalue counts as zero.
pub const ZERO_EIGENVALUE: f64 = 1e-8;

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows {
        for j in 0..a.cols {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Sweeps until the off-diagonal Frobenius norm drops below
/// `1e-10 * max(1, ||M||_F)`.
pub fn jacobi_eigh(m: &Matrix) -> Result<Eigen, SpectralError> {
    let n = m.rows;
    if m.cols != n {
        return Err(SpectralError::NotSquare { rows: m.rows, cols: m.cols });
    }
    for i in 0..n {
        for j in i + 1..n {
            let diff = (m[(i, j)] - m[(j, i)]).abs();
            if diff > SYMMETRY_TOLERANCE {
                return Err(SpectralError::Asymmetric { i, j, diff });
            }
        }
    }
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    let tol = 1e-10 * m.frobenius().max(1.0);
    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a);
        if off < tol {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(SpectralError::NoConvergence { sweeps, off_norm: off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, new)] = v[(k, old)];
        }
    }
    Ok(Eigen { values, vectors })
}

/// Flips each column so its largest-magnitude entry is positive. Entries
/// within `1e-9` of the maximum magnitude tie; the lowest index wins.
pub fn fix_signs(m: &mut Matrix) {
    for j in 0..m.cols {
        let max = (0..m.rows).map(|i| m[(i, j)].abs()).fold(0.0, f64::max);
        if max == 0.0 {
            continue;
        }
        let pivot = (0..m.rows).find(|&i| m[(i, j)].abs() >= max - 1e-9).expect("max exists");
        if m[(pivot, j)] < 0.0 {
            for i in 0..m.rows {
                m[(i, j)] = -m[(i, j)];
            }
        }
    }
}

/// `I - D^{-1/2} A D^{-1/2}`; an isolated node gets an identity row.
pub fn normalized_laplacian(g: &Graph) -> Matrix {
    let n = g.num_nodes();
    let deg = g.degrees();
    let mut l = Matrix::identity(n);
    for e in g.edges() {
        let w = -1.0 / ((deg[e.u] * deg[e.v]) as f64).sqrt();
        l[(e.u, e.v)] = w;
        l[(e.v, e.u)] = w;
    }
    l
}

fn select_columns(eig: &Eigen, order: &[usize], k: usize) -> Matrix {
    let n = eig.vectors.rows;
    let mut out = Matrix::zeros(n, k);
    for (j, &col) in order.iter().take(k).enumerate() {
        for i in 0..n {
            out[(i, j)] = eig.vectors[(i, col)];
        }
    }
    fix_signs(&mut out);
    out
}

/// Eigenvectors of the normalized Laplacian for the `k` smallest eigenvalues
/// at or above [`ZERO_EIGENVALUE`], zero-padded to `n x k`.
pub fn laplacian_pe(g: &Graph, k: usize) -> Result<Matrix, SpectralError> {
    if k == 0 {
        return Err(SpectralError::InvalidWidth);
    }
    let eig = jacobi_eigh(&normalized_laplacian(g))?;
    let order: Vec<usize> = (0..eig.values.len()).filter(|&i| eig.values[i] >= ZERO_EIGENVALUE).collect();
    Ok(select_columns(&eig, &order, k))
}

/// Eigenvectors of the hop-distance matrix ordered by descending
/// `|eigenvalue|` (ties: positive first; zero eigenvalues skipped),
/// zero-padded to `n x k`.
pub fn spd_pe(g: &Graph, k: usize) -> Result<Matrix, SpectralError> {
    if k == 0 {
        return Err(SpectralError::InvalidWidth);
    }
    let d = bfs_all_pairs(g)?;
    let n = g.num_nodes();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = d.get(i, j) as f64;
        }
    }
    let eig = jacobi_eigh(&m)?;
    let mut order: Vec<usize> = (0..n).filter(|&i| eig.values[i].abs() >= ZERO_EIGENVALUE).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (eig.values[i], eig.values[j]);
        b.abs().total_cmp(&a.abs()).then(b.total_cmp(&a)).then(i.cmp(&j))
    });
    Ok(select_columns(&eig, &order, k))
}

/// `min(degree, cap)` per node, used as an embedding index.
pub fn degree_pe(g: &Graph, cap: usize) -> Vec<usize> {
    g.degrees().into_iter().map(|d| d.min(cap)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PeKind {
    Deg,
    Lpe,
    Spde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMerge {
    Concat,
    Sum,
}

/// Which encodings to compute and how the model merges them into tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeConfig {
    pub kinds: Vec<PeKind>,
    /// Width `k` of each eigenvector encoding.
    pub dim: usize,
    pub merge: PeMerge,
    /// Largest degree id; larger degrees share it.
    #[serde(default = "default_degree_cap")]
    pub degree_cap: usize,
}

fn default_degree_cap() -> usize {
    8
}

impl PeConfig {
    pub fn has(&self, kind: PeKind) -> bool {
        self.kinds.contains(&kind)
    }
}

/// Encodings of one graph, in the order LPE, SPDE.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Encodings {
    pub degree: Option<Vec<usize>>,
    pub lpe: Option<Matrix>,
    pub spde: Option<Matrix>,
}

impl Encodings {
    pub fn compute(g: &Graph, config: &PeConfig) -> Result<Self, SpectralError> {
        Ok(Encodings {
            degree: config.has(PeKind::Deg).then(|| degree_pe(g, config.degree_cap)),
            lpe: if config.has(PeKind::Lpe) { Some(laplacian_pe(g, config.dim)?) } else { None },
            spde: if config.has(PeKind::Spde) { Some(spd_pe(g, config.dim)?) } else { None },
        })
    }
}
