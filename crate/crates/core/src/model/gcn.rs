//! Weight-free GCN propagation, the smoothing baseline for the energy
//! diagnostic.

use crate::graph::Graph;
use crate::spectral::Matrix;

/// `D^{-1/2} (A + I) D^{-1/2}` with degrees counted including the self loop.
pub fn gcn_propagation(g: &Graph) -> Matrix {
    let n = g.num_nodes();
    let mut a = Matrix::identity(n);
    for e in g.edges() {
        a.data[e.u * n + e.v] = 1.0;
        a.data[e.v * n + e.u] = 1.0;
    }
    let inv_sqrt: Vec<f64> = g.degrees().iter().map(|&d| 1.0 / ((d + 1) as f64).sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            a.data[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    a
}

/// `X(l+1) = relu(Â X(l) W(l))` for each weight matrix, returning the input
/// followed by every layer's output.
pub fn gcn_stack(g: &Graph, x: &Matrix, weights: &[Matrix]) -> Vec<Matrix> {
    let a = gcn_propagation(g);
    let mut out = vec![x.clone()];
    for w in weights {
        let mut next = a.matmul(out.last().expect("starts nonempty")).matmul(w);
        next.data.iter_mut().for_each(|v| *v = v.max(0.0));
        out.push(next);
    }
    out
}

/// `layers` identity weight matrices of width `d`.
pub fn identity_weights(d: usize, layers: usize) -> Vec<Matrix> {
    vec![Matrix::identity(d); layers]
}
