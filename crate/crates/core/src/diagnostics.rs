//! Analysis instruments: Dirichlet energy, Jacobian sensitivity maps, hop
//! histograms and attention export.

use std::fmt::Write;

use serde::Serialize;

use crate::autodiff::{Tape, Tensor};
use crate::graph::{peripheral_node, Graph};
use crate::junction_tree::color_ramp;
use crate::model::{gcn_stack, AttentionRecord, ForwardOptions, ModelError, Prepared, SubFormer};
use crate::spectral::Matrix;

/// Jacobian norms below this count as over-squashed.
pub const SQUASH_THRESHOLD: f64 = 0.05;

/// `(1/n) Σ_i Σ_{j∈N(i)} ‖x_i − x_j‖²`; each undirected edge counts twice.
pub fn dirichlet_energy(x: &Matrix, edges: &[(usize, usize)]) -> f64 {
    if x.rows == 0 {
        return 0.0;
    }
    let sum: f64 = edges
        .iter()
        .map(|&(i, j)| x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    2.0 * sum / x.rows as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyProfile {
    /// Energy of the input followed by each layer's output.
    pub values: Vec<f64>,
}

impl EnergyProfile {
    /// `E(layer) / E(1)`; `None` when layer 1 has zero energy.
    pub fn ratio_to_first(&self, layer: usize) -> Option<f64> {
        let first = *self.values.get(1)?;
        let v = *self.values.get(layer)?;
        (first > 0.0).then(|| v / first)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,energy\n");
        for (l, e) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{l},{e}");
        }
        out
    }
}

fn undirected_edges(g: &Graph) -> Vec<(usize, usize)> {
    g.edges().iter().map(|e| (e.u, e.v)).collect()
}

/// Energy of the GCN comparator's snapshots over the graph's edges.
pub fn gcn_energy_profile(g: &Graph, x0: &Matrix, weights: &[Matrix]) -> EnergyProfile {
    let edges = undirected_edges(g);
    EnergyProfile { values: gcn_stack(g, x0, weights).iter().map(|x| dirichlet_energy(x, &edges)).collect() }
}

/// Energy of the encoder's tree tokens (CLS excluded) over the tree edges,
/// for the encoder input and every encoder layer.
pub fn token_energy_profile(model: &SubFormer, item: &Prepared) -> Result<EnergyProfile, ModelError> {
    let mut t = Tape::new();
    let p = model.params.bind_frozen(&mut t);
    let out = model.forward(&mut t, &p, &[item], None, ForwardOptions::eval())?;
    let m = item.num_clusters();
    let d = model.config().transformer_hidden;
    let edges = &item.decomposition.tree_edges;
    let values = out
        .tokens
        .iter()
        .map(|&s| {
            let v = t.value(s);
            let tokens = Matrix { rows: m, cols: d, data: v[d..(m + 1) * d].to_vec() };
            dirichlet_energy(&tokens, edges)
        })
        .collect();
    Ok(EnergyProfile { values })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SquashMap {
    pub reference: usize,
    /// Frobenius norm of `∂x_ref / ∂x_j` per input node `j`.
    pub norms: Vec<f64>,
    pub squashed: Vec<bool>,
    pub threshold: f64,
}

impl SquashMap {
    pub fn from_blocks(reference: usize, blocks: &[Matrix], threshold: f64) -> Self {
        let norms: Vec<f64> = blocks.iter().map(Matrix::frobenius).collect();
        let squashed = norms.iter().map(|&n| n < threshold).collect();
        SquashMap { reference, norms, squashed, threshold }
    }
}

/// Jacobian blocks `∂y_ref / ∂x_j` (`out_width x in_width`) for every input row
/// `j`, by one backward pass per output dimension. `build` maps the input
/// leaf `[rows, in_width]` to outputs `[out_rows, out_width]`.
pub fn jacobian_blocks<F>(x0: &[f64], shape: [usize; 2], reference: usize, build: F) -> Result<Vec<Matrix>, ModelError>
where
    F: Fn(&mut Tape, Tensor) -> Result<Tensor, ModelError>,
{
    let [rows, width] = shape;
    let mut blocks = vec![];
    let mut k = 0;
    loop {
        let mut t = Tape::new();
        let x = t.param(x0.to_vec(), &shape)?;
        let y = build(&mut t, x)?;
        let ys = t.shape(y).to_vec();
        if ys.len() != 2 {
            return Err(ModelError::Mismatch(format!("probe output has shape {ys:?}, expected a matrix")));
        }
        if reference >= ys[0] {
            return Err(ModelError::Mismatch(format!("reference node {reference} out of range for {} nodes", ys[0])));
        }
        if blocks.is_empty() {
            blocks = vec![Matrix::zeros(ys[1], width); rows];
        }
        let s = t.pick(y, reference * ys[1] + k)?;
        let g = t.backward(s)?;
        if let Some(gx) = g.get(x) {
            for (j, block) in blocks.iter_mut().enumerate() {
                block.data[k * width..(k + 1) * width].copy_from_slice(&gx[j * width..(j + 1) * width]);
            }
        }
        k += 1;
        if k == ys[1] {
            return Ok(blocks);
        }
    }
}

/// Embedded atom features `X0` of one item, the probe's input point.
pub fn probe_input(model: &SubFormer, item: &Prepared) -> Result<Vec<f64>, ModelError> {
    let mut t = Tape::new();
    let p = model.params.bind_frozen(&mut t);
    let x = model.embed_atoms(&mut t, &p, &[item])?;
    Ok(t.value(x).to_vec())
}

/// Sensitivity of the reference atom's final representation `(Sᵀ Z_L)_ref` to
/// each atom's embedded input. Neither the CLS token nor the dual readout is
/// involved. Blocks are over atoms only (a virtual node is left out).
pub fn subformer_jacobian(model: &SubFormer, item: &Prepared, reference: usize) -> Result<Vec<Matrix>, ModelError> {
    if reference >= item.num_atoms {
        return Err(ModelError::Mismatch(format!("reference node {reference} out of range for {} atoms", item.num_atoms)));
    }
    let x0 = probe_input(model, item)?;
    let mut blocks = jacobian_blocks(&x0, [item.num_nodes, model.config().mp_hidden], reference, |t, x| {
        let p = model.params.bind_frozen(t);
        let out = model.forward(t, &p, &[item], Some(x), ForwardOptions::eval())?;
        model.tokens_to_atoms(t, &out, item)
    })?;
    blocks.truncate(item.num_atoms);
    Ok(blocks)
}

/// The same probe through the first `k` GINE layers alone.
pub fn mp_jacobian(model: &SubFormer, item: &Prepared, reference: usize, k: usize) -> Result<Vec<Matrix>, ModelError> {
    if reference >= item.num_atoms {
        return Err(ModelError::Mismatch(format!("reference node {reference} out of range for {} atoms", item.num_atoms)));
    }
    let x0 = probe_input(model, item)?;
    let mut blocks = jacobian_blocks(&x0, [item.num_nodes, model.config().mp_hidden], reference, |t, x| {
        let p = model.params.bind_frozen(t);
        model.mp_stack(t, &p, item, x, k)
    })?;
    blocks.truncate(item.num_atoms);
    Ok(blocks)
}

pub fn jacobian_map(model: &SubFormer, item: &Prepared, reference: usize, threshold: f64) -> Result<SquashMap, ModelError> {
    Ok(SquashMap::from_blocks(reference, &subformer_jacobian(model, item, reference)?, threshold))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct HopHistogram {
    /// `counts[h]` = number of nodes at `h` hops from their graph's reference node.
    pub counts: Vec<usize>,
    pub graphs: usize,
    pub skipped: usize,
}

impl HopHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("hops,count\n");
        for (h, c) in self.counts.iter().enumerate().skip(1) {
            let _ = writeln!(out, "{h},{c}");
        }
        out
    }

    pub fn mass_at_least(&self, hops: usize) -> usize {
        self.counts.iter().skip(hops).sum()
    }
}

/// BFS distances from each graph's peripheral node (maximum eccentricity,
/// lowest index), pooled. Disconnected graphs are skipped.
pub fn hop_histogram<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> HopHistogram {
    let mut h = HopHistogram::default();
    for g in graphs {
        let Ok(r) = peripheral_node(g) else {
            h.skipped += 1;
            continue;
        };
        let dist = g.bfs_from(r);
        if dist.iter().any(Option::is_none) {
            h.skipped += 1;
            continue;
        }
        h.graphs += 1;
        for (v, d) in dist.iter().enumerate() {
            let d = d.expect("connected");
            if v == r {
                continue;
            }
            if h.counts.len() <= d {
                h.counts.resize(d + 1, 0);
            }
            h.counts[d] += 1;
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionExport {
    pub id: String,
    pub num_clusters: usize,
    /// Every layer and head, cropped to the unpadded `(m+1) x (m+1)` block.
    pub records: Vec<AttentionRecord>,
    /// Head-averaged last-layer matrix.
    pub last_layer_mean: Vec<Vec<f64>>,
    /// CLS row of `last_layer_mean` restricted to the clusters.
    pub cls_to_clusters: Vec<f64>,
    /// `Sᵀ` applied to `cls_to_clusters`.
    pub cls_to_atoms: Vec<f64>,
}

pub fn attention_export(model: &SubFormer, item: &Prepared) -> Result<AttentionExport, ModelError> {
    let layers = model.config().transformer_layers;
    if layers == 0 {
        return Err(ModelError::Mismatch("model has no attention layers".into()));
    }
    let mut t = Tape::new();
    let p = model.params.bind_frozen(&mut t);
    let opts = ForwardOptions { training: false, seed: 0, record_attention: true };
    let out = model.forward(&mut t, &p, &[item], None, opts)?;
    let m = item.num_clusters();
    let records: Vec<AttentionRecord> = out
        .attention
        .into_iter()
        .map(|mut r| {
            r.weights.truncate(r.valid);
            r.weights.iter_mut().for_each(|row| row.truncate(r.valid));
            r
        })
        .collect();
    let last: Vec<&AttentionRecord> = records.iter().filter(|r| r.layer == layers - 1).collect();
    let mut mean = vec![vec![0.0; m + 1]; m + 1];
    for r in &last {
        for (i, row) in r.weights.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                mean[i][j] += w / last.len() as f64;
            }
        }
    }
    let cls_to_clusters = mean[0][1..].to_vec();
    let mut cls_to_atoms = vec![0.0; item.num_atoms];
    for &(c, a) in &item.assignment {
        cls_to_atoms[a] += cls_to_clusters[c];
    }
    Ok(AttentionExport { id: item.id.clone(), num_clusters: m, records, last_layer_mean: mean, cls_to_clusters, cls_to_atoms })
}

/// DOT of a molecular graph with atoms colored by `weights` on the same
/// white-to-red ramp as the junction-tree DOT.
pub fn graph_dot(g: &Graph, weights: Option<&[f64]>) -> String {
    let max = weights.map_or(0.0, |w| w.iter().copied().fold(0.0, f64::max));
    let mut out = String::from("graph molecule {\n  node [style=filled];\n");
    for (i, label) in g.node_labels().iter().enumerate() {
        let color = weights.map_or_else(|| "\"#ffffff\"".to_string(), |w| color_ramp(w[i], max));
        let weight = weights.map_or(String::new(), |w| format!(", weight=\"{:.4}\"", w[i]));
        let _ = writeln!(out, "  {i} [label=\"{label}:{i}\", fillcolor={color}{weight}];");
    }
    for e in g.edges() {
        let _ = writeln!(out, "  {} -- {} [label=\"{}\"];", e.u, e.v, e.label);
    }
    out.push_str("}\n");
    out
}
