use crate::corpus::{AtomVocab, DatasetRecord};
use crate::graph::{add_virtual_node, Graph, VIRTUAL_EDGE_LABEL};
use crate::junction_tree::{decompose, ClusterVocab, Decomposition};
use crate::spectral::{laplacian_pe, Encodings, Matrix};

use super::{ModelConfig, ModelError, MpPe};

/// Edge-embedding rows: bond labels, the virtual-node spoke label, and one
/// shared row for any other label.
pub const EDGE_VOCAB: usize = VIRTUAL_EDGE_LABEL as usize + 2;

/// Everything the model needs about one molecule, computed once.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    /// Atoms of the original graph.
    pub num_atoms: usize,
    /// Message-passing nodes: atoms, then the virtual node if enabled.
    pub num_nodes: usize,
    /// Atom-embedding row per message-passing node.
    pub node_ids: Vec<usize>,
    /// Directed message edges `(src, dst, edge-embedding row)`, both directions.
    pub messages: Vec<(usize, usize, usize)>,
    /// Undirected edges of the original graph.
    pub graph_edges: Vec<(usize, usize)>,
    /// Laplacian encoding of the atoms, when the config asks for one.
    pub mp_pe: Option<Matrix>,
    pub decomposition: Decomposition,
    pub cluster_codes: Vec<usize>,
    /// Nonzero entries `(cluster, atom)` of the assignment matrix.
    pub assignment: Vec<(usize, usize)>,
    pub tree_pe: Encodings,
    pub targets: Vec<Option<f64>>,
}

impl Prepared {
    pub fn num_clusters(&self) -> usize {
        self.decomposition.num_clusters()
    }
}

/// Atom-embedding table: unknown label row 0, vocabulary rows, then the
/// virtual-node row.
pub fn atom_table_size(vocab: &AtomVocab) -> usize {
    vocab.size() + 1
}

pub fn prepare(
    id: &str,
    graph: &Graph,
    targets: &[Option<f64>],
    config: &ModelConfig,
    vocab: &AtomVocab,
) -> Result<Prepared, ModelError> {
    let decomposition = decompose(graph)?;
    if let Some(cap) = config.padding_dim {
        if decomposition.num_clusters() > cap {
            return Err(ModelError::PaddingOverflow { tree_size: decomposition.num_clusters(), cap });
        }
    }
    let n = graph.num_nodes();
    let mp_graph = if config.virtual_node { add_virtual_node(graph) } else { graph.clone() };
    let mut node_ids: Vec<usize> = graph.node_labels().iter().map(|&l| vocab.index(l)).collect();
    if config.virtual_node {
        node_ids.push(vocab.size());
    }
    let mut messages = Vec::with_capacity(2 * mp_graph.num_edges());
    for e in mp_graph.edges() {
        let label = (e.label as usize).min(EDGE_VOCAB - 1);
        messages.push((e.u, e.v, label));
        messages.push((e.v, e.u, label));
    }
    let mp_pe = match config.mp_pe {
        MpPe::None => None,
        MpPe::Lpe => {
            let pe = laplacian_pe(graph, config.pe.dim)?;
            let mut padded = Matrix::zeros(mp_graph.num_nodes(), pe.cols);
            padded.data[..pe.data.len()].copy_from_slice(&pe.data);
            Some(padded)
        }
    };
    let cluster_vocab = ClusterVocab::new(vocab.clone());
    let cluster_codes = decomposition.clusters.iter().map(|c| cluster_vocab.code(&c.kind)).collect();
    let tree_pe = Encodings::compute(&decomposition.tree_topology(), &config.pe)?;
    Ok(Prepared {
        id: id.to_string(),
        num_atoms: n,
        num_nodes: mp_graph.num_nodes(),
        node_ids,
        messages,
        graph_edges: graph.edges().iter().map(|e| (e.u, e.v)).collect(),
        mp_pe,
        assignment: decomposition.assignment_pairs(),
        cluster_codes,
        decomposition,
        tree_pe,
        targets: targets.to_vec(),
    })
}

pub fn prepare_record(record: &DatasetRecord, config: &ModelConfig, vocab: &AtomVocab) -> Result<Prepared, ModelError> {
    prepare(&record.id, &record.graph, &record.targets, config, vocab)
}
