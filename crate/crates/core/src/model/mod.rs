//! The SubFormer network.
//!
//! Atoms are embedded and refined by GINE message passing; each layer is
//! coupled to the junction tree through the assignment matrix `S`:
//!
//! ```text
//! X'' = GINE(X)
//! X'  = X'' + θ1 · σ(Sᵀ Z W1)
//! Z'  = Z   + θ2 · σ(S X' W2)
//! ```
//!
//! Cluster features become tokens (merged with tree positional encodings),
//! a learnable CLS token is prepended, and a post-norm transformer encoder
//! runs over the padded token sequence. The head reads the CLS output,
//! concatenated with the summed atom features when dual readout is on.

mod config;
mod gcn;
mod prepare;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{init_seed, AutodiffError, BoundParams, ParamData, ParamId, ParamStore, Tape, Tensor};
use crate::corpus::{AtomVocab, TaskType};
use crate::junction_tree::{ClusterVocab, DecompositionError};
use crate::spectral::{PeKind, PeMerge, SpectralError};

pub use config::{Activation, Aggregation, ModelConfig, MpPe, MpType, TreeActivation};
pub use gcn::{gcn_propagation, gcn_stack, identity_weights};
pub use prepare::{atom_table_size, prepare, prepare_record, Prepared, EDGE_VOCAB};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const CLS_INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("decomposition failed: {0}")]
    Decomposition(#[from] DecompositionError),
    #[error("positional encoding failed: {0}")]
    Spectral(#[from] SpectralError),
    #[error("junction tree has {tree_size} clusters, above padding_dim {cap}")]
    PaddingOverflow { tree_size: usize, cap: usize },
    #[error("{0}")]
    Mismatch(String),
    #[error("checkpoint I/O: {0}")]
    Io(String),
}

type Result<T> = std::result::Result<T, ModelError>;

/// Dense layer `x W (+ b)` with `W: [in, out]`.
#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_weight(&format!("{name}.weight"), fan_in, fan_out, rng);
        let b = bias.then(|| store.add_const(&format!("{name}.bias"), &[fan_out], 0.0));
        Linear { w, b }
    }

    fn apply(&self, t: &mut Tape, p: &BoundParams, x: Tensor) -> Result<Tensor> {
        let y = t.matmul(x, p.get(self.w))?;
        Ok(match self.b {
            Some(b) => t.add(y, p.get(b))?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
struct GineLayer {
    eps: ParamId,
    edge_emb: ParamId,
    lin1: Linear,
    lin2: Linear,
}

#[derive(Debug, Clone)]
struct Coupling {
    w1: Linear,
    w2: Linear,
    theta1: ParamId,
    theta2: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: (ParamId, ParamId),
    ff1: Linear,
    ff2: Linear,
    ln2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Layout {
    atom_emb: ParamId,
    mp_pe_proj: Option<Linear>,
    gine: Vec<GineLayer>,
    coupling: Vec<Coupling>,
    cluster_emb: ParamId,
    deg_emb: Option<ParamId>,
    deg_proj: Option<Linear>,
    lpe_proj: Option<Linear>,
    spde_proj: Option<Linear>,
    /// Concat: projects the concatenation; Sum: projects cluster features.
    token_proj: Linear,
    cls: ParamId,
    encoder: Vec<EncoderLayer>,
    head1: Linear,
    head2: Linear,
}

/// Attention weights of one head for one batch item, including padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub item: usize,
    /// Unpadded sequence length (tree size + 1 for CLS).
    pub valid: usize,
    /// `padded x padded` row-stochastic matrix; row and column 0 are CLS.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub training: bool,
    pub seed: u64,
    pub record_attention: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions { training: false, seed: 0, record_attention: false }
    }
}

/// Result of a batched forward pass. Tensors live on the caller's tape.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch, tasks]`
    pub predictions: Tensor,
    /// Atom features after the last coupling block, `[nodes, mp_hidden]`.
    pub x_final: Tensor,
    /// Per-molecule sum of final atom features, `[batch, mp_hidden]`.
    pub x_out: Tensor,
    /// Encoder input and the output of every encoder layer, `[batch, padded, hidden]`.
    pub tokens: Vec<Tensor>,
    /// Final cluster tokens without CLS, `[clusters, hidden]`.
    pub cluster_tokens: Tensor,
    pub padded: usize,
    pub attention: Vec<AttentionRecord>,
    pub node_offsets: Vec<usize>,
    pub cluster_offsets: Vec<usize>,
}

/// Encoder input followed by each layer's output, plus captured attention.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub snapshots: Vec<Tensor>,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub tasks: usize,
    pub task_type: TaskType,
    pub atom_vocab: Vec<u32>,
    pub params: BTreeMap<String, ParamData>,
}

#[derive(Debug, Clone)]
pub struct SubFormer {
    config: ModelConfig,
    tasks: usize,
    task_type: TaskType,
    vocab: AtomVocab,
    pub params: ParamStore,
    layout: Layout,
}

fn layer_norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (store.add_const(&format!("{name}.gain"), &[d], 1.0), store.add_const(&format!("{name}.bias"), &[d], 0.0))
}

struct Indices {
    node_offsets: Vec<usize>,
    cluster_offsets: Vec<usize>,
    nodes: usize,
    clusters: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    edge_labels: Vec<usize>,
    inv_degree: Vec<f64>,
    pair_cluster: Vec<usize>,
    pair_atom: Vec<usize>,
}

impl Indices {
    fn new(items: &[&Prepared]) -> Self {
        let mut ix = Indices {
            node_offsets: Vec::with_capacity(items.len()),
            cluster_offsets: Vec::with_capacity(items.len()),
            nodes: 0,
            clusters: 0,
            src: Vec::new(),
            dst: Vec::new(),
            edge_labels: Vec::new(),
            inv_degree: Vec::new(),
            pair_cluster: Vec::new(),
            pair_atom: Vec::new(),
        };
        for it in items {
            let (no, co) = (ix.nodes, ix.clusters);
            ix.node_offsets.push(no);
            ix.cluster_offsets.push(co);
            let mut deg = vec![0usize; it.num_nodes];
            for &(s, d, l) in &it.messages {
                ix.src.push(no + s);
                ix.dst.push(no + d);
                ix.edge_labels.push(l);
                deg[d] += 1;
            }
            ix.inv_degree.extend(deg.iter().map(|&d| if d > 0 { 1.0 / d as f64 } else { 0.0 }));
            for &(c, a) in &it.assignment {
                ix.pair_cluster.push(co + c);
                ix.pair_atom.push(no + a);
            }
            ix.nodes += it.num_nodes;
            ix.clusters += it.num_clusters();
        }
        ix
    }
}

impl SubFormer {
    pub fn new(config: ModelConfig, tasks: usize, task_type: TaskType, vocab: AtomVocab, seed: u64) -> Result<Self> {
        config.validate().map_err(ModelError::Config)?;
        if tasks == 0 {
            return Err(ModelError::Config("task count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed(seed, "init"));
        let mut s = ParamStore::new();
        let (d, dd, pe_dim, pe_emb) = (config.mp_hidden, config.transformer_hidden, config.pe.dim, config.pe_emb_dim);

        let atom_emb = s.add_weight("atom_embedding", atom_table_size(&vocab), d, &mut rng);
        let mp_pe_proj = (config.mp_pe == MpPe::Lpe).then(|| Linear::new(&mut s, "mp_pe_proj", pe_dim, d, false, &mut rng));
        let mut gine = Vec::new();
        let mut coupling = Vec::new();
        for l in 0..config.mp_layers {
            gine.push(GineLayer {
                eps: s.add_const(&format!("mp.{l}.eps"), &[1], 0.0),
                edge_emb: s.add_weight(&format!("mp.{l}.edge_embedding"), EDGE_VOCAB, d, &mut rng),
                lin1: Linear::new(&mut s, &format!("mp.{l}.mlp1"), d, d, true, &mut rng),
                lin2: Linear::new(&mut s, &format!("mp.{l}.mlp2"), d, d, true, &mut rng),
            });
            coupling.push(Coupling {
                w1: Linear::new(&mut s, &format!("couple.{l}.tree_to_graph"), d, d, false, &mut rng),
                w2: Linear::new(&mut s, &format!("couple.{l}.graph_to_tree"), d, d, false, &mut rng),
                theta1: s.add_const(&format!("couple.{l}.theta1"), &[1], 1.0),
                theta2: s.add_const(&format!("couple.{l}.theta2"), &[1], 1.0),
            });
        }
        let cluster_vocab = ClusterVocab::new(vocab.clone());
        let cluster_emb = s.add_weight("cluster_embedding", cluster_vocab.size(), d, &mut rng);

        let concat = config.pe.merge == PeMerge::Concat;
        let pe_out = if concat { pe_emb } else { dd };
        let deg_emb = config.pe.has(PeKind::Deg).then(|| s.add_weight("pe.degree_embedding", config.pe.degree_cap + 1, pe_emb, &mut rng));
        let deg_proj = (config.pe.has(PeKind::Deg) && !concat).then(|| Linear::new(&mut s, "pe.degree_proj", pe_emb, dd, false, &mut rng));
        let lpe_proj = config.pe.has(PeKind::Lpe).then(|| Linear::new(&mut s, "pe.lpe_proj", pe_dim, pe_out, false, &mut rng));
        let spde_proj = config.pe.has(PeKind::Spde).then(|| Linear::new(&mut s, "pe.spde_proj", pe_dim, pe_out, false, &mut rng));
        let token_in = if concat { d + pe_emb * config.pe.kinds.len() } else { d };
        let token_proj = Linear::new(&mut s, "token_proj", token_in, dd, true, &mut rng);
        let cls = s.add_normal("cls", &[1, dd], CLS_INIT_STD, &mut rng);

        let encoder = (0..config.transformer_layers)
            .map(|l| EncoderLayer {
                q: Linear::new(&mut s, &format!("enc.{l}.query"), dd, dd, true, &mut rng),
                k: Linear::new(&mut s, &format!("enc.{l}.key"), dd, dd, true, &mut rng),
                v: Linear::new(&mut s, &format!("enc.{l}.value"), dd, dd, true, &mut rng),
                o: Linear::new(&mut s, &format!("enc.{l}.out"), dd, dd, true, &mut rng),
                ln1: layer_norm_params(&mut s, &format!("enc.{l}.norm1"), dd),
                ff1: Linear::new(&mut s, &format!("enc.{l}.ffn1"), dd, config.ffn_hidden, true, &mut rng),
                ff2: Linear::new(&mut s, &format!("enc.{l}.ffn2"), config.ffn_hidden, dd, true, &mut rng),
                ln2: layer_norm_params(&mut s, &format!("enc.{l}.norm2"), dd),
            })
            .collect();
        let head1 = Linear::new(&mut s, "head.hidden", config.readout_input(), config.readout_width(), true, &mut rng);
        let head2 = Linear::new(&mut s, "head.out", config.readout_width(), tasks, true, &mut rng);

        let layout = Layout {
            atom_emb,
            mp_pe_proj,
            gine,
            coupling,
            cluster_emb,
            deg_emb,
            deg_proj,
            lpe_proj,
            spde_proj,
            token_proj,
            cls,
            encoder,
            head1,
            head2,
        };
        Ok(SubFormer { config, tasks, task_type, vocab, params: s, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn task_type(&self) -> TaskType {
        self.task_type
    }

    pub fn vocab(&self) -> &AtomVocab {
        &self.vocab
    }

    /// Output-layer bias, one entry per task.
    pub fn head_bias_mut(&mut self) -> &mut [f64] {
        self.params.values_mut(self.layout.head2.b.expect("head has a bias"))
    }

    /// Final head weight matrix, `[readout hidden, tasks]`.
    pub fn head_weight_mut(&mut self) -> &mut [f64] {
        self.params.values_mut(self.layout.head2.w)
    }

    /// Coupling scales `(θ1, θ2)` of MP layer `l`.
    pub fn coupling_scales_mut(&mut self, l: usize) -> (ParamId, ParamId) {
        (self.layout.coupling[l].theta1, self.layout.coupling[l].theta2)
    }

    pub fn prepare(&self, id: &str, graph: &crate::graph::Graph, targets: &[Option<f64>]) -> Result<Prepared> {
        prepare(id, graph, targets, &self.config, &self.vocab)
    }

    /// Embedded atom features `X0`, `[nodes, mp_hidden]`.
    pub fn embed_atoms(&self, t: &mut Tape, p: &BoundParams, items: &[&Prepared]) -> Result<Tensor> {
        let ids: Vec<usize> = items.iter().flat_map(|it| it.node_ids.iter().copied()).collect();
        let mut x = t.embed(p.get(self.layout.atom_emb), &ids)?;
        if let Some(proj) = &self.layout.mp_pe_proj {
            let mut pe = Vec::new();
            for it in items {
                let m = it.mp_pe.as_ref().ok_or_else(|| ModelError::Mismatch("item prepared without MP PE".into()))?;
                pe.extend_from_slice(&m.data);
            }
            let pe = t.constant(pe, &[ids.len(), self.config.pe.dim])?;
            let pe = proj.apply(t, p, pe)?;
            x = t.add(x, pe)?;
        }
        Ok(x)
    }

    fn gine(&self, t: &mut Tape, p: &BoundParams, l: usize, x: Tensor, ix: &Indices, training: bool, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let layer = &self.layout.gine[l];
        let mut e = t.embed(p.get(layer.edge_emb), &ix.edge_labels)?;
        if training {
            e = t.dropout(e, self.config.edge_dropout, rng)?;
        }
        let xj = t.gather_rows(x, &ix.src.iter().map(|&s| Some(s)).collect::<Vec<_>>())?;
        let msg = t.add(xj, e)?;
        let msg = t.relu(msg);
        let mut agg = t.scatter_sum(msg, &ix.dst, ix.nodes)?;
        if self.config.aggregation == Aggregation::Mean {
            let d = self.config.mp_hidden;
            let scale: Vec<f64> = ix.inv_degree.iter().flat_map(|&w| std::iter::repeat(w).take(d)).collect();
            let scale = t.constant(scale, &[ix.nodes, d])?;
            agg = t.mul(agg, scale)?;
        }
        let ex = t.mul(x, p.get(layer.eps))?;
        let h = t.add(x, ex)?;
        let h = t.add(h, agg)?;
        let h = layer.lin1.apply(t, p, h)?;
        let h = t.relu(h);
        layer.lin2.apply(t, p, h)
    }

    fn tree_activation(&self, t: &mut Tape, x: Tensor) -> Tensor {
        match self.config.tree_activation {
            TreeActivation::LeakyRelu => t.leaky_relu(x, LEAKY_SLOPE),
            TreeActivation::None => x,
        }
    }

    fn couple(&self, t: &mut Tape, p: &BoundParams, l: usize, x2: Tensor, z: Tensor, ix: &Indices) -> Result<(Tensor, Tensor)> {
        let c = &self.layout.coupling[l];
        let zw = c.w1.apply(t, p, z)?;
        let per_pair = t.gather_rows(zw, &ix.pair_cluster.iter().map(|&i| Some(i)).collect::<Vec<_>>())?;
        let to_atoms = t.scatter_sum(per_pair, &ix.pair_atom, ix.nodes)?;
        let to_atoms = self.tree_activation(t, to_atoms);
        let to_atoms = t.mul(to_atoms, p.get(c.theta1))?;
        let x = t.add(x2, to_atoms)?;
        let per_pair = t.gather_rows(x, &ix.pair_atom.iter().map(|&i| Some(i)).collect::<Vec<_>>())?;
        let pooled = t.scatter_sum(per_pair, &ix.pair_cluster, ix.clusters)?;
        let pooled = c.w2.apply(t, p, pooled)?;
        let pooled = self.tree_activation(t, pooled);
        let pooled = t.mul(pooled, p.get(c.theta2))?;
        let z = t.add(z, pooled)?;
        Ok((x, z))
    }

    fn tokenize(&self, t: &mut Tape, p: &BoundParams, z: Tensor, items: &[&Prepared], clusters: usize) -> Result<Tensor> {
        let cfg = &self.config;
        let k = cfg.pe.dim;
        let mut parts = vec![];
        if let Some(table) = self.layout.deg_emb {
            let ids: Vec<usize> = items
                .iter()
                .flat_map(|it| it.tree_pe.degree.as_ref().expect("degree encoding prepared").iter().copied())
                .collect();
            let e = t.embed(p.get(table), &ids)?;
            parts.push(match &self.layout.deg_proj {
                Some(proj) => proj.apply(t, p, e)?,
                None => e,
            });
        }
        for (proj, get) in [
            (&self.layout.lpe_proj, (|it: &Prepared| it.tree_pe.lpe.as_ref()) as fn(&Prepared) -> Option<&crate::spectral::Matrix>),
            (&self.layout.spde_proj, |it: &Prepared| it.tree_pe.spde.as_ref()),
        ] {
            if let Some(proj) = proj {
                let mut data = Vec::with_capacity(clusters * k);
                for it in items {
                    let m = get(it).ok_or_else(|| ModelError::Mismatch("tree encoding missing".into()))?;
                    data.extend_from_slice(&m.data);
                }
                let pe = t.constant(data, &[clusters, k])?;
                parts.push(proj.apply(t, p, pe)?);
            }
        }
        match cfg.pe.merge {
            PeMerge::Concat => {
                let mut all = vec![z];
                all.extend(parts);
                let cat = t.concat(&all)?;
                self.layout.token_proj.apply(t, p, cat)
            }
            PeMerge::Sum => {
                let mut tok = self.layout.token_proj.apply(t, p, z)?;
                for part in parts {
                    tok = t.add(tok, part)?;
                }
                Ok(tok)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn encoder_layer(
        &self,
        t: &mut Tape,
        p: &BoundParams,
        l: usize,
        h: Tensor,
        mask: &[bool],
        dims: (usize, usize),
        opts: &ForwardOptions,
        rng: &mut ChaCha8Rng,
        records: &mut Vec<AttentionRecord>,
        valid: &[usize],
    ) -> Result<Tensor> {
        let (batch, padded) = dims;
        let layer = &self.layout.encoder[l];
        let heads = self.config.heads;
        let k = self.config.transformer_hidden / heads;
        let p_drop = if opts.training { self.config.transformer_dropout } else { 0.0 };
        let q = layer.q.apply(t, p, h)?;
        let key = layer.k.apply(t, p, h)?;
        let v = layer.v.apply(t, p, h)?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = t.slice_last(q, hd * k, k)?;
            let kh = t.slice_last(key, hd * k, k)?;
            let vh = t.slice_last(v, hd * k, k)?;
            let kt = t.transpose(kh)?;
            let scores = t.matmul(qh, kt)?;
            let scores = t.scale(scores, 1.0 / (k as f64).sqrt());
            let attn = t.masked_softmax(scores, mask)?;
            if opts.record_attention {
                let w = t.value(attn);
                for b in 0..batch {
                    let weights = (0..padded)
                        .map(|i| w[(b * padded + i) * padded..(b * padded + i + 1) * padded].to_vec())
                        .collect();
                    records.push(AttentionRecord { layer: l, head: hd, item: b, valid: valid[b], weights });
                }
            }
            let attn = t.dropout(attn, p_drop, rng)?;
            outs.push(t.matmul(attn, vh)?);
        }
        let o = t.concat(&outs)?;
        let o = layer.o.apply(t, p, o)?;
        let h1 = t.add(h, o)?;
        let h1 = t.layer_norm(h1, p.get(layer.ln1.0), p.get(layer.ln1.1))?;
        let f = layer.ff1.apply(t, p, h1)?;
        let f = t.relu(f);
        let f = layer.ff2.apply(t, p, f)?;
        let f = t.dropout(f, p_drop, rng)?;
        let h2 = t.add(h1, f)?;
        Ok(t.layer_norm(h2, p.get(layer.ln2.0), p.get(layer.ln2.1))?)
    }

    /// Runs the encoder over `[batch, padded, hidden]` tokens whose first
    /// `valid[b]` positions are real; later keys are masked out.
    pub fn transformer_encoder(
        &self,
        t: &mut Tape,
        p: &BoundParams,
        tokens: Tensor,
        valid: &[usize],
        opts: &ForwardOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<EncoderOutput> {
        let shape = t.shape(tokens).to_vec();
        if shape.len() != 3 || shape[0] != valid.len() || shape[2] != self.config.transformer_hidden {
            return Err(ModelError::Mismatch(format!("encoder input shape {shape:?} for {} items", valid.len())));
        }
        let (batch, padded) = (shape[0], shape[1]);
        if let Some(&v) = valid.iter().find(|&&v| v == 0 || v > padded) {
            return Err(ModelError::Mismatch(format!("valid length {v} outside 1..={padded}")));
        }
        let mut mask = Vec::with_capacity(batch * padded * padded);
        for &v in valid {
            for _ in 0..padded {
                mask.extend((0..padded).map(|j| j < v));
            }
        }
        let mut h = tokens;
        let mut snapshots = vec![h];
        let mut attention = Vec::new();
        for l in 0..self.config.transformer_layers {
            h = self.encoder_layer(t, p, l, h, &mask, (batch, padded), opts, rng, &mut attention, valid)?;
            snapshots.push(h);
        }
        Ok(EncoderOutput { snapshots, attention })
    }

    /// Batched forward pass. `x0` replaces the atom embedding (used by the
    /// Jacobian probe).
    pub fn forward(
        &self,
        t: &mut Tape,
        p: &BoundParams,
        items: &[&Prepared],
        x0: Option<Tensor>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        if items.is_empty() {
            return Err(ModelError::Mismatch("empty batch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let ix = Indices::new(items);
        let batch = items.len();
        let dd = self.config.transformer_hidden;

        let mut x = match x0 {
            Some(x) => x,
            None => self.embed_atoms(t, p, items)?,
        };
        let codes: Vec<usize> = items.iter().flat_map(|it| it.cluster_codes.iter().copied()).collect();
        let mut z = t.embed(p.get(self.layout.cluster_emb), &codes)?;
        for l in 0..self.config.mp_layers {
            let mut x2 = self.gine(t, p, l, x, &ix, opts.training, &mut rng)?;
            if opts.training {
                x2 = t.dropout(x2, self.config.mp_dropout, &mut rng)?;
            }
            (x, z) = self.couple(t, p, l, x2, z, &ix)?;
        }

        let mut atom_rows = Vec::with_capacity(ix.nodes);
        let mut atom_mol = Vec::with_capacity(ix.nodes);
        for (b, it) in items.iter().enumerate() {
            for a in 0..it.num_atoms {
                atom_rows.push(Some(ix.node_offsets[b] + a));
                atom_mol.push(b);
            }
        }
        let atoms = t.gather_rows(x, &atom_rows)?;
        let x_out = t.scatter_sum(atoms, &atom_mol, batch)?;

        let tokens = self.tokenize(t, p, z, items, ix.clusters)?;
        let valid: Vec<usize> = items.iter().map(|it| it.num_clusters() + 1).collect();
        let padded = *valid.iter().max().expect("nonempty batch");
        let mut tok_index = vec![None; batch * padded];
        let mut cls_index = vec![None; batch * padded];
        let mut cluster_rows = Vec::with_capacity(ix.clusters);
        for (b, it) in items.iter().enumerate() {
            cls_index[b * padded] = Some(0);
            for c in 0..it.num_clusters() {
                tok_index[b * padded + 1 + c] = Some(ix.cluster_offsets[b] + c);
                cluster_rows.push(Some(b * padded + 1 + c));
            }
        }
        let seq = t.gather_rows(tokens, &tok_index)?;
        let cls = t.gather_rows(p.get(self.layout.cls), &cls_index)?;
        let seq = t.add(seq, cls)?;
        let h = t.reshape(seq, &[batch, padded, dd])?;
        let enc = self.transformer_encoder(t, p, h, &valid, &opts, &mut rng)?;
        let h = *enc.snapshots.last().expect("input snapshot");
        let flat = t.reshape(h, &[batch * padded, dd])?;
        let cls_out = t.gather_rows(flat, &(0..batch).map(|b| Some(b * padded)).collect::<Vec<_>>())?;
        let cluster_tokens = t.gather_rows(flat, &cluster_rows)?;
        let readout = if self.config.dual_readout { t.concat(&[cls_out, x_out])? } else { cls_out };
        let hidden = self.layout.head1.apply(t, p, readout)?;
        let hidden = t.relu(hidden);
        let predictions = self.layout.head2.apply(t, p, hidden)?;
        Ok(ForwardOutput {
            predictions,
            x_final: x,
            x_out,
            tokens: enc.snapshots,
            cluster_tokens,
            padded,
            attention: enc.attention,
            node_offsets: ix.node_offsets,
            cluster_offsets: ix.cluster_offsets,
        })
    }

    /// Final cluster tokens mapped back to atoms through `Sᵀ`, `[atoms, hidden]`
    /// for a single item: the over-squashing probe output.
    pub fn tokens_to_atoms(&self, t: &mut Tape, out: &ForwardOutput, item: &Prepared) -> Result<Tensor> {
        let rows: Vec<Option<usize>> = item.assignment.iter().map(|&(c, _)| Some(c)).collect();
        let atoms: Vec<usize> = item.assignment.iter().map(|&(_, a)| a).collect();
        let per_pair = t.gather_rows(out.cluster_tokens, &rows)?;
        Ok(t.scatter_sum(per_pair, &atoms, item.num_atoms)?)
    }

    /// The first `k` GINE layers alone, without coupling or attention.
    pub fn mp_stack(&self, t: &mut Tape, p: &BoundParams, item: &Prepared, x0: Tensor, k: usize) -> Result<Tensor> {
        if k > self.config.mp_layers {
            return Err(ModelError::Mismatch(format!("model has {} MP layers, asked for {k}", self.config.mp_layers)));
        }
        let ix = Indices::new(&[item]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x = x0;
        for l in 0..k {
            x = self.gine(t, p, l, x, &ix, false, &mut rng)?;
        }
        Ok(x)
    }

    /// One GINE layer over a single item, for layer-level tests.
    pub fn gine_layer(&self, t: &mut Tape, p: &BoundParams, l: usize, item: &Prepared, x: Tensor) -> Result<Tensor> {
        let ix = Indices::new(&[item]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.gine(t, p, l, x, &ix, false, &mut rng)
    }

    /// One coupling block over a single item: `(X', Z')` from `X''` and `Z`.
    pub fn coupling_block(&self, t: &mut Tape, p: &BoundParams, l: usize, item: &Prepared, x2: Tensor, z: Tensor) -> Result<(Tensor, Tensor)> {
        let ix = Indices::new(&[item]);
        self.couple(t, p, l, x2, z, &ix)
    }

    /// Embedded cluster types `Z0` for one item.
    pub fn embed_clusters(&self, t: &mut Tape, p: &BoundParams, item: &Prepared) -> Result<Tensor> {
        Ok(t.embed(p.get(self.layout.cluster_emb), &item.cluster_codes)?)
    }

    /// Eval-mode predictions, one row per item.
    pub fn predict(&self, items: &[&Prepared]) -> Result<Vec<Vec<f64>>> {
        let mut t = Tape::new();
        let p = self.params.bind_frozen(&mut t);
        let out = self.forward(&mut t, &p, items, None, ForwardOptions::eval())?;
        Ok(t.value(out.predictions).chunks(self.tasks).map(<[f64]>::to_vec).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tasks: self.tasks,
            task_type: self.task_type,
            atom_vocab: self.vocab.labels().to_vec(),
            params: self.params.to_map(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Mismatch(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let vocab = AtomVocab::from_labels(ck.atom_vocab.clone());
        let mut model = SubFormer::new(ck.config.clone(), ck.tasks, ck.task_type, vocab, 0)?;
        model.params.load_map(&ck.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint()).map_err(|e| ModelError::Io(e.to_string()))?;
        std::fs::write(path.as_ref(), text).map_err(|e| ModelError::Io(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ModelError::Io(format!("{}: {e}", path.as_ref().display())))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| ModelError::Io(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }
}
