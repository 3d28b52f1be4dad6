use serde::{Deserialize, Serialize};

use crate::spectral::{PeConfig, PeKind, PeMerge};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MpType {
    Gine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// Nonlinearity of the graph/tree coupling terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeActivation {
    LeakyRelu,
    None,
}

/// Positional encoding added to atom features before message passing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MpPe {
    None,
    Lpe,
}

/// Architecture hyperparameters. Field docs name the hyperparameter-table
/// row each key mirrors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Local MP: # Layers
    pub mp_layers: usize,
    /// Local MP: # Hidden Features
    pub mp_hidden: usize,
    /// Local MP: MP Type
    #[serde(default = "default_mp_type")]
    pub mp_type: MpType,
    /// Local MP: Aggregation
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    /// Local MP / Transformer / Readout: Activation
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Local MP: Tree Activation
    #[serde(default = "default_tree_activation")]
    pub tree_activation: TreeActivation,
    /// Local MP: Dropout
    #[serde(default)]
    pub mp_dropout: f64,
    /// Local MP: Edge Dropout
    #[serde(default)]
    pub edge_dropout: f64,
    /// Pos. Enc.: Encoder PE Emb. Dim.
    pub pe_emb_dim: usize,
    /// Pos. Enc.: PE Type, PE Dim., PE Merge
    pub pe: PeConfig,
    /// Pos. Enc.: MP PE
    #[serde(default = "default_mp_pe")]
    pub mp_pe: MpPe,
    /// Transformer: # Hidden Features
    pub transformer_hidden: usize,
    /// Transformer: # FFN Hidden Features
    pub ffn_hidden: usize,
    /// Transformer: # Layers
    pub transformer_layers: usize,
    /// Transformer: # Heads
    pub heads: usize,
    /// Transformer: Dropout
    #[serde(default)]
    pub transformer_dropout: f64,
    /// Transformer: Padding Dim. (optional cap on tree size per molecule)
    #[serde(default)]
    pub padding_dim: Option<usize>,
    /// Readout: # Hidden Features (defaults to the readout input width)
    #[serde(default)]
    pub readout_hidden: Option<usize>,
    /// Concatenate summed atom features with the CLS output before the head.
    #[serde(default = "default_true")]
    pub dual_readout: bool,
    /// Add a virtual node to the message-passing graph.
    #[serde(default)]
    pub virtual_node: bool,
}

fn default_mp_type() -> MpType {
    MpType::Gine
}
fn default_aggregation() -> Aggregation {
    Aggregation::Sum
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn default_tree_activation() -> TreeActivation {
    TreeActivation::LeakyRelu
}
fn default_mp_pe() -> MpPe {
    MpPe::None
}
fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// The ZINC column of the hyperparameter table.
    pub fn zinc() -> Self {
        ModelConfig {
            mp_layers: 2,
            mp_hidden: 64,
            mp_type: MpType::Gine,
            aggregation: Aggregation::Sum,
            activation: Activation::Relu,
            tree_activation: TreeActivation::LeakyRelu,
            mp_dropout: 0.0,
            edge_dropout: 0.0,
            pe_emb_dim: 64,
            pe: PeConfig { kinds: vec![PeKind::Deg, PeKind::Spde], dim: 10, merge: PeMerge::Concat, degree_cap: 8 },
            mp_pe: MpPe::None,
            transformer_hidden: 128,
            ffn_hidden: 128,
            transformer_layers: 3,
            heads: 8,
            transformer_dropout: 0.1,
            padding_dim: Some(40),
            readout_hidden: None,
            dual_readout: true,
            virtual_node: false,
        }
    }

    /// Width of the readout head input.
    pub fn readout_input(&self) -> usize {
        if self.dual_readout {
            self.transformer_hidden + self.mp_hidden
        } else {
            self.transformer_hidden
        }
    }

    pub fn readout_width(&self) -> usize {
        self.readout_hidden.unwrap_or_else(|| self.readout_input())
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("mp_hidden", self.mp_hidden),
            ("pe_emb_dim", self.pe_emb_dim),
            ("pe.dim", self.pe.dim),
            ("pe.degree_cap", self.pe.degree_cap),
            ("transformer_hidden", self.transformer_hidden),
            ("ffn_hidden", self.ffn_hidden),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        if self.transformer_hidden % self.heads != 0 {
            return Err(format!(
                "transformer_hidden {} is not divisible by heads {}",
                self.transformer_hidden, self.heads
            ));
        }
        for (name, p) in [
            ("mp_dropout", self.mp_dropout),
            ("edge_dropout", self.edge_dropout),
            ("transformer_dropout", self.transformer_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(format!("{name} = {p} is outside [0, 1)"));
            }
        }
        if self.readout_hidden == Some(0) || self.padding_dim == Some(0) {
            return Err("readout_hidden and padding_dim must be at least 1 when set".into());
        }
        let mut kinds = self.pe.kinds.clone();
        kinds.sort_by_key(|k| *k as u8);
        kinds.dedup();
        if kinds.len() != self.pe.kinds.len() {
            return Err("pe.kinds lists a kind twice".into());
        }
        Ok(())
    }
}
