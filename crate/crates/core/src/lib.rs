//! Junction-tree graph transformer for molecular property prediction, with
//! Weisfeiler-Lehman expressivity tests and over-smoothing / over-squashing
//! diagnostics.

pub mod corpus;
pub mod graph;
pub mod junction_tree;
pub mod smiles;
pub mod spectral;
pub mod autodiff;
pub mod model;
pub mod training;
pub mod diagnostics;
pub mod wl;
pub mod config;
