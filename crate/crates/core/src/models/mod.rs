//! Tree models mapping an encoded plan to a graph-level embedding.
//!
//! The bidirectional model stacks layers that run one attention convolution
//! along child→parent edges and an independent one along parent→child
//! edges, blends them with a learnable scalar, and reads the final node
//! states out with a GRU in post-order. The remaining kinds are the
//! sequence and tree baselines and the single-direction, undirected and
//! sum-pooling ablations.

mod conv;
mod recurrent;
mod tree;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub use conv::{mix, BiLayer, BiLayerOutput, TransformerConv};
pub use recurrent::{AttentiveLstm, Gate, GruCell, LstmCell};
pub use tree::{max_pool_rows, ChildSumTreeLstm, TreeConvLayer};

/// Encoded plan on a tape: node feature rows plus structure, all as row indices.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub node_features: Var,
    pub num_nodes: usize,
    pub child_to_parent: Vec<(usize, usize)>,
    pub parent_to_child: Vec<(usize, usize)>,
    /// Rows in post-order (children before parents, root last).
    pub postorder: Vec<usize>,
    /// Binarization padding rows; only tree convolution inspects these.
    pub is_null: Vec<bool>,
}

impl GraphBatch {
    /// Children of every row, in edge-list order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut kids = vec![Vec::new(); self.num_nodes];
        for &(c, p) in &self.child_to_parent {
            kids[p].push(c);
        }
        kids
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes;
        if self.postorder.len() != n {
            return Err(Error::InvalidInput(format!(
                "post-order lists {} of {n} nodes",
                self.postorder.len()
            )));
        }
        let mut pos = vec![usize::MAX; n];
        for (i, &r) in self.postorder.iter().enumerate() {
            if r >= n || pos[r] != usize::MAX {
                return Err(Error::InvalidInput("post-order is not a permutation".into()));
            }
            pos[r] = i;
        }
        for &(c, p) in &self.child_to_parent {
            if c >= n || p >= n || pos[c] >= pos[p] {
                return Err(Error::InvalidInput(format!("edge ({c}, {p}) violates post-order")));
            }
        }
        let reversed: Vec<_> = self.child_to_parent.iter().map(|&(c, p)| (p, c)).collect();
        if reversed != self.parent_to_child {
            return Err(Error::InvalidInput("edge lists are not mutual reverses".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bigg,
    GnnAddpoolSingle,
    GnnGruSingle,
    GnnGruUndirected,
    BiggAddpool,
    Lstm,
    Gru,
    LstmAttention,
    TreeLstm,
    TreeCnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 10] = [
        ModelKind::Bigg,
        ModelKind::GnnAddpoolSingle,
        ModelKind::GnnGruSingle,
        ModelKind::GnnGruUndirected,
        ModelKind::BiggAddpool,
        ModelKind::Lstm,
        ModelKind::Gru,
        ModelKind::LstmAttention,
        ModelKind::TreeLstm,
        ModelKind::TreeCnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Bigg => "bigg",
            ModelKind::GnnAddpoolSingle => "gnn_addpool_single",
            ModelKind::GnnGruSingle => "gnn_gru_single",
            ModelKind::GnnGruUndirected => "gnn_gru_undirected",
            ModelKind::BiggAddpool => "bigg_addpool",
            ModelKind::Lstm => "lstm",
            ModelKind::Gru => "gru",
            ModelKind::LstmAttention => "lstm_attention",
            ModelKind::TreeLstm => "tree_lstm",
            ModelKind::TreeCnn => "tree_cnn",
        }
    }

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Bigg => "Bidirectional GNN + GRU",
            ModelKind::GnnAddpoolSingle => "GNN + AddPool",
            ModelKind::GnnGruSingle => "GNN + GRU",
            ModelKind::GnnGruUndirected => "GNN + GRU",
            ModelKind::BiggAddpool => "Bidirectional GNN + AddPool",
            ModelKind::Lstm => "LSTM",
            ModelKind::Gru => "GRU",
            ModelKind::LstmAttention => "LSTM + Self-Attention",
            ModelKind::TreeLstm => "Tree-LSTM",
            ModelKind::TreeCnn => "TCNN",
        }
    }

    pub fn edge_direction(self) -> &'static str {
        match self {
            ModelKind::Bigg | ModelKind::BiggAddpool => "Weighted directed",
            ModelKind::GnnAddpoolSingle | ModelKind::GnnGruSingle => "Single directed",
            ModelKind::GnnGruUndirected => "Undirected",
            _ => "-",
        }
    }

    /// Tree convolution needs binarized plans.
    pub fn needs_binary_tree(self) -> bool {
        self == ModelKind::TreeCnn
    }

    fn uses_addpool(self) -> bool {
        matches!(self, ModelKind::GnnAddpoolSingle | ModelKind::BiggAddpool)
    }

    pub fn valid_kinds() -> String {
        ModelKind::ALL.map(ModelKind::as_str).join(", ")
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownModelKind {
                given: s.to_string(),
                valid: ModelKind::valid_kinds(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Stacked graph layers (tree convolutions for `tree_cnn`).
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            layers: 3,
            hidden: 128,
            heads: 1,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 {
            return Err(Error::InvalidInput("hidden width and heads must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidInput(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.layers == 0 && (self.kind.uses_addpool() || self.kind == ModelKind::TreeCnn) {
            return Err(Error::InvalidInput(format!("{} needs at least one layer", self.kind)));
        }
        Ok(())
    }
}

/// Dropout state for a training-mode forward pass.
pub struct Mode<'a> {
    dropout: Option<(f64, &'a mut dyn RngCore)>,
}

impl<'a> Mode<'a> {
    pub fn eval() -> Self {
        Mode { dropout: None }
    }

    pub fn train(rate: f64, rng: &'a mut dyn RngCore) -> Self {
        Mode {
            dropout: (rate > 0.0).then_some((rate, rng)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &mut self.dropout {
            Some((rate, rng)) => tape.dropout(x, *rate, &mut **rng),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
enum GraphLayer {
    Bidirectional(BiLayer),
    ChildToParent(TransformerConv),
    Undirected(TransformerConv),
}

#[derive(Clone, Debug)]
enum Readout {
    Gru(GruCell),
    AddPool,
}

#[derive(Clone, Debug)]
enum Body {
    Graph {
        layers: Vec<GraphLayer>,
        readout: Readout,
    },
    Lstm(LstmCell),
    Gru(GruCell),
    LstmAttention(AttentiveLstm),
    TreeLstm(ChildSumTreeLstm),
    TreeCnn(Vec<TreeConvLayer>),
}

/// A tree model of any kind with its parameters registered in a store.
#[derive(Clone, Debug)]
pub struct TreeModel {
    pub config: ModelConfig,
    pub input_dim: usize,
    body: Body,
}

impl TreeModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &ModelConfig,
        input_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let layer_dims = |l: usize| if l == 0 { input_dim } else { h };
        let body = match config.kind {
            ModelKind::Bigg
            | ModelKind::BiggAddpool
            | ModelKind::GnnAddpoolSingle
            | ModelKind::GnnGruSingle
            | ModelKind::GnnGruUndirected => {
                let mut layers = Vec::with_capacity(config.layers);
                for l in 0..config.layers {
                    let name = format!("tree.layer{l}");
                    let d_in = layer_dims(l);
                    layers.push(match config.kind {
                        ModelKind::Bigg | ModelKind::BiggAddpool => GraphLayer::Bidirectional(
                            BiLayer::new(store, &name, d_in, h, config.heads, rng)?,
                        ),
                        ModelKind::GnnGruUndirected => GraphLayer::Undirected(TransformerConv::new(
                            store,
                            &format!("{name}.conv"),
                            d_in,
                            h,
                            config.heads,
                            rng,
                        )?),
                        _ => GraphLayer::ChildToParent(TransformerConv::new(
                            store,
                            &format!("{name}.c2p"),
                            d_in,
                            h,
                            config.heads,
                            rng,
                        )?),
                    });
                }
                let readout = if config.kind.uses_addpool() {
                    Readout::AddPool
                } else {
                    Readout::Gru(GruCell::new(
                        store,
                        "tree.readout",
                        layer_dims(config.layers),
                        h,
                        rng,
                    )?)
                };
                Body::Graph { layers, readout }
            }
            ModelKind::Lstm => Body::Lstm(LstmCell::new(store, "tree.lstm", input_dim, h, rng)?),
            ModelKind::Gru => Body::Gru(GruCell::new(store, "tree.gru", input_dim, h, rng)?),
            ModelKind::LstmAttention => {
                Body::LstmAttention(AttentiveLstm::new(store, "tree", input_dim, h, rng)?)
            }
            ModelKind::TreeLstm => {
                Body::TreeLstm(ChildSumTreeLstm::new(store, "tree.treelstm", input_dim, h, rng)?)
            }
            ModelKind::TreeCnn => Body::TreeCnn(
                (0..config.layers)
                    .map(|l| TreeConvLayer::new(store, &format!("tree.tcnn{l}"), layer_dims(l), h, rng))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(TreeModel {
            config: config.clone(),
            input_dim,
            body,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Width of the produced embedding.
    pub fn output_dim(&self) -> usize {
        self.config.hidden
    }

    /// Bidirectional layers (empty for other kinds).
    pub fn bi_layers(&self) -> Vec<&BiLayer> {
        match &self.body {
            Body::Graph { layers, .. } => layers
                .iter()
                .filter_map(|l| match l {
                    GraphLayer::Bidirectional(b) => Some(b),
                    _ => None,
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn readout_gru(&self) -> Option<&GruCell> {
        match &self.body {
            Body::Graph {
                readout: Readout::Gru(g),
                ..
            } => Some(g),
            Body::Gru(g) => Some(g),
            _ => None,
        }
    }

    /// Node states after the stacked graph layers (each followed by ReLU
    /// and, when training, dropout). Identity for non-graph kinds.
    pub fn node_states(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &GraphBatch,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let Body::Graph { layers, .. } = &self.body else {
            return Ok(graph.node_features);
        };
        let mut x = graph.node_features;
        let undirected: Vec<(usize, usize)>;
        let both = if layers.iter().any(|l| matches!(l, GraphLayer::Undirected(_))) {
            undirected = graph
                .child_to_parent
                .iter()
                .chain(&graph.parent_to_child)
                .copied()
                .collect();
            &undirected[..]
        } else {
            &[][..]
        };
        for layer in layers {
            x = match layer {
                GraphLayer::Bidirectional(b) => {
                    b.forward(tape, store, x, &graph.child_to_parent, &graph.parent_to_child)?
                        .mixed
                }
                GraphLayer::ChildToParent(c) => c.forward(tape, store, x, &graph.child_to_parent)?,
                GraphLayer::Undirected(c) => c.forward(tape, store, x, both)?,
            };
            x = tape.relu(x)?;
            x = mode.dropout(tape, x)?;
        }
        Ok(x)
    }

    /// Graph-level embedding (`1 x hidden`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &GraphBatch,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if graph.num_nodes == 0 {
            return Err(Error::InvalidInput("empty plan".into()));
        }
        match &self.body {
            Body::Graph { readout, .. } => {
                let x = self.node_states(tape, store, graph, mode)?;
                match readout {
                    Readout::Gru(gru) => gru_aggregate(tape, store, gru, x, &graph.postorder),
                    Readout::AddPool => addpool_aggregate(tape, x),
                }
            }
            Body::Gru(gru) => gru_aggregate(tape, store, gru, graph.node_features, &graph.postorder),
            Body::Lstm(lstm) => {
                let seq = tape.gather_rows(graph.node_features, graph.postorder.clone())?;
                lstm.last(tape, store, seq)
            }
            Body::LstmAttention(att) => {
                let seq = tape.gather_rows(graph.node_features, graph.postorder.clone())?;
                Ok(att.forward(tape, store, seq)?.0)
            }
            Body::TreeLstm(cell) => cell.forward(
                tape,
                store,
                graph.node_features,
                &graph.children(),
                &graph.postorder,
            ),
            Body::TreeCnn(layers) => tree_cnn_forward(tape, store, layers, graph, mode),
        }
    }
}

/// GRU over node rows taken in post-order; returns the last hidden state.
pub fn gru_aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    gru: &GruCell,
    nodes: Var,
    postorder: &[usize],
) -> Result<Var> {
    if postorder.is_empty() {
        return Err(Error::InvalidInput("GRU aggregation over an empty sequence".into()));
    }
    let seq = tape.gather_rows(nodes, postorder.to_vec())?;
    gru.last(tape, store, seq)
}

/// Elementwise sum over node rows.
pub fn addpool_aggregate(tape: &mut Tape, nodes: Var) -> Result<Var> {
    let n = tape.value(nodes).shape()[0];
    let ones = tape.constant(Tensor::filled(&[1, n], 1.0));
    tape.matmul(ones, nodes)
}

fn tree_cnn_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layers: &[TreeConvLayer],
    graph: &GraphBatch,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let children = graph.children();
    let active: Vec<usize> = (0..graph.num_nodes).filter(|&r| !graph.is_null[r]).collect();
    let mut slot = vec![usize::MAX; graph.num_nodes];
    for (i, &r) in active.iter().enumerate() {
        slot[r] = i;
    }
    let m = active.len();
    if m == 0 {
        return Err(Error::InvalidInput("plan has only padding nodes".into()));
    }
    let child_slot = |r: Option<&usize>| match r {
        Some(&c) if !graph.is_null[c] => slot[c],
        _ => m,
    };
    let mut left = Vec::with_capacity(m);
    let mut right = Vec::with_capacity(m);
    for &r in &active {
        let kids = &children[r];
        if kids.len() > 2 {
            return Err(Error::InvalidInput(format!(
                "tree convolution needs a binarized plan (node with {} children)",
                kids.len()
            )));
        }
        left.push(child_slot(kids.first()));
        right.push(child_slot(kids.get(1)));
    }
    let mut x = tape.gather_rows(graph.node_features, active)?;
    for layer in layers {
        x = layer.forward(tape, store, x, &left, &right)?;
        x = mode.dropout(tape, x)?;
    }
    max_pool_rows(tape, x)
}

#[cfg(test)]
mod tests;
