//! Plan-node featurization.
//!
//! Raw features are deterministic: a node-type one-hot, a table multi-hot,
//! and one 6-slot vector per catalog column indexed `(⋈, =, >, ≥, <, ≤)`.
//! The learned projection runs the one-hot through a fully connected
//! layer, gives every column its own fully connected layer, max-pools the
//! column embeddings of each table, and concatenates everything into one
//! fixed-width row per node.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::GraphBatch;
use crate::numerics::{Linear, ParamStore, Tape, Tensor, Var};
use crate::plan::{
    binarize, is_reserved_operator, Catalog, ColumnStats, Comparator, FlatTree, Literal, PlanNode,
    PlanTree, Predicate, ValueType,
};

pub const CASES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Width of the learned node-type embedding.
    pub d_type: usize,
    /// Width of every learned column embedding.
    pub d_col: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { d_type: 16, d_col: 8 }
    }
}

/// Deterministic 64-bit FNV-1a hash of the UTF-8 bytes, scaled into `[0, 1]`.
pub fn string_embedding(s: &str) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in s.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h as f64 / 18_446_744_073_709_551_616.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawNodeFeatures {
    pub node_type_onehot: Vec<f64>,
    pub table_multihot: Vec<f64>,
    /// One entry per catalog column in global order.
    pub column_cases: Vec<[f64; CASES]>,
}

pub fn encode_node_type(node: &PlanNode, catalog: &Catalog) -> Result<Vec<f64>> {
    let mut v = vec![0.0; catalog.operators.len()];
    if is_reserved_operator(&node.node_type) {
        return Ok(v);
    }
    let idx = catalog
        .operator_index(&node.node_type)
        .ok_or_else(|| Error::InvalidInput(format!("unknown operator `{}`", node.node_type)))?;
    v[idx] = 1.0;
    Ok(v)
}

pub fn encode_tables(node: &PlanNode, catalog: &Catalog) -> Result<Vec<f64>> {
    let mut v = vec![0.0; catalog.tables.len()];
    for t in &node.tables {
        let idx = catalog
            .table_index(t)
            .ok_or_else(|| Error::InvalidInput(format!("unknown table `{t}`")))?;
        v[idx] = 1.0;
    }
    Ok(v)
}

/// Encoded slot value for a local predicate `column <comparator> value`.
fn local_case(
    column_name: &str,
    stats: &ColumnStats,
    comparator: Comparator,
    value: &Literal,
) -> Result<f64> {
    match (stats.value_type, value) {
        (ValueType::Numeric, Literal::Number(v)) => {
            let (lo, hi) = stats
                .range()
                .ok_or_else(|| Error::InvalidInput(format!("column `{column_name}` has no range")))?;
            let v = *v;
            if v >= lo && v <= hi {
                let span = hi - lo;
                return Ok(if span > 0.0 { (v - lo) / span + 1.0 } else { 1.0 });
            }
            // Out of range: -1 when no tuple can qualify, 2 when every tuple does.
            let below = v < lo;
            let satisfiable_by_all = match comparator {
                Comparator::Eq => false,
                Comparator::Gt | Comparator::Ge => below,
                Comparator::Lt | Comparator::Le => !below,
                Comparator::Join => unreachable!("local predicates never use the join comparator"),
            };
            Ok(if satisfiable_by_all { 2.0 } else { -1.0 })
        }
        (ValueType::String, Literal::Text(s)) => {
            if comparator != Comparator::Eq {
                return Err(Error::InvalidInput(format!(
                    "comparator `{}` on string column `{column_name}`",
                    comparator.symbol()
                )));
            }
            Ok(string_embedding(s) + 1.0)
        }
        (ValueType::Numeric, Literal::Text(_)) => Err(Error::InvalidInput(format!(
            "string literal on numeric column `{column_name}`"
        ))),
        (ValueType::String, Literal::Number(_)) => Err(Error::InvalidInput(format!(
            "numeric literal on string column `{column_name}`"
        ))),
    }
}

/// The 6-slot vector of one column given a node's predicate list. Later
/// predicates on the same `(column, comparator)` overwrite earlier ones.
pub fn encode_predicate_column(
    predicates: &[Predicate],
    column_name: &str,
    stats: &ColumnStats,
) -> Result<[f64; CASES]> {
    let mut cases = [0.0; CASES];
    for p in predicates {
        match p {
            Predicate::Join {
                column,
                other_column,
            } => {
                if column == column_name || other_column == column_name {
                    cases[Comparator::Join.position()] = 1.0;
                }
            }
            Predicate::Local {
                column,
                comparator,
                value,
            } if column == column_name => {
                cases[comparator.position()] = local_case(column_name, stats, *comparator, value)?;
            }
            Predicate::Local { .. } => {}
        }
    }
    Ok(cases)
}

pub fn raw_features(node: &PlanNode, catalog: &Catalog) -> Result<RawNodeFeatures> {
    let mut column_cases = vec![[0.0; CASES]; catalog.num_columns()];
    for p in &node.predicates {
        match p {
            Predicate::Join {
                column,
                other_column,
            } => {
                for name in [column, other_column] {
                    let r = catalog
                        .resolve_column(name)
                        .ok_or_else(|| Error::InvalidInput(format!("unknown column `{name}`")))?;
                    column_cases[r.global][Comparator::Join.position()] = 1.0;
                }
            }
            Predicate::Local {
                column,
                comparator,
                value,
            } => {
                let r = catalog
                    .resolve_column(column)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown column `{column}`")))?;
                column_cases[r.global][comparator.position()] =
                    local_case(column, catalog.column(r), *comparator, value)?;
            }
        }
    }
    Ok(RawNodeFeatures {
        node_type_onehot: encode_node_type(node, catalog)?,
        table_multihot: encode_tables(node, catalog)?,
        column_cases,
    })
}

/// Raw features of many nodes stacked as constant matrices.
#[derive(Clone, Debug)]
pub struct RawMatrices {
    pub rows: usize,
    /// `rows x |operators|`
    pub node_type: Tensor,
    /// `rows x |tables|`
    pub tables: Tensor,
    /// Per catalog column, `rows x 6`.
    pub cases: Vec<Tensor>,
}

impl RawMatrices {
    pub fn from_rows(features: &[RawNodeFeatures], catalog: &Catalog) -> Result<Self> {
        let n = features.len();
        let ops = catalog.operators.len();
        let tables = catalog.tables.len();
        let mut node_type = Vec::with_capacity(n * ops);
        let mut multihot = Vec::with_capacity(n * tables);
        for f in features {
            node_type.extend_from_slice(&f.node_type_onehot);
            multihot.extend_from_slice(&f.table_multihot);
        }
        let cases = (0..catalog.num_columns())
            .map(|c| {
                let data = features.iter().flat_map(|f| f.column_cases[c]).collect();
                Tensor::matrix(n, CASES, data)
            })
            .collect::<Result<_>>()?;
        Ok(RawMatrices {
            rows: n,
            node_type: Tensor::matrix(n, ops, node_type)?,
            tables: Tensor::matrix(n, tables, multihot)?,
            cases,
        })
    }
}

/// A plan featurized up to (but excluding) the learned projection, with
/// rows in post-order. Independent of any tape, so it can be cached.
#[derive(Clone, Debug)]
pub struct PlanGraph {
    pub raw: RawMatrices,
    pub child_to_parent: Vec<(usize, usize)>,
    pub parent_to_child: Vec<(usize, usize)>,
    pub postorder: Vec<usize>,
    /// Padding nodes introduced by binarization.
    pub is_null: Vec<bool>,
}

impl PlanGraph {
    pub fn build(tree: &PlanTree, catalog: &Catalog, binarized: bool) -> Result<Self> {
        let owned;
        let tree = if binarized {
            owned = binarize(tree);
            &owned
        } else {
            tree
        };
        let flat = FlatTree::new(&tree.root);
        let order = flat.postorder();
        let mut row_of = vec![0; flat.len()];
        for (row, &id) in order.iter().enumerate() {
            row_of[id] = row;
        }
        let features = order
            .iter()
            .map(|&id| raw_features(flat.nodes[id], catalog))
            .collect::<Result<Vec<_>>>()?;
        let edges = flat.edge_lists();
        let remap = |e: &[(usize, usize)]| e.iter().map(|&(s, d)| (row_of[s], row_of[d])).collect();
        Ok(PlanGraph {
            raw: RawMatrices::from_rows(&features, catalog)?,
            child_to_parent: remap(&edges.child_to_parent),
            parent_to_child: remap(&edges.parent_to_child),
            postorder: (0..order.len()).collect(),
            is_null: order.iter().map(|&id| flat.nodes[id].is_null()).collect(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.raw.rows
    }
}

/// Learned projection parameters.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub node_type_fc: Linear,
    pub column_fc: Vec<Linear>,
    /// Global column indices grouped by table, in catalog order.
    table_columns: Vec<Vec<usize>>,
    num_tables: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        catalog: &Catalog,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let node_type_fc = Linear::new(
            store,
            "encoder.node_type",
            catalog.operators.len(),
            config.d_type,
            true,
            rng,
        )?;
        let mut column_fc = Vec::with_capacity(catalog.num_columns());
        let mut table_columns = Vec::with_capacity(catalog.tables.len());
        let mut global = 0;
        for t in &catalog.tables {
            let mut ids = Vec::new();
            for c in &t.columns {
                let name = format!("encoder.column.{}.{}", t.name, c.name);
                column_fc.push(Linear::new(store, &name, CASES, config.d_col, true, rng)?);
                ids.push(global);
                global += 1;
            }
            table_columns.push(ids);
        }
        Ok(Encoder {
            config: config.clone(),
            node_type_fc,
            column_fc,
            table_columns,
            num_tables: catalog.tables.len(),
        })
    }

    /// `d_type + |tables| + |tables| * d_col`
    pub fn output_dim(&self) -> usize {
        self.config.d_type + self.num_tables + self.num_tables * self.config.d_col
    }

    /// Projects stacked raw features into an `rows x output_dim` matrix.
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, raw: &RawMatrices) -> Result<Var> {
        if raw.cases.len() != self.column_fc.len()
            || raw.tables.shape()[1] != self.num_tables
            || raw.node_type.shape()[1] != self.node_type_fc.in_dim
        {
            return Err(Error::shape(
                "encoder",
                format!(
                    "raw features ({} ops, {} tables, {} columns) do not match the encoder ({} ops, {} tables, {} columns)",
                    raw.node_type.shape()[1],
                    raw.tables.shape()[1],
                    raw.cases.len(),
                    self.node_type_fc.in_dim,
                    self.num_tables,
                    self.column_fc.len()
                ),
            ));
        }
        let n = raw.rows;
        let d_col = self.config.d_col;
        let onehot = tape.constant(raw.node_type.clone());
        let type_emb = self.node_type_fc.forward(tape, store, onehot)?;
        let type_emb = tape.relu(type_emb)?;
        let multihot = tape.constant(raw.tables.clone());
        let mut parts = vec![type_emb, multihot];
        for cols in &self.table_columns {
            let block = if cols.is_empty() {
                tape.constant(Tensor::zeros(&[n, d_col]))
            } else {
                let mut embeddings = Vec::with_capacity(cols.len());
                for &c in cols {
                    let x = tape.constant(raw.cases[c].clone());
                    let e = self.column_fc[c].forward(tape, store, x)?;
                    embeddings.push(tape.relu(e)?);
                }
                if embeddings.len() == 1 {
                    embeddings[0]
                } else {
                    // Elementwise max across columns: lay each embedding out as
                    // one column of an (n*d_col) x k matrix and reduce rows.
                    let flat = embeddings
                        .into_iter()
                        .map(|e| tape.reshape(e, vec![n * d_col, 1]))
                        .collect::<Result<Vec<_>>>()?;
                    let stacked = tape.concat(&flat, 1)?;
                    let pooled = tape.row_max(stacked)?;
                    tape.reshape(pooled, vec![n, d_col])?
                }
            };
            parts.push(block);
        }
        tape.concat(&parts, 1)
    }

    /// Projection of a single node.
    pub fn project_node(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        raw: &RawNodeFeatures,
        catalog: &Catalog,
    ) -> Result<Var> {
        let m = RawMatrices::from_rows(std::slice::from_ref(raw), catalog)?;
        self.project(tape, store, &m)
    }

    pub fn encode_plan(&self, tape: &mut Tape, store: &ParamStore, graph: &PlanGraph) -> Result<GraphBatch> {
        let features = self.project(tape, store, &graph.raw)?;
        Ok(GraphBatch {
            node_features: features,
            num_nodes: graph.num_nodes(),
            child_to_parent: graph.child_to_parent.clone(),
            parent_to_child: graph.parent_to_child.clone(),
            postorder: graph.postorder.clone(),
            is_null: graph.is_null.clone(),
        })
    }
}
