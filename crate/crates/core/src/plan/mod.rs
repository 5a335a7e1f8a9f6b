//! Physical query plans: tree model, JSON ingestion and validation,
//! traversals, and binarization.

mod catalog;
mod traverse;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use catalog::{Catalog, ColumnRef, ColumnStats, TableStats, ValueType};
pub use traverse::{binarize, edge_lists, postorder, EdgeLists, FlatTree};

/// Padding child introduced by binarization.
pub const NULL_NODE: &str = "⊥";
/// Internal node introduced when splitting nodes with more than two children.
pub const PASS_THROUGH: &str = "PassThrough";

pub fn is_reserved_operator(name: &str) -> bool {
    name == NULL_NODE || name == PASS_THROUGH
}

/// Predicate comparators in encoding order `(⋈, =, >, ≥, <, ≤)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Comparator {
    Join,
    Eq,
    Gt,
    Ge,
    Lt,
    Le,
}

impl Comparator {
    pub const ALL: [Comparator; 6] = [
        Comparator::Join,
        Comparator::Eq,
        Comparator::Gt,
        Comparator::Ge,
        Comparator::Lt,
        Comparator::Le,
    ];

    pub fn position(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Join => "join",
            Comparator::Eq => "=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
            Comparator::Lt => "<",
            Comparator::Le => "<=",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Comparator::ALL.into_iter().find(|c| c.symbol() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Number(f64),
    Text(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predicate {
    /// `column ⋈ other_column`
    Join { column: String, other_column: String },
    /// `column <op> value`; `op` is never `Join`.
    Local {
        column: String,
        comparator: Comparator,
        value: Literal,
    },
}

impl Predicate {
    pub fn comparator(&self) -> Comparator {
        match self {
            Predicate::Join { .. } => Comparator::Join,
            Predicate::Local { comparator, .. } => *comparator,
        }
    }

    pub fn is_join(&self) -> bool {
        matches!(self, Predicate::Join { .. })
    }

    /// Columns this predicate mentions.
    pub fn columns(&self) -> Vec<&str> {
        match self {
            Predicate::Join {
                column,
                other_column,
            } => vec![column, other_column],
            Predicate::Local { column, .. } => vec![column],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanNode {
    pub node_type: String,
    pub tables: Vec<String>,
    pub predicates: Vec<Predicate>,
    pub children: Vec<PlanNode>,
}

impl PlanNode {
    pub fn new(node_type: impl Into<String>) -> Self {
        PlanNode {
            node_type: node_type.into(),
            tables: Vec::new(),
            predicates: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn with_tables(mut self, tables: &[&str]) -> Self {
        self.tables = tables.iter().map(|t| t.to_string()).collect();
        self
    }

    pub fn with_predicates(mut self, predicates: Vec<Predicate>) -> Self {
        self.predicates = predicates;
        self
    }

    pub fn with_children(mut self, children: Vec<PlanNode>) -> Self {
        self.children = children;
        self
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(PlanNode::node_count).sum::<usize>()
    }

    pub fn is_null(&self) -> bool {
        self.node_type == NULL_NODE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanTree {
    pub query_id: String,
    pub plan_id: String,
    pub latency_ms: Option<f64>,
    pub root: PlanNode,
}

impl PlanTree {
    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }
}

// ---- JSON wire format ----

#[derive(Serialize, Deserialize)]
struct PlanFile {
    query_id: String,
    plan_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latency_ms: Option<f64>,
    plan: NodeJson,
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    node_type: String,
    #[serde(default)]
    tables: Vec<String>,
    #[serde(default)]
    predicates: Vec<PredicateJson>,
    #[serde(default)]
    children: Vec<NodeJson>,
}

#[derive(Serialize, Deserialize)]
struct PredicateJson {
    kind: String,
    column: String,
    op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    other_column: Option<String>,
}

fn predicate_from_json(p: PredicateJson, path: &str) -> Result<Predicate> {
    match p.kind.as_str() {
        "join" => {
            if p.op != "join" {
                return Err(Error::validation(path, format!("join predicate with op `{}`", p.op)));
            }
            if p.value.is_some() {
                return Err(Error::validation(path, "join predicate must not carry a value"));
            }
            let other_column = p
                .other_column
                .ok_or_else(|| Error::validation(path, "join predicate needs other_column"))?;
            Ok(Predicate::Join {
                column: p.column,
                other_column,
            })
        }
        "local" => {
            let comparator = match Comparator::parse(&p.op) {
                Some(Comparator::Join) | None => {
                    return Err(Error::validation(path, format!("bad local comparator `{}`", p.op)))
                }
                Some(c) => c,
            };
            if p.other_column.is_some() {
                return Err(Error::validation(path, "local predicate must not carry other_column"));
            }
            let value = match p.value {
                Some(Value::Number(n)) => Literal::Number(
                    n.as_f64()
                        .ok_or_else(|| Error::validation(path, "unrepresentable number"))?,
                ),
                Some(Value::String(s)) => Literal::Text(s),
                Some(_) => return Err(Error::validation(path, "value must be a number or string")),
                None => return Err(Error::validation(path, "local predicate needs a value")),
            };
            Ok(Predicate::Local {
                column: p.column,
                comparator,
                value,
            })
        }
        other => Err(Error::validation(path, format!("unknown predicate kind `{other}`"))),
    }
}

fn predicate_to_json(p: &Predicate) -> PredicateJson {
    match p {
        Predicate::Join {
            column,
            other_column,
        } => PredicateJson {
            kind: "join".into(),
            column: column.clone(),
            op: "join".into(),
            value: None,
            other_column: Some(other_column.clone()),
        },
        Predicate::Local {
            column,
            comparator,
            value,
        } => PredicateJson {
            kind: "local".into(),
            column: column.clone(),
            op: comparator.symbol().into(),
            value: Some(match value {
                Literal::Number(x) => serde_json::Number::from_f64(*x)
                    .map(Value::Number)
                    .unwrap_or(Value::Null),
                Literal::Text(s) => Value::String(s.clone()),
            }),
            other_column: None,
        },
    }
}

fn node_from_json(n: NodeJson, path: &str) -> Result<PlanNode> {
    let predicates = n
        .predicates
        .into_iter()
        .enumerate()
        .map(|(i, p)| predicate_from_json(p, &format!("{path}.predicates[{i}]")))
        .collect::<Result<_>>()?;
    let children = n
        .children
        .into_iter()
        .enumerate()
        .map(|(i, c)| node_from_json(c, &format!("{path}.children[{i}]")))
        .collect::<Result<_>>()?;
    Ok(PlanNode {
        node_type: n.node_type,
        tables: n.tables,
        predicates,
        children,
    })
}

fn node_to_json(n: &PlanNode) -> NodeJson {
    NodeJson {
        node_type: n.node_type.clone(),
        tables: n.tables.clone(),
        predicates: n.predicates.iter().map(predicate_to_json).collect(),
        children: n.children.iter().map(node_to_json).collect(),
    }
}

fn validate_node(node: &PlanNode, catalog: &Catalog, path: &str) -> Result<()> {
    if !is_reserved_operator(&node.node_type) && catalog.operator_index(&node.node_type).is_none() {
        return Err(Error::validation(
            format!("{path}.node_type"),
            format!("unknown operator `{}`", node.node_type),
        ));
    }
    for (i, t) in node.tables.iter().enumerate() {
        if catalog.table_index(t).is_none() {
            return Err(Error::validation(
                format!("{path}.tables[{i}]"),
                format!("unknown table `{t}`"),
            ));
        }
    }
    for (i, p) in node.predicates.iter().enumerate() {
        for col in p.columns() {
            if catalog.resolve_column(col).is_none() {
                return Err(Error::validation(
                    format!("{path}.predicates[{i}]"),
                    format!("unknown column `{col}`"),
                ));
            }
        }
        if let Predicate::Local {
            value: Literal::Number(x),
            ..
        } = p
        {
            if !x.is_finite() {
                return Err(Error::validation(format!("{path}.predicates[{i}].value"), "non-finite literal"));
            }
        }
    }
    for (i, c) in node.children.iter().enumerate() {
        validate_node(c, catalog, &format!("{path}.children[{i}]"))?;
    }
    Ok(())
}

impl PlanTree {
    /// Checks operator, table and column references against `catalog` and
    /// latency positivity.
    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        if let Some(l) = self.latency_ms {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::validation("$.latency_ms", format!("must be positive, got {l}")));
            }
        }
        validate_node(&self.root, catalog, "$.plan")
    }

    pub fn to_json_value(&self) -> Value {
        serde_json::to_value(PlanFile {
            query_id: self.query_id.clone(),
            plan_id: self.plan_id.clone(),
            latency_ms: self.latency_ms,
            plan: node_to_json(&self.root),
        })
        .expect("plan serializes")
    }

    /// Compact single-line JSON (one JSON-lines record).
    pub fn to_json_string(&self) -> String {
        self.to_json_value().to_string()
    }
}

/// Parses and validates one plan document.
pub fn parse_plan_json(bytes: &[u8], catalog: &Catalog) -> Result<PlanTree> {
    let file: PlanFile = serde_json::from_slice(bytes)?;
    let tree = PlanTree {
        query_id: file.query_id,
        plan_id: file.plan_id,
        latency_ms: file.latency_ms,
        root: node_from_json(file.plan, "$.plan")?,
    };
    tree.validate(catalog)?;
    Ok(tree)
}
