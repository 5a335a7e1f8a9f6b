//! Best-effort conversion of PostgreSQL `EXPLAIN (ANALYZE, FORMAT JSON)`
//! output into a [`PlanTree`].

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::plan::{Catalog, Comparator, Literal, PlanNode, PlanTree, Predicate};

/// Alias target that splices a single-child node out of the tree.
pub const SKIP: &str = "-";

const CONDITION_KEYS: [&str; 6] = ["Filter", "Index Cond", "Hash Cond", "Merge Cond", "Join Filter", "Recheck Cond"];

#[derive(Clone, Debug)]
pub struct IngestOptions {
    /// PostgreSQL node type → catalog operator (or [`SKIP`]). Node types
    /// already in the catalog vocabulary map to themselves.
    pub aliases: BTreeMap<String, String>,
    pub query_id: String,
    pub plan_id: String,
}

impl Default for IngestOptions {
    fn default() -> Self {
        let aliases = [
            ("Index Only Scan", "Index Scan"),
            ("Hash", SKIP),
            ("Materialize", SKIP),
            ("Memoize", SKIP),
            ("Gather", SKIP),
            ("Gather Merge", SKIP),
        ]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        IngestOptions {
            aliases,
            query_id: "q".into(),
            plan_id: "p".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestReport {
    pub plan: PlanTree,
    /// Conditions that could not be mapped onto catalog columns.
    pub dropped_predicates: usize,
}

static JOIN_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\w+)\.(\w+)\s*=\s*(\w+)\.(\w+)$").expect("valid regex"));
static LOCAL_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?:(\w+)\.)?(\w+)\s*(>=|<=|=|>|<)\s*(?:'((?:[^']|'')*)'|(-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?))(?:::[\w ]+)?$")
        .expect("valid regex")
});

struct Ctx<'a> {
    catalog: &'a Catalog,
    opts: &'a IngestOptions,
    /// Query alias → relation name.
    relations: BTreeMap<String, String>,
    dropped: usize,
}

fn collect_aliases(node: &Value, out: &mut BTreeMap<String, String>) {
    if let Some(rel) = node.get("Relation Name").and_then(Value::as_str) {
        let alias = node.get("Alias").and_then(Value::as_str).unwrap_or(rel);
        out.insert(alias.to_string(), rel.to_string());
        out.entry(rel.to_string()).or_insert_with(|| rel.to_string());
    }
    if let Some(children) = node.get("Plans").and_then(Value::as_array) {
        for c in children {
            collect_aliases(c, out);
        }
    }
}

/// Splits `((a) AND (b))` into atoms, stripping redundant parentheses.
fn atoms(cond: &str) -> Vec<String> {
    fn strip(s: &str) -> &str {
        let mut s = s.trim();
        while s.starts_with('(') && s.ends_with(')') && balanced(&s[1..s.len() - 1]) {
            s = s[1..s.len() - 1].trim();
        }
        s
    }
    fn balanced(s: &str) -> bool {
        let mut depth = 0i32;
        for ch in s.chars() {
            match ch {
                '(' => depth += 1,
                ')' => {
                    depth -= 1;
                    if depth < 0 {
                        return false;
                    }
                }
                _ => {}
            }
        }
        depth == 0
    }
    let s = strip(cond);
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => depth += 1,
            b')' => depth -= 1,
            b' ' if depth == 0 && s[i..].starts_with(" AND ") => {
                out.push(strip(&s[start..i]).to_string());
                start = i + 5;
                i += 4;
            }
            _ => {}
        }
        i += 1;
    }
    out.push(strip(&s[start..]).to_string());
    out
}

impl Ctx<'_> {
    fn qualify(&self, qualifier: Option<&str>, column: &str, scan_table: Option<&str>) -> Option<String> {
        let table = match qualifier {
            Some(q) => self.relations.get(q).map(String::as_str).unwrap_or(q),
            None => scan_table?,
        };
        let name = format!("{table}.{column}");
        self.catalog.resolve_column(&name).map(|_| name)
    }

    fn predicate(&self, atom: &str, scan_table: Option<&str>) -> Option<Predicate> {
        if let Some(c) = JOIN_RE.captures(atom) {
            let l = self.qualify(Some(&c[1]), &c[2], scan_table)?;
            let r = self.qualify(Some(&c[3]), &c[4], scan_table)?;
            return Some(Predicate::Join {
                column: l,
                other_column: r,
            });
        }
        let c = LOCAL_RE.captures(atom)?;
        let column = self.qualify(c.get(1).map(|m| m.as_str()), &c[2], scan_table)?;
        let comparator = Comparator::parse(&c[3])?;
        let value = match (c.get(4), c.get(5)) {
            (Some(t), _) => Literal::Text(t.as_str().replace("''", "'")),
            (None, Some(n)) => Literal::Number(n.as_str().parse().ok()?),
            _ => return None,
        };
        Some(Predicate::Local {
            column,
            comparator,
            value,
        })
    }

    fn operator(&self, node_type: &str) -> Result<Option<String>> {
        if self.catalog.operator_index(node_type).is_some() {
            return Ok(Some(node_type.to_string()));
        }
        match self.opts.aliases.get(node_type) {
            Some(t) if t == SKIP => Ok(None),
            Some(t) if self.catalog.operator_index(t).is_some() => Ok(Some(t.clone())),
            Some(t) => Err(Error::InvalidInput(format!(
                "alias `{node_type}` → `{t}` names an operator missing from the catalog"
            ))),
            None => Err(Error::InvalidInput(format!(
                "unknown node type `{node_type}` (no alias configured)"
            ))),
        }
    }

    fn node(&mut self, v: &Value) -> Result<PlanNode> {
        let node_type = v
            .get("Node Type")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::InvalidInput("plan node without \"Node Type\"".into()))?;
        let children: Vec<PlanNode> = v
            .get("Plans")
            .and_then(Value::as_array)
            .map(|cs| cs.iter().map(|c| self.node(c)).collect::<Result<Vec<_>>>())
            .transpose()?
            .unwrap_or_default();
        let Some(op) = self.operator(node_type)? else {
            let mut children = children;
            return match children.len() {
                1 => Ok(children.pop().unwrap()),
                n => Err(Error::InvalidInput(format!("cannot skip `{node_type}` with {n} children"))),
            };
        };
        let relation = v.get("Relation Name").and_then(Value::as_str);
        if let Some(r) = relation {
            if self.catalog.table_index(r).is_none() {
                return Err(Error::InvalidInput(format!("relation `{r}` is not in the catalog")));
            }
        }
        let mut predicates: Vec<Predicate> = Vec::new();
        for key in CONDITION_KEYS {
            let Some(cond) = v.get(key).and_then(Value::as_str) else {
                continue;
            };
            for atom in atoms(cond) {
                match self.predicate(&atom, relation) {
                    Some(p) if !predicates.contains(&p) => predicates.push(p),
                    Some(_) => {}
                    None => self.dropped += 1,
                }
            }
        }
        let mut tables: Vec<String> = relation.map(|r| vec![r.to_string()]).unwrap_or_default();
        for p in &predicates {
            for c in p.columns() {
                let t = c.split('.').next().unwrap_or(c);
                if !tables.iter().any(|x| x == t) {
                    tables.push(t.to_string());
                }
            }
        }
        Ok(PlanNode {
            node_type: op,
            tables,
            predicates,
            children,
        })
    }
}

/// Converts one EXPLAIN document (either the top-level array or a single
/// `{"Plan": ...}` object). Latency comes from the root's
/// "Actual Total Time", falling back to "Execution Time".
pub fn ingest_explain(bytes: &[u8], catalog: &Catalog, opts: &IngestOptions) -> Result<IngestReport> {
    let doc: Value = serde_json::from_slice(bytes)?;
    let top = match &doc {
        Value::Array(items) => items.first().cloned().unwrap_or(Value::Null),
        other => other.clone(),
    };
    let plan = top
        .get("Plan")
        .ok_or_else(|| Error::InvalidInput("EXPLAIN document has no \"Plan\" key".into()))?;
    let mut relations = BTreeMap::new();
    collect_aliases(plan, &mut relations);
    let mut ctx = Ctx {
        catalog,
        opts,
        relations,
        dropped: 0,
    };
    let root = ctx.node(plan)?;
    let latency_ms = plan
        .get("Actual Total Time")
        .or_else(|| top.get("Execution Time"))
        .and_then(Value::as_f64)
        .filter(|l| *l > 0.0 && l.is_finite());
    if ctx.dropped > 0 {
        log::warn!("dropped {} unmappable predicate(s) while ingesting {}", ctx.dropped, opts.plan_id);
    }
    let tree = PlanTree {
        query_id: opts.query_id.clone(),
        plan_id: opts.plan_id.clone(),
        latency_ms,
        root,
    };
    tree.validate(catalog)?;
    Ok(IngestReport {
        plan: tree,
        dropped_predicates: ctx.dropped,
    })
}
