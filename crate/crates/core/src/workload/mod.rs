//! Synthetic workloads: catalogs, random join plans, an analytic latency
//! oracle, hint-style candidate sets, persisted datasets, and best-effort
//! ingestion of PostgreSQL `EXPLAIN (ANALYZE, FORMAT JSON)` output.

mod candidates;
mod dataset;
mod ingest;
mod oracle;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::derive_seed;
use crate::plan::{Catalog, ColumnStats, Comparator, Literal, PlanNode, PlanTree, Predicate, TableStats, ValueType};

pub use candidates::{gen_candidate_set, CandidateSet};
pub use dataset::{gen_dataset, load_dataset, read_plans, Dataset, DatasetManifest, SplitQueries, SplitRatios, SPLITS};
pub use ingest::{ingest_explain, IngestOptions, IngestReport, SKIP};
pub use oracle::{cardinality, oracle_latency, selectivity};

pub const SEQ_SCAN: &str = "Seq Scan";
pub const INDEX_SCAN: &str = "Index Scan";
pub const HASH_JOIN: &str = "Hash Join";
pub const MERGE_JOIN: &str = "Merge Join";
pub const NESTED_LOOP: &str = "Nested Loop";
pub const SORT: &str = "Sort";
pub const AGGREGATE: &str = "Aggregate";

pub const OPERATORS: [&str; 7] = [SEQ_SCAN, INDEX_SCAN, HASH_JOIN, MERGE_JOIN, NESTED_LOOP, SORT, AGGREGATE];
pub const JOIN_OPERATORS: [&str; 3] = [HASH_JOIN, MERGE_JOIN, NESTED_LOOP];
pub const SCAN_OPERATORS: [&str; 2] = [SEQ_SCAN, INDEX_SCAN];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_tables: usize,
    /// Inclusive range of columns per table.
    pub columns_per_table: (usize, usize),
    /// Inclusive range of table row counts (sampled log-uniformly).
    pub row_count: (u64, u64),
    pub max_joins: usize,
    pub max_join_predicates: usize,
    pub max_local_predicates: usize,
    /// Relative weights of hash, merge and nested-loop joins.
    pub join_type_mix: [f64; 3],
    pub index_scan_probability: f64,
    /// Probability of a Sort or Aggregate on top of the join tree.
    pub top_operator_probability: f64,
    pub string_column_fraction: f64,
    /// Probability that a numeric literal is drawn outside the column range.
    pub out_of_range_probability: f64,
    /// Probability that a join predicate pairs arbitrary (non-key) columns.
    pub many_to_many_ratio: f64,
    /// Sigma of multiplicative lognormal latency noise; 0 disables noise.
    pub noise_sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_tables: 25,
            columns_per_table: (2, 6),
            row_count: (100, 10_000_000),
            max_joins: 10,
            max_join_predicates: 3,
            max_local_predicates: 5,
            join_type_mix: [0.5, 0.25, 0.25],
            index_scan_probability: 0.3,
            top_operator_probability: 0.3,
            string_column_fraction: 0.25,
            out_of_range_probability: 0.1,
            many_to_many_ratio: 0.3,
            noise_sigma: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.n_tables == 0 {
            return bad("n_tables must be positive".into());
        }
        let (lo, hi) = self.columns_per_table;
        if lo == 0 || lo > hi {
            return bad(format!("columns_per_table ({lo}, {hi}) must be a non-empty positive range"));
        }
        let (rlo, rhi) = self.row_count;
        if rlo == 0 || rlo > rhi {
            return bad(format!("row_count ({rlo}, {rhi}) must be a non-empty positive range"));
        }
        if self.max_join_predicates == 0 {
            return bad("max_join_predicates must be at least 1".into());
        }
        if self.join_type_mix.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || self.join_type_mix.iter().sum::<f64>() <= 0.0 {
            return bad(format!("join_type_mix {:?} needs non-negative weights with a positive sum", self.join_type_mix));
        }
        for (name, p) in [
            ("index_scan_probability", self.index_scan_probability),
            ("top_operator_probability", self.top_operator_probability),
            ("string_column_fraction", self.string_column_fraction),
            ("out_of_range_probability", self.out_of_range_probability),
            ("many_to_many_ratio", self.many_to_many_ratio),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be non-negative", self.noise_sigma));
        }
        Ok(())
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return lo;
    }
    rng.random_range(lo.ln()..=hi.ln()).exp()
}

/// Random catalog with tables `t0..`, each led by a unique key column `id`.
pub fn gen_catalog(cfg: &GenConfig) -> Result<Catalog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xca7a]));
    let mut tables = Vec::with_capacity(cfg.n_tables);
    for t in 0..cfg.n_tables {
        let rows = log_uniform(&mut rng, cfg.row_count.0 as f64, cfg.row_count.1 as f64).round() as u64;
        let rows = rows.clamp(cfg.row_count.0, cfg.row_count.1);
        let n_cols = rng.random_range(cfg.columns_per_table.0..=cfg.columns_per_table.1);
        let mut columns = vec![ColumnStats {
            name: "id".into(),
            value_type: ValueType::Numeric,
            min: Some(1.0),
            max: Some(rows as f64),
            distinct_count: rows,
        }];
        for c in 1..n_cols {
            let distinct = (log_uniform(&mut rng, 2.0, rows.max(2) as f64).round() as u64).clamp(1, rows);
            let col = if rng.random_bool(cfg.string_column_fraction) {
                ColumnStats {
                    name: format!("s{c}"),
                    value_type: ValueType::String,
                    min: None,
                    max: None,
                    distinct_count: distinct,
                }
            } else {
                let min = (rng.random_range(-1000.0..1000.0f64)).round();
                let width = log_uniform(&mut rng, 1.0, 1e6).round();
                ColumnStats {
                    name: format!("c{c}"),
                    value_type: ValueType::Numeric,
                    min: Some(min),
                    max: Some(min + width),
                    distinct_count: distinct,
                }
            };
            columns.push(col);
        }
        tables.push(TableStats {
            name: format!("t{t}"),
            row_count: rows,
            columns,
        });
    }
    let catalog = Catalog {
        operators: OPERATORS.iter().map(|s| s.to_string()).collect(),
        tables,
    };
    catalog.validate()?;
    Ok(catalog)
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn local_predicate(catalog: &Catalog, table: usize, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Predicate {
    let t = &catalog.tables[table];
    let col = t.columns.choose(rng).expect("tables have columns");
    let column = format!("{}.{}", t.name, col.name);
    match col.range() {
        None => Predicate::Local {
            column,
            comparator: Comparator::Eq,
            value: Literal::Text(format!("v{}", rng.random_range(0..col.distinct_count.max(1)))),
        },
        Some((lo, hi)) => {
            let comparator = *[Comparator::Eq, Comparator::Gt, Comparator::Ge, Comparator::Lt, Comparator::Le]
                .choose(rng)
                .unwrap();
            let width = (hi - lo).max(1.0);
            let v = if rng.random_bool(cfg.out_of_range_probability) {
                if rng.random_bool(0.5) {
                    lo - rng.random_range(0.01..1.0) * width
                } else {
                    hi + rng.random_range(0.01..1.0) * width
                }
            } else {
                rng.random_range(lo..=hi)
            };
            let v = if comparator == Comparator::Eq { v.round() } else { round3(v) };
            Predicate::Local {
                column,
                comparator,
                value: Literal::Number(v),
            }
        }
    }
}

fn scan_node(catalog: &Catalog, table: usize, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> PlanNode {
    let op = if rng.random_bool(cfg.index_scan_probability) { INDEX_SCAN } else { SEQ_SCAN };
    let n = rng.random_range(0..=cfg.max_local_predicates);
    let predicates = (0..n).map(|_| local_predicate(catalog, table, cfg, rng)).collect();
    PlanNode::new(op)
        .with_tables(&[&catalog.tables[table].name])
        .with_predicates(predicates)
}

/// Join column pair: the key columns, or for many-to-many joins two
/// arbitrary columns of the same type.
fn join_columns(catalog: &Catalog, a: usize, b: usize, many_to_many: bool, rng: &mut ChaCha8Rng) -> (String, String) {
    let (ta, tb) = (&catalog.tables[a], &catalog.tables[b]);
    let key = |t: &TableStats| t.columns.iter().max_by_key(|c| c.distinct_count).unwrap().clone();
    let (ca, cb) = if many_to_many {
        let ca = ta.columns.choose(rng).unwrap();
        let same: Vec<&ColumnStats> = tb.columns.iter().filter(|c| c.value_type == ca.value_type).collect();
        match same.choose(rng) {
            Some(cb) => (ca.clone(), (*cb).clone()),
            None => (key(ta), key(tb)),
        }
    } else {
        (key(ta), key(tb))
    };
    (format!("{}.{}", ta.name, ca.name), format!("{}.{}", tb.name, cb.name))
}

/// Tables mentioned under a plan node (scan leaves only).
pub(crate) fn leaf_tables(node: &PlanNode) -> Vec<String> {
    if node.children.is_empty() {
        return node.tables.clone();
    }
    node.children.iter().flat_map(leaf_tables).collect()
}

fn table_index(catalog: &Catalog, name: &str) -> usize {
    catalog.table_index(name).expect("generated tables exist")
}

fn join_node(catalog: &Catalog, op: &str, left: PlanNode, right: PlanNode, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> PlanNode {
    let lt = leaf_tables(&left);
    let rt = leaf_tables(&right);
    let n = rng.random_range(1..=cfg.max_join_predicates);
    let mut predicates: Vec<Predicate> = Vec::with_capacity(n);
    for _ in 0..n {
        let m2m = rng.random_bool(cfg.many_to_many_ratio);
        let a = table_index(catalog, lt.choose(rng).unwrap());
        let b = table_index(catalog, rt.choose(rng).unwrap());
        let (column, other_column) = join_columns(catalog, a, b, m2m, rng);
        let p = Predicate::Join { column, other_column };
        if !predicates.contains(&p) {
            predicates.push(p);
        }
    }
    let mut tables: Vec<String> = Vec::new();
    for p in &predicates {
        for c in p.columns() {
            let t = c.split('.').next().unwrap().to_string();
            if !tables.contains(&t) {
                tables.push(t);
            }
        }
    }
    PlanNode {
        node_type: op.to_string(),
        tables,
        predicates,
        children: vec![left, right],
    }
}

fn pick_join_type(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> &'static str {
    let w = WeightedIndex::new(cfg.join_type_mix).expect("validated weights");
    JOIN_OPERATORS[w.sample(rng)]
}

/// Random plan over `1..=max_joins + 1` distinct tables (at least
/// `min_joins` joins when the catalog allows). No latency is attached.
pub fn gen_plan_with(
    catalog: &Catalog,
    cfg: &GenConfig,
    min_joins: usize,
    rng: &mut ChaCha8Rng,
    query_id: &str,
    plan_id: &str,
) -> Result<PlanTree> {
    cfg.validate()?;
    let cap = cfg.max_joins.min(catalog.tables.len().saturating_sub(1));
    let lo = min_joins.min(cap);
    let joins = rng.random_range(lo..=cap);
    let mut picked: Vec<usize> = (0..catalog.tables.len()).collect();
    picked.shuffle(rng);
    picked.truncate(joins + 1);
    let mut forest: Vec<PlanNode> = picked.iter().map(|&t| scan_node(catalog, t, cfg, rng)).collect();
    while forest.len() > 1 {
        let i = rng.random_range(0..forest.len());
        let left = forest.swap_remove(i);
        let j = rng.random_range(0..forest.len());
        let right = forest.swap_remove(j);
        let op = pick_join_type(cfg, rng);
        forest.push(join_node(catalog, op, left, right, cfg, rng));
    }
    let mut root = forest.pop().expect("at least one table");
    if rng.random_bool(cfg.top_operator_probability) {
        let op = if rng.random_bool(0.5) { SORT } else { AGGREGATE };
        root = PlanNode::new(op).with_children(vec![root]);
    }
    let tree = PlanTree {
        query_id: query_id.to_string(),
        plan_id: plan_id.to_string(),
        latency_ms: None,
        root,
    };
    tree.validate(catalog)?;
    Ok(tree)
}

/// Random plan with ids `q` / `p0`.
pub fn gen_plan(catalog: &Catalog, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<PlanTree> {
    gen_plan_with(catalog, cfg, 0, rng, "q", "p0")
}

/// Number of join operators in a plan.
pub fn join_count(node: &PlanNode) -> usize {
    usize::from(JOIN_OPERATORS.contains(&node.node_type.as_str()))
        + node.children.iter().map(join_count).sum::<usize>()
}
