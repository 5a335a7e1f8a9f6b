//! Analytic latency model used as ground truth for synthetic workloads.
//!
//! Cardinalities assume uniform, independent columns. Per-node costs:
//!
//! | operator    | cost                                            |
//! |-------------|-------------------------------------------------|
//! | Seq Scan    | `rows_in`                                       |
//! | Index Scan  | `2·log2(1 + rows_in) + rows_out`                |
//! | Hash Join   | `rows_L + rows_R`                               |
//! | Merge Join  | `rows_L + rows_R` plus `r·log2(1 + r)` per unsorted side |
//! | Nested Loop | `rows_L · max(1, rows_R / 1000)`                |
//! | Sort        | `rows · log2(1 + rows)`                         |
//! | Aggregate   | `rows`                                          |
//!
//! Latency is `0.001 · Σ cost` milliseconds, times `lognormal(0, σ)` noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use super::{AGGREGATE, HASH_JOIN, INDEX_SCAN, MERGE_JOIN, NESTED_LOOP, SEQ_SCAN, SORT};
use crate::error::{Error, Result};
use crate::plan::{Catalog, Comparator, Literal, PlanNode, PlanTree, Predicate};

/// Selectivity of one local predicate under the uniformity assumption.
pub fn selectivity(pred: &Predicate, catalog: &Catalog) -> Result<f64> {
    let Predicate::Local {
        column,
        comparator,
        value,
    } = pred
    else {
        return Ok(1.0);
    };
    let col = catalog
        .resolve_column(column)
        .map(|r| catalog.column(r))
        .ok_or_else(|| Error::InvalidInput(format!("unknown column `{column}`")))?;
    let distinct = col.distinct_count.max(1) as f64;
    let (lo, hi, v) = match (col.range(), value) {
        (Some((lo, hi)), Literal::Number(v)) => (lo, hi, *v),
        // Strings and mismatched literals only support equality estimates.
        _ => return Ok(1.0 / distinct),
    };
    let sel = match comparator {
        Comparator::Eq => {
            if v < lo || v > hi {
                0.0
            } else {
                1.0 / distinct
            }
        }
        Comparator::Gt | Comparator::Ge => {
            if hi > lo {
                (hi - v) / (hi - lo)
            } else if v <= lo {
                1.0
            } else {
                0.0
            }
        }
        Comparator::Lt | Comparator::Le => {
            if hi > lo {
                (v - lo) / (hi - lo)
            } else if v >= hi {
                1.0
            } else {
                0.0
            }
        }
        Comparator::Join => 1.0,
    };
    Ok(sel.clamp(0.0, 1.0))
}

fn distinct_of(catalog: &Catalog, column: &str) -> Result<f64> {
    catalog
        .resolve_column(column)
        .map(|r| catalog.column(r).distinct_count.max(1) as f64)
        .ok_or_else(|| Error::InvalidInput(format!("unknown column `{column}`")))
}

struct NodeEstimate {
    rows: f64,
    cost: f64,
    sorted: bool,
}

fn sort_cost(rows: f64) -> f64 {
    rows * (1.0 + rows).log2()
}

fn estimate(node: &PlanNode, catalog: &Catalog) -> Result<NodeEstimate> {
    let op = node.node_type.as_str();
    match op {
        SEQ_SCAN | INDEX_SCAN => {
            let table = node
                .tables
                .first()
                .and_then(|t| catalog.table_index(t))
                .ok_or_else(|| Error::InvalidInput(format!("{op} without a known table")))?;
            let rows_in = catalog.tables[table].row_count as f64;
            let mut rows = rows_in;
            for p in &node.predicates {
                rows *= selectivity(p, catalog)?;
            }
            let cost = if op == SEQ_SCAN {
                rows_in
            } else {
                2.0 * (1.0 + rows_in).log2() + rows
            };
            Ok(NodeEstimate {
                rows,
                cost,
                sorted: op == INDEX_SCAN,
            })
        }
        HASH_JOIN | MERGE_JOIN | NESTED_LOOP => {
            let [l, r] = node.children.as_slice() else {
                return Err(Error::InvalidInput(format!("{op} needs exactly two children")));
            };
            let l = estimate(l, catalog)?;
            let r = estimate(r, catalog)?;
            let mut rows = l.rows * r.rows;
            for p in &node.predicates {
                if let Predicate::Join {
                    column,
                    other_column,
                } = p
                {
                    rows /= distinct_of(catalog, column)?.max(distinct_of(catalog, other_column)?);
                }
            }
            let own = match op {
                HASH_JOIN => l.rows + r.rows,
                MERGE_JOIN => {
                    let mut c = l.rows + r.rows;
                    for side in [&l, &r] {
                        if !side.sorted {
                            c += sort_cost(side.rows);
                        }
                    }
                    c
                }
                _ => l.rows * (r.rows / 1000.0).max(1.0),
            };
            Ok(NodeEstimate {
                rows,
                cost: l.cost + r.cost + own,
                sorted: op == MERGE_JOIN,
            })
        }
        SORT | AGGREGATE => {
            let [c] = node.children.as_slice() else {
                return Err(Error::InvalidInput(format!("{op} needs exactly one child")));
            };
            let c = estimate(c, catalog)?;
            let own = if op == SORT { sort_cost(c.rows) } else { c.rows };
            Ok(NodeEstimate {
                rows: c.rows,
                cost: c.cost + own,
                sorted: op == SORT || c.sorted,
            })
        }
        other => Err(Error::InvalidInput(format!("oracle has no cost formula for operator `{other}`"))),
    }
}

/// Estimated output cardinality of a plan subtree.
pub fn cardinality(node: &PlanNode, catalog: &Catalog) -> Result<f64> {
    Ok(estimate(node, catalog)?.rows)
}

/// Oracle latency in milliseconds. `sigma = 0` disables noise, otherwise
/// the noise draw is fully determined by `noise_seed`.
pub fn oracle_latency(plan: &PlanTree, catalog: &Catalog, noise_seed: u64, sigma: f64) -> Result<f64> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("noise sigma {sigma} must be non-negative")));
    }
    let base = 0.001 * estimate(&plan.root, catalog)?.cost;
    if sigma == 0.0 {
        return Ok(base);
    }
    let noise = LogNormal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(base * noise.sample(&mut ChaCha8Rng::seed_from_u64(noise_seed)))
}
