//! Hint-style candidate plans: one random base plan plus structural variants
//! (forced join algorithms, forced scan types, commuted and rotated joins).

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gen_plan_with, leaf_tables, oracle_latency, GenConfig, JOIN_OPERATORS, SCAN_OPERATORS};
use crate::error::{Error, Result};
use crate::numerics::derive_seed;
use crate::plan::{Catalog, PlanNode, PlanTree, Predicate};

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub query_id: String,
    /// Every plan carries its oracle latency.
    pub plans: Vec<PlanTree>,
}

impl CandidateSet {
    pub fn latencies(&self) -> Vec<f64> {
        self.plans.iter().map(|p| p.latency_ms.unwrap_or(f64::NAN)).collect()
    }
}

fn is_join(n: &PlanNode) -> bool {
    JOIN_OPERATORS.contains(&n.node_type.as_str())
}

fn is_scan(n: &PlanNode) -> bool {
    SCAN_OPERATORS.contains(&n.node_type.as_str())
}

fn count(node: &PlanNode, pred: fn(&PlanNode) -> bool) -> usize {
    usize::from(pred(node)) + node.children.iter().map(|c| count(c, pred)).sum::<usize>()
}

/// Applies `f` to the `k`-th node (pre-order) matching `pred`.
fn with_nth(node: &mut PlanNode, pred: fn(&PlanNode) -> bool, k: &mut usize, f: &mut dyn FnMut(&mut PlanNode)) -> bool {
    if pred(node) {
        if *k == 0 {
            f(node);
            return true;
        }
        *k -= 1;
    }
    node.children.iter_mut().any(|c| with_nth(c, pred, k, f))
}

/// Applies `f` to a uniformly chosen node matching `pred`, if any.
fn with_random(root: &mut PlanNode, pred: fn(&PlanNode) -> bool, rng: &mut ChaCha8Rng, mut f: impl FnMut(&mut PlanNode)) {
    let n = count(root, pred);
    if n > 0 {
        let mut k = rng.random_range(0..n);
        with_nth(root, pred, &mut k, &mut f);
    }
}

fn set_all(node: &mut PlanNode, pred: fn(&PlanNode) -> bool, op: &str) {
    if pred(node) {
        node.node_type = op.to_string();
    }
    for c in node.children.iter_mut() {
        set_all(c, pred, op);
    }
}

fn predicate_tables(preds: &[Predicate]) -> Vec<String> {
    let mut tables: Vec<String> = Vec::new();
    for p in preds {
        for c in p.columns() {
            let t = c.split('.').next().unwrap_or(c).to_string();
            if !tables.contains(&t) {
                tables.push(t);
            }
        }
    }
    tables
}

fn spans(p: &Predicate, a: &[String], b: &[String]) -> bool {
    let cols = p.columns();
    let t = |c: &str| c.split('.').next().unwrap_or(c).to_string();
    cols.len() == 2
        && ((a.contains(&t(cols[0])) && b.contains(&t(cols[1]))) || (b.contains(&t(cols[0])) && a.contains(&t(cols[1]))))
}

/// `(A ⋈ B) ⋈ C  →  A ⋈ (B ⋈ C)`, redistributing join predicates. Returns
/// false (leaving the node untouched) when `B ⋈ C` would get no predicate.
fn rotate(node: &mut PlanNode) -> bool {
    if !is_join(node) || !is_join(&node.children[0]) {
        return false;
    }
    let left = &node.children[0];
    let (a, b, c) = (&left.children[0], &left.children[1], &node.children[1]);
    let (bt, ct) = (leaf_tables(b), leaf_tables(c));
    let pool: Vec<Predicate> = left.predicates.iter().chain(&node.predicates).cloned().collect();
    let (inner_preds, outer_preds): (Vec<_>, Vec<_>) = pool.into_iter().partition(|p| spans(p, &bt, &ct));
    if inner_preds.is_empty() || outer_preds.is_empty() {
        return false;
    }
    let inner = PlanNode {
        node_type: left.node_type.clone(),
        tables: predicate_tables(&inner_preds),
        predicates: inner_preds,
        children: vec![b.clone(), c.clone()],
    };
    let a = a.clone();
    node.tables = predicate_tables(&outer_preds);
    node.predicates = outer_preds;
    node.children = vec![a, inner];
    true
}

fn perturb(root: &mut PlanNode, rng: &mut ChaCha8Rng) {
    match rng.random_range(0..6) {
        0 => set_all(root, is_join, JOIN_OPERATORS.choose(rng).unwrap()),
        1 => set_all(root, is_scan, SCAN_OPERATORS.choose(rng).unwrap()),
        2 => {
            let op = *JOIN_OPERATORS.choose(rng).unwrap();
            with_random(root, is_join, rng, |n| n.node_type = op.to_string());
        }
        3 => {
            let op = *SCAN_OPERATORS.choose(rng).unwrap();
            with_random(root, is_scan, rng, |n| n.node_type = op.to_string());
        }
        4 => with_random(root, is_join, rng, |n| n.children.swap(0, 1)),
        _ => with_random(root, is_join, rng, |n| {
            if !rotate(n) {
                n.children.swap(0, 1);
                if !rotate(n) {
                    n.children.swap(0, 1);
                }
            }
        }),
    }
}

/// Base plan (at least one join) plus `k - 1` distinct variants, all labeled
/// by the oracle. Plan ids are `{query_id}-h{i}`; `h0` is the base plan.
pub fn gen_candidate_set(catalog: &Catalog, cfg: &GenConfig, query_seed: u64, query_id: &str, k: usize) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::InvalidInput("candidate sets need k >= 1".into()));
    }
    if cfg.max_joins == 0 || catalog.tables.len() < 2 {
        return Err(Error::InvalidInput("candidate sets need at least one join".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(query_seed);
    let base = gen_plan_with(catalog, cfg, 1, &mut rng, query_id, &format!("{query_id}-h0"))?;
    let mut roots = vec![base.root.clone()];
    let budget = 200 * k;
    let mut attempts = 0;
    while roots.len() < k {
        attempts += 1;
        if attempts > budget {
            return Err(Error::InvalidInput(format!(
                "found only {} distinct variants of query {query_id} after {budget} attempts (k = {k})",
                roots.len()
            )));
        }
        let mut root = base.root.clone();
        for _ in 0..rng.random_range(1..=3) {
            perturb(&mut root, &mut rng);
        }
        if !roots.contains(&root) {
            roots.push(root);
        }
    }
    let plans = roots
        .into_iter()
        .enumerate()
        .map(|(i, root)| {
            let mut plan = PlanTree {
                query_id: query_id.to_string(),
                plan_id: format!("{query_id}-h{i}"),
                latency_ms: None,
                root,
            };
            plan.validate(catalog)?;
            plan.latency_ms = Some(oracle_latency(&plan, catalog, derive_seed(query_seed, &[i as u64]), cfg.noise_sigma)?);
            Ok(plan)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateSet {
        query_id: query_id.to_string(),
        plans,
    })
}
