//! Finite-difference checks of encoder + tree model gradients on small
//! random plans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderConfig, PlanGraph};
use crate::error::{Error, Result};
use crate::models::{Mode, ModelConfig, ModelKind, TreeModel};
use crate::numerics::{derive_seed, grad_check, GradCheckConfig, GradCheckReport, ParamStore, Tensor};
use crate::plan::{Catalog, PlanTree};
use crate::workload::{gen_catalog, gen_plan, GenConfig};

/// Small catalog used for gradient checks.
pub fn check_catalog() -> Result<Catalog> {
    gen_catalog(&GenConfig {
        n_tables: 4,
        columns_per_table: (1, 3),
        row_count: (10, 10_000),
        max_joins: 3,
        max_local_predicates: 2,
        ..GenConfig::default()
    })
}

/// A random plan with `3..=8` nodes.
pub fn small_plan(catalog: &Catalog, seed: u64) -> Result<PlanTree> {
    let cfg = GenConfig {
        max_joins: 3,
        max_local_predicates: 2,
        top_operator_probability: 0.5,
        ..GenConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..10_000 {
        let p = gen_plan(catalog, &cfg, &mut rng)?;
        if (3..=8).contains(&p.node_count()) {
            return Ok(p);
        }
    }
    Err(Error::InvalidInput("no 3..8 node plan found".into()))
}

/// Grad-checks `sum(c ⊙ tree(encoder(plan)))` for a random `c`, with
/// every encoder and tree parameter perturbed.
pub fn check_plan_gradients(
    kind: ModelKind,
    catalog: &Catalog,
    plan: &PlanTree,
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[kind as u64]));
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, catalog, &EncoderConfig { d_type: 3, d_col: 2 }, &mut rng)?;
    let model_cfg = ModelConfig {
        kind,
        layers: 2,
        hidden: 3,
        heads: 1,
        dropout: 0.0,
    };
    let tree = TreeModel::new(&mut store, &model_cfg, encoder.output_dim(), &mut rng)?;
    let graph = PlanGraph::build(plan, catalog, kind.needs_binary_tree())?;
    let c: Vec<f64> = (0..tree.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = Tensor::matrix(1, c.len(), c)?;
    grad_check(
        |tape, store| {
            let batch = encoder.encode_plan(tape, store, &graph)?;
            let y = tree.forward(tape, store, &batch, &mut Mode::eval())?;
            let cv = tape.constant(c.clone());
            let prod = tape.mul(y, cv)?;
            tape.sum(prod)
        },
        &store,
        cfg,
    )
}
