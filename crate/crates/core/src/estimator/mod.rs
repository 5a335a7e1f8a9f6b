//! Cost estimation: encoder + tree model + MLP head, label scaling, the
//! squared-error loss on log-min-max scaled latencies, training and
//! checkpoints.

mod check;
mod checkpoint;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, PlanGraph};
use crate::error::{Error, Result};
use crate::models::{Mode, ModelConfig, ModelKind, TreeModel};
use crate::numerics::{Linear, ParamStore, Precision, Tape, Var};
use crate::plan::{Catalog, PlanTree};

pub use check::{check_catalog as gradcheck_catalog, check_plan_gradients, small_plan};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{fit, kfold, EpochRecord, TrainConfig, TrainReport};

/// Min and max of natural-log latencies over a training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScaler {
    pub log_min: f64,
    pub log_max: f64,
}

impl LabelScaler {
    pub fn new(log_min: f64, log_max: f64) -> Result<Self> {
        if !(log_min.is_finite() && log_max.is_finite()) || log_min >= log_max {
            return Err(Error::InvalidInput(format!(
                "label scaler needs log_min < log_max, got {log_min} and {log_max}"
            )));
        }
        Ok(LabelScaler { log_min, log_max })
    }

    /// Fits the scaler to latencies (milliseconds).
    pub fn fit(latencies_ms: &[f64]) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &y in latencies_ms {
            let l = checked_log(y)?;
            lo = lo.min(l);
            hi = hi.max(l);
        }
        if latencies_ms.is_empty() {
            return Err(Error::InvalidInput("cannot fit a label scaler to no labels".into()));
        }
        LabelScaler::new(lo, hi)
    }

    /// `(ln y − log_min) / (log_max − log_min)`, not clamped.
    pub fn scale(&self, latency_ms: f64) -> Result<f64> {
        Ok((checked_log(latency_ms)? - self.log_min) / (self.log_max - self.log_min))
    }

    /// Inverse of [`scale`](Self::scale).
    pub fn unscale(&self, y_out: f64) -> f64 {
        (y_out * (self.log_max - self.log_min) + self.log_min).exp()
    }
}

fn checked_log(y: f64) -> Result<f64> {
    if !(y > 0.0 && y.is_finite()) {
        return Err(Error::InvalidInput(format!("latency must be positive and finite, got {y}")));
    }
    Ok(y.ln())
}

/// Sum over samples of `(scale(y_al) − y_out)²`.
pub fn loss(outputs: &[f64], latencies_ms: &[f64], scaler: &LabelScaler) -> Result<f64> {
    if outputs.len() != latencies_ms.len() {
        return Err(Error::InvalidInput(format!(
            "{} outputs for {} labels",
            outputs.len(),
            latencies_ms.len()
        )));
    }
    let mut total = 0.0;
    for (&o, &y) in outputs.iter().zip(latencies_ms) {
        let d = scaler.scale(y)? - o;
        total += d * d;
    }
    Ok(total)
}

/// Fully connected ReLU layers ending in a single sigmoid unit.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub hidden: Vec<Linear>,
    pub out: Linear,
}

impl MlpHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_dim: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut d = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            if w == 0 {
                return Err(Error::InvalidInput("head layer width must be positive".into()));
            }
            hidden.push(Linear::new(store, &format!("head.hidden{i}"), d, w, true, rng)?);
            d = w;
        }
        let out = Linear::new(store, "head.out", d, 1, true, rng)?;
        Ok(MlpHead { hidden, out })
    }

    /// `1 x d` embedding to a `1 x 1` output in `(0, 1)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.hidden {
            h = layer.forward(tape, store, h)?;
            h = tape.relu(h)?;
        }
        let y = self.out.forward(tape, store, h)?;
        tape.sigmoid(y)
    }
}

/// Everything needed to rebuild a cost model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModelSpec {
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub head_hidden: Vec<usize>,
    #[serde(default)]
    pub precision: Precision,
}

impl CostModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        CostModelSpec {
            encoder: EncoderConfig::default(),
            model: ModelConfig::new(kind),
            head_hidden: vec![128, 64],
            precision: Precision::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

/// One plan prepared for the model, with its measured latency.
#[derive(Clone, Debug)]
pub struct Sample {
    pub query_id: String,
    pub plan_id: String,
    pub graph: PlanGraph,
    pub latency_ms: f64,
}

/// Encoder, tree model and head sharing one parameter store.
#[derive(Clone, Debug)]
pub struct CostModel {
    pub spec: CostModelSpec,
    pub catalog_fingerprint: String,
    pub init_seed: u64,
    pub encoder: Encoder,
    pub tree: TreeModel,
    pub head: MlpHead,
    pub store: ParamStore,
    pub scaler: Option<LabelScaler>,
    pub training: Option<TrainingMeta>,
}

impl CostModel {
    /// Parameters are registered and initialized in a fixed order from `seed`.
    pub fn new(catalog: &Catalog, spec: &CostModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, catalog, &spec.encoder, &mut rng)?;
        let tree = TreeModel::new(&mut store, &spec.model, encoder.output_dim(), &mut rng)?;
        let head = MlpHead::new(&mut store, tree.output_dim(), &spec.head_hidden, &mut rng)?;
        Ok(CostModel {
            spec: spec.clone(),
            catalog_fingerprint: catalog.fingerprint(),
            init_seed: seed,
            encoder,
            tree,
            head,
            store,
            scaler: None,
            training: None,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.model.kind
    }

    /// Featurizes a plan (binarizing it first for tree convolution).
    pub fn prepare(&self, plan: &PlanTree, catalog: &Catalog) -> Result<PlanGraph> {
        self.check_catalog(catalog)?;
        PlanGraph::build(plan, catalog, self.kind().needs_binary_tree())
    }

    pub fn sample(&self, plan: &PlanTree, catalog: &Catalog) -> Result<Sample> {
        let latency_ms = plan.latency_ms.ok_or_else(|| {
            Error::InvalidInput(format!("plan {}/{} has no latency", plan.query_id, plan.plan_id))
        })?;
        Ok(Sample {
            query_id: plan.query_id.clone(),
            plan_id: plan.plan_id.clone(),
            graph: self.prepare(plan, catalog)?,
            latency_ms,
        })
    }

    pub fn check_catalog(&self, catalog: &Catalog) -> Result<()> {
        let fp = catalog.fingerprint();
        if fp != self.catalog_fingerprint {
            return Err(Error::InvalidInput(format!(
                "catalog fingerprint {fp} does not match the model's {}",
                self.catalog_fingerprint
            )));
        }
        Ok(())
    }

    /// Graph-level embedding of an encoded plan.
    pub fn embed(&self, tape: &mut Tape, graph: &PlanGraph, mode: &mut Mode<'_>) -> Result<Var> {
        let batch = self.encoder.encode_plan(tape, &self.store, graph)?;
        self.tree.forward(tape, &self.store, &batch, mode)
    }

    /// Head output in `(0, 1)` as a `1 x 1` var. Training mode also drops
    /// out units of the embedding before the head.
    pub fn forward(&self, tape: &mut Tape, graph: &PlanGraph, mode: &mut Mode<'_>) -> Result<Var> {
        let emb = self.embed(tape, graph, mode)?;
        let emb = mode.dropout(tape, emb)?;
        self.head.forward(tape, &self.store, emb)
    }

    pub fn predict_output(&self, graph: &PlanGraph) -> Result<f64> {
        let mut tape = Tape::new(self.spec.precision);
        let y = self.forward(&mut tape, graph, &mut Mode::eval())?;
        Ok(tape.value(y).data()[0])
    }

    pub fn scaler(&self) -> Result<&LabelScaler> {
        self.scaler
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("model has no label scaler (not trained)".into()))
    }

    /// Predicted latency in milliseconds.
    pub fn predict_latency_ms(&self, graph: &PlanGraph) -> Result<f64> {
        let scaler = *self.scaler()?;
        Ok(scaler.unscale(self.predict_output(graph)?))
    }

    /// Predictions for many plans, computed in parallel; order is preserved.
    pub fn predict_many(&self, graphs: &[&PlanGraph]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        graphs.par_iter().map(|g| self.predict_latency_ms(g)).collect()
    }
}

#[cfg(test)]
mod tests;
