//! Q-error, rank correlation, plan suboptimality, quantile summaries,
//! inference timing, and the report files built from them.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::PlanGraph;
use crate::error::{Error, Result};
use crate::estimator::CostModel;

/// `max(est, act) / min(est, act)`.
pub fn q_error(estimate: f64, actual: f64) -> Result<f64> {
    if !(estimate > 0.0 && actual > 0.0 && estimate.is_finite() && actual.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "q-error needs positive finite values, got {estimate} and {actual}"
        )));
    }
    Ok(estimate.max(actual) / estimate.min(actual))
}

/// 1-based ranks, ties sharing the average of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "spearman needs two equal-length inputs of at least 2 values, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("spearman input contains NaN".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidInput("spearman is undefined for a constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Index of the smallest prediction; ties go to the lowest index.
pub fn select_plan(predicted_ms: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &p) in predicted_ms.iter().enumerate() {
        if best.is_none_or(|b| p < predicted_ms[b]) {
            best = Some(i);
        }
    }
    best
}

/// Actual latency of the plan with the lowest prediction over the best
/// actual latency. Candidates are `(predicted_ms, actual_ms)`.
pub fn plan_suboptimality(candidates: &[(f64, f64)]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("plan suboptimality of an empty candidate set".into()));
    }
    if let Some(&(p, a)) = candidates
        .iter()
        .find(|(p, a)| !(*a > 0.0 && a.is_finite()) || p.is_nan())
    {
        return Err(Error::InvalidInput(format!(
            "candidate needs a positive actual latency and a prediction, got ({p}, {a})"
        )));
    }
    let predicted: Vec<f64> = candidates.iter().map(|c| c.0).collect();
    let chosen = select_plan(&predicted).expect("non-empty");
    let best = candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    Ok(candidates[chosen].1 / best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileReport {
    pub median: f64,
    pub p90: f64,
    pub p99: f64,
    pub top50_mean: f64,
    pub top90_mean: f64,
    pub top99_mean: f64,
}

/// Nearest-rank percentile: element `ceil(q * n) - 1` of the sorted values.
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

/// Mean of the `ceil(q * n)` smallest values.
fn smallest_mean(sorted: &[f64], q: f64) -> f64 {
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[..k].iter().sum::<f64>() / k as f64
}

pub fn quantile_report(values: &[f64]) -> Result<QuantileReport> {
    if values.is_empty() {
        return Err(Error::InvalidInput("quantile report of no values".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("quantile report input contains NaN".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(QuantileReport {
        median: nearest_rank(&s, 0.5),
        p90: nearest_rank(&s, 0.9),
        p99: nearest_rank(&s, 0.99),
        top50_mean: smallest_mean(&s, 0.5),
        top90_mean: smallest_mean(&s, 0.9),
        top99_mean: smallest_mean(&s, 0.99),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    /// Mean over repetitions of the per-plan forward time.
    pub mean_ms: f64,
    pub std_ms: f64,
    pub repetitions: usize,
    pub plans: usize,
}

/// Wall-clock time of the model forward pass per already-featurized plan,
/// on the calling thread. One untimed warm-up pass precedes the timed ones.
pub fn time_inference(model: &CostModel, graphs: &[PlanGraph], repetitions: usize) -> Result<TimingStats> {
    if repetitions == 0 {
        return Err(Error::InvalidInput("timing needs at least one repetition".into()));
    }
    if graphs.is_empty() {
        return Err(Error::InvalidInput("timing needs at least one plan".into()));
    }
    for g in graphs {
        model.predict_output(g)?;
    }
    let mut per_plan = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        for g in graphs {
            std::hint::black_box(model.predict_output(g)?);
        }
        per_plan.push(start.elapsed().as_secs_f64() * 1e3 / graphs.len() as f64);
    }
    let n = per_plan.len() as f64;
    let mean = per_plan.iter().sum::<f64>() / n;
    let var = per_plan.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    Ok(TimingStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
        repetitions,
        plans: graphs.len(),
    })
}

/// One predicted/actual pair, kept for plot data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: String,
    pub plan_id: String,
    pub predicted_ms: f64,
    pub actual_ms: f64,
}

/// Cost-estimation results of one model (and optionally one fold).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tree_model: String,
    pub edge_direction: String,
    pub model_kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    pub q_error: QuantileReport,
    pub spearman: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inference: Option<TimingStats>,
    pub q_errors: Vec<f64>,
}

impl EvalReport {
    pub fn from_predictions(
        tree_model: &str,
        edge_direction: &str,
        model_kind: &str,
        predictions: &[Prediction],
    ) -> Result<Self> {
        let q_errors = predictions
            .iter()
            .map(|p| q_error(p.predicted_ms, p.actual_ms))
            .collect::<Result<Vec<_>>>()?;
        let predicted: Vec<f64> = predictions.iter().map(|p| p.predicted_ms).collect();
        let actual: Vec<f64> = predictions.iter().map(|p| p.actual_ms).collect();
        Ok(EvalReport {
            tree_model: tree_model.to_string(),
            edge_direction: edge_direction.to_string(),
            model_kind: model_kind.to_string(),
            fold: None,
            q_error: quantile_report(&q_errors)?,
            spearman: spearman(&predicted, &actual)?,
            inference: None,
            q_errors,
        })
    }
}

/// Plan-selection results of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub tree_model: String,
    pub model_kind: String,
    pub suboptimality: QuantileReport,
    pub per_query: Vec<(String, f64)>,
}

pub const COST_CSV_HEADER: &str =
    "tree_model,edge_direction,median_q_error,p90_q_error,p99_q_error,spearman,top50_mean_q_error,top99_mean_q_error";

pub const SELECTION_CSV_HEADER: &str =
    "tree_model,median_subopt,p90_subopt,p99_subopt,top50_mean_subopt,top90_mean_subopt,top99_mean_subopt";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per report, columns in the cost-estimation table order.
pub fn cost_report_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(COST_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let name = match r.fold {
            Some(f) => format!("{} (fold {f})", r.tree_model),
            None => r.tree_model.clone(),
        };
        let q = &r.q_error;
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            csv_field(&name),
            csv_field(&r.edge_direction),
            q.median,
            q.p90,
            q.p99,
            r.spearman,
            q.top50_mean,
            q.top99_mean
        )
        .unwrap();
    }
    out
}

pub fn selection_report_csv(reports: &[SelectionReport]) -> String {
    let mut out = String::from(SELECTION_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let s = &r.suboptimality;
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            csv_field(&r.tree_model),
            s.median,
            s.p90,
            s.p99,
            s.top50_mean,
            s.top90_mean,
            s.top99_mean
        )
        .unwrap();
    }
    out
}

/// Per-sample rows for external plotting.
pub fn plot_csv(model_kind: &str, predictions: &[Prediction]) -> String {
    let mut out = String::from("model_kind,query_id,plan_id,predicted_ms,actual_ms,q_error\n");
    for p in predictions {
        let q = q_error(p.predicted_ms, p.actual_ms).unwrap_or(f64::NAN);
        writeln!(
            out,
            "{},{},{},{:e},{:e},{:e}",
            csv_field(model_kind),
            csv_field(&p.query_id),
            csv_field(&p.plan_id),
            p.predicted_ms,
            p.actual_ms,
            q
        )
        .unwrap();
    }
    out
}

/// Mean of several fold reports' summary fields (per-sample errors pooled).
pub fn mean_report(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidInput("no fold reports to average".into()))?;
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        tree_model: first.tree_model.clone(),
        edge_direction: first.edge_direction.clone(),
        model_kind: first.model_kind.clone(),
        fold: None,
        q_error: QuantileReport {
            median: avg(&|r| r.q_error.median),
            p90: avg(&|r| r.q_error.p90),
            p99: avg(&|r| r.q_error.p99),
            top50_mean: avg(&|r| r.q_error.top50_mean),
            top90_mean: avg(&|r| r.q_error.top90_mean),
            top99_mean: avg(&|r| r.q_error.top99_mean),
        },
        spearman: avg(&|r| r.spearman),
        inference: None,
        q_errors: reports.iter().flat_map(|r| r.q_errors.iter().copied()).collect(),
    })
}
