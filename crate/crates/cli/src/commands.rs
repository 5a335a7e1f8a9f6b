use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bigg_core::encoder::PlanGraph;
use bigg_core::estimator::{
    check_plan_gradients, fit, gradcheck_catalog, kfold, load_checkpoint, save_checkpoint, small_plan, CostModel,
    Sample, TrainReport,
};
use bigg_core::metrics::{
    cost_report_csv, mean_report, plan_suboptimality, plot_csv, quantile_report, selection_report_csv,
    time_inference, EvalReport, Prediction, SelectionReport, TimingStats,
};
use bigg_core::models::ModelKind;
use bigg_core::numerics::{derive_seed, GradCheckConfig};
use bigg_core::plan::{Catalog, PlanNode, PlanTree};
use bigg_core::workload::{gen_catalog, gen_dataset, load_dataset, Dataset};
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::GlobalOpts;

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub candidates_per_query: Option<usize>,
    /// Lognormal latency noise sigma.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub tables: Option<usize>,
    #[arg(long)]
    pub max_joins: Option<usize>,
    /// Use this catalog JSON instead of generating one.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Cross-validate over all plans with this many folds.
    #[arg(long)]
    pub kfold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Debug: use true latencies as predictions.
    #[arg(long)]
    pub oracle: bool,
    /// Timing repetitions per checkpoint.
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Debug: use true latencies as predictions.
    #[arg(long)]
    pub oracle: bool,
    /// Add a row for uniformly random plan choice.
    #[arg(long)]
    pub random_baseline: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Restrict to one model kind.
    #[arg(long)]
    pub model: Option<String>,
    /// Random plans per model kind.
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    /// Negative control: flip analytic gradients.
    #[arg(long)]
    pub corrupt: bool,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Floor of the relative-error denominator.
    #[arg(long)]
    pub floor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, default_value = "test")]
    pub split: String,
}

fn parse_kind(s: &str) -> Result<ModelKind, CliError> {
    Ok(s.parse::<ModelKind>()?)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(bigg_core::Error::from)?;
    fs::write(path, bytes)?;
    Ok(())
}

fn split<'a>(ds: &'a Dataset, name: &str) -> Result<&'a [PlanTree], CliError> {
    let plans = ds
        .split(name)
        .ok_or_else(|| CliError::Usage(format!("unknown split `{name}` (train, valid, test)")))?;
    if plans.is_empty() {
        return Err(CliError::Usage(format!("split `{name}` is empty")));
    }
    Ok(plans)
}

fn is_binary(n: &PlanNode) -> bool {
    matches!(n.children.len(), 0 | 2) && n.children.iter().all(is_binary)
}

fn samples(model: &CostModel, plans: &[PlanTree], catalog: &Catalog) -> Result<Vec<Sample>, CliError> {
    if model.kind().needs_binary_tree() {
        let n = plans.iter().filter(|p| !is_binary(&p.root)).count();
        if n > 0 {
            log::info!("binarizing {n} non-binary plan(s) for {}", model.kind());
        }
    }
    Ok(plans
        .par_iter()
        .map(|p| model.sample(p, catalog))
        .collect::<bigg_core::Result<Vec<_>>>()?)
}

fn graphs(model: &CostModel, plans: &[PlanTree], catalog: &Catalog) -> Result<Vec<PlanGraph>, CliError> {
    Ok(plans
        .par_iter()
        .map(|p| model.prepare(p, catalog))
        .collect::<bigg_core::Result<Vec<_>>>()?)
}

fn actual(p: &PlanTree) -> Result<f64, CliError> {
    p.latency_ms
        .ok_or_else(|| CliError::Usage(format!("plan {} has no latency", p.plan_id)))
}

fn predictions(model: Option<&CostModel>, plans: &[PlanTree], catalog: &Catalog) -> Result<Vec<Prediction>, CliError> {
    let predicted = match model {
        Some(m) => {
            let g = graphs(m, plans, catalog)?;
            m.predict_many(&g.iter().collect::<Vec<_>>())?
        }
        None => plans.iter().map(actual).collect::<Result<_, _>>()?,
    };
    plans
        .iter()
        .zip(predicted)
        .map(|(p, predicted_ms)| {
            Ok(Prediction {
                query_id: p.query_id.clone(),
                plan_id: p.plan_id.clone(),
                predicted_ms,
                actual_ms: actual(p)?,
            })
        })
        .collect()
}

fn model_report(model: &CostModel, preds: &[Prediction]) -> Result<EvalReport, CliError> {
    let k = model.kind();
    Ok(EvalReport::from_predictions(k.label(), k.edge_direction(), k.as_str(), preds)?)
}

fn curve_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,train_loss,valid_loss\n");
    for e in &report.epochs {
        out.push_str(&format!("{},{:e},{:e}\n", e.epoch, e.train_loss, e.valid_loss));
    }
    out
}

pub fn gen_data(g: &GlobalOpts, mut cfg: RunConfig, a: &GenDataArgs) -> Result<(), CliError> {
    if g.out.exists() && fs::read_dir(&g.out)?.next().is_some() && !g.force {
        return Err(CliError::Usage(format!(
            "output directory {} is not empty (pass --force to overwrite)",
            g.out.display()
        )));
    }
    if let Some(q) = a.queries {
        cfg.data.queries = q;
    }
    if let Some(k) = a.candidates_per_query {
        cfg.data.candidates_per_query = k;
    }
    if let Some(s) = a.noise {
        cfg.generator.noise_sigma = s;
    }
    if let Some(t) = a.tables {
        cfg.generator.n_tables = t;
    }
    if let Some(j) = a.max_joins {
        cfg.generator.max_joins = j;
    }
    let catalog = match &a.catalog {
        Some(p) => Catalog::from_json(&fs::read(p)?)?,
        None => gen_catalog(&cfg.generator)?,
    };
    let ds = gen_dataset(
        &catalog,
        &cfg.generator,
        cfg.data.queries,
        cfg.data.candidates_per_query,
        cfg.data.ratios,
    )?;
    ds.write(&g.out)?;
    cfg.echo(&g.out)?;
    log::info!(
        "wrote {} train / {} valid / {} test plans to {}",
        ds.train.len(),
        ds.valid.len(),
        ds.test.len(),
        g.out.display()
    );
    Ok(())
}

struct FoldResult {
    report: EvalReport,
    train: TrainReport,
}

pub fn train(g: &GlobalOpts, mut cfg: RunConfig, a: &TrainArgs) -> Result<(), CliError> {
    if let Some(m) = &a.model {
        cfg.model.kind = parse_kind(m)?;
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(p) = a.patience {
        cfg.train.patience = p;
    }
    if let Some(d) = a.dropout {
        cfg.train.dropout = d;
    }
    if let Some(h) = a.hidden {
        cfg.model.hidden = h;
    }
    if let Some(l) = a.layers {
        cfg.model.layers = l;
    }
    if let Some(k) = a.kfold {
        cfg.train.folds = k;
    }
    cfg.train.validate()?;
    let ds = load_dataset(&a.data)?;
    let catalog = &ds.catalog;
    let spec = cfg.spec();
    spec.model.validate()?;
    ensure_dir(&g.out)?;
    cfg.echo(&g.out)?;

    let Some(k) = a.kfold else {
        let mut model = CostModel::new(catalog, &spec, cfg.seed)?;
        let train = samples(&model, &ds.train, catalog)?;
        let valid = samples(&model, &ds.valid, catalog)?;
        if valid.is_empty() {
            return Err(CliError::Usage("dataset has an empty validation split".into()));
        }
        let report = fit(&mut model, &train, &valid, &cfg.train)?;
        save_checkpoint(&model, &g.out.join("model.ckpt"))?;
        fs::write(g.out.join("curve.csv"), curve_csv(&report))?;
        write_json(&g.out.join("train.json"), &report)?;
        log::info!(
            "{}: {} epochs, best epoch {} (valid loss {:.6})",
            model.kind(),
            report.epochs.len(),
            report.best_epoch,
            report.best_valid_loss
        );
        return Ok(());
    };

    let plans: Vec<PlanTree> = ds.train.iter().chain(&ds.valid).chain(&ds.test).cloned().collect();
    let qids: Vec<String> = plans.iter().map(|p| p.query_id.clone()).collect();
    let folds = kfold(&qids, k, cfg.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| plans[i].clone()).collect::<Vec<_>>();
    let results: Vec<FoldResult> = (0..k)
        .into_par_iter()
        .map(|f| -> Result<FoldResult, CliError> {
            let test_idx = &folds[f].1;
            let valid_idx = &folds[(f + 1) % k].1;
            let train_idx: Vec<usize> = folds[f].0.iter().copied().filter(|i| !valid_idx.contains(i)).collect();
            let fold_seed = derive_seed(cfg.seed, &[f as u64]);
            let mut model = CostModel::new(catalog, &spec, fold_seed)?;
            let train = samples(&model, &pick(&train_idx), catalog)?;
            let valid = samples(&model, &pick(valid_idx), catalog)?;
            let tc = bigg_core::estimator::TrainConfig {
                seed: fold_seed,
                ..cfg.train.clone()
            };
            let train_report = fit(&mut model, &train, &valid, &tc)?;
            let dir = g.out.join(format!("fold-{f}"));
            ensure_dir(&dir)?;
            save_checkpoint(&model, &dir.join("model.ckpt"))?;
            fs::write(dir.join("curve.csv"), curve_csv(&train_report))?;
            let preds = predictions(Some(&model), &pick(test_idx), catalog)?;
            let mut report = model_report(&model, &preds)?;
            report.fold = Some(f);
            log::info!("fold {f}: median q-error {:.4}", report.q_error.median);
            Ok(FoldResult {
                report,
                train: train_report,
            })
        })
        .collect::<Result<_, _>>()?;
    let reports: Vec<EvalReport> = results.iter().map(|r| r.report.clone()).collect();
    let mean = mean_report(&reports)?;
    let mut rows = reports.clone();
    rows.push(mean.clone());
    fs::write(g.out.join("report.csv"), cost_report_csv(&rows))?;
    #[derive(Serialize)]
    struct KfoldReport<'a> {
        folds: &'a [EvalReport],
        mean: &'a EvalReport,
        training: Vec<&'a TrainReport>,
    }
    write_json(
        &g.out.join("report.json"),
        &KfoldReport {
            folds: &reports,
            mean: &mean,
            training: results.iter().map(|r| &r.train).collect(),
        },
    )?;
    log::info!("{k}-fold mean median q-error {:.4}", mean.q_error.median);
    Ok(())
}

fn load_models(paths: &[PathBuf], catalog: &Catalog) -> Result<Vec<CostModel>, CliError> {
    paths
        .iter()
        .map(|p| {
            if !p.exists() {
                return Err(CliError::Usage(format!("checkpoint {} does not exist", p.display())));
            }
            Ok(load_checkpoint(p, catalog)?)
        })
        .collect()
}

pub fn eval(g: &GlobalOpts, cfg: RunConfig, a: &EvalArgs) -> Result<(), CliError> {
    if a.checkpoint.is_empty() && !a.oracle {
        return Err(CliError::Usage("eval needs --checkpoint or --oracle".into()));
    }
    let ds = load_dataset(&a.data)?;
    let plans = split(&ds, &a.split)?;
    let models = load_models(&a.checkpoint, &ds.catalog)?;
    ensure_dir(&g.out)?;
    cfg.echo(&g.out)?;

    let mut reports = Vec::new();
    let mut plot = String::new();
    let mut timings: BTreeMap<String, TimingStats> = BTreeMap::new();
    if a.oracle {
        let preds = predictions(None, plans, &ds.catalog)?;
        reports.push(EvalReport::from_predictions("Oracle", "-", "oracle", &preds)?);
        plot.push_str(&plot_csv("oracle", &preds));
    }
    for (m, path) in models.iter().zip(&a.checkpoint) {
        let preds = predictions(Some(m), plans, &ds.catalog)?;
        reports.push(model_report(m, &preds)?);
        let body = plot_csv(m.kind().as_str(), &preds);
        if plot.is_empty() {
            plot.push_str(&body);
        } else {
            plot.push_str(body.split_once('\n').map(|(_, rest)| rest).unwrap_or(""));
        }
        if a.reps > 0 {
            let gs = graphs(m, plans, &ds.catalog)?;
            timings.insert(path.display().to_string(), time_inference(m, &gs, a.reps)?);
        }
    }
    for r in &reports {
        log::info!(
            "{}: median q-error {:.4}, spearman {:.4}",
            r.tree_model,
            r.q_error.median,
            r.spearman
        );
    }
    fs::write(g.out.join("report.csv"), cost_report_csv(&reports))?;
    write_json(&g.out.join("report.json"), &reports)?;
    fs::write(g.out.join("plot.csv"), plot)?;
    if !timings.is_empty() {
        write_json(&g.out.join("timing.json"), &timings)?;
    }
    Ok(())
}

/// Plans grouped by query id, in order of first appearance.
fn candidate_sets(plans: &[PlanTree]) -> Vec<(String, Vec<&PlanTree>)> {
    let mut order: Vec<(String, Vec<&PlanTree>)> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for p in plans {
        let i = *index.entry(p.query_id.as_str()).or_insert_with(|| {
            order.push((p.query_id.clone(), Vec::new()));
            order.len() - 1
        });
        order[i].1.push(p);
    }
    order
}

fn selection_report(
    tree_model: &str,
    model_kind: &str,
    sets: &[(String, Vec<&PlanTree>)],
    preds: &BTreeMap<&str, f64>,
) -> Result<SelectionReport, CliError> {
    let per_query = sets
        .iter()
        .map(|(q, plans)| {
            let pairs = plans
                .iter()
                .map(|p| Ok((preds[p.plan_id.as_str()], actual(p)?)))
                .collect::<Result<Vec<_>, CliError>>()?;
            Ok((q.clone(), plan_suboptimality(&pairs)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let values: Vec<f64> = per_query.iter().map(|(_, v)| *v).collect();
    Ok(SelectionReport {
        tree_model: tree_model.to_string(),
        model_kind: model_kind.to_string(),
        suboptimality: quantile_report(&values)?,
        per_query,
    })
}

pub fn select(g: &GlobalOpts, cfg: RunConfig, a: &SelectArgs) -> Result<(), CliError> {
    if a.checkpoint.is_empty() && !a.oracle && !a.random_baseline {
        return Err(CliError::Usage("select needs --checkpoint, --oracle or --random-baseline".into()));
    }
    let ds = load_dataset(&a.data)?;
    let plans = split(&ds, &a.split)?;
    let models = load_models(&a.checkpoint, &ds.catalog)?;
    let sets = candidate_sets(plans);
    ensure_dir(&g.out)?;
    cfg.echo(&g.out)?;

    let mut reports = Vec::new();
    if a.oracle {
        let preds = plans.iter().map(|p| Ok((p.plan_id.as_str(), actual(p)?))).collect::<Result<_, CliError>>()?;
        reports.push(selection_report("Oracle", "oracle", &sets, &preds)?);
    }
    for m in &models {
        let ps = predictions(Some(m), plans, &ds.catalog)?;
        let preds = plans.iter().zip(&ps).map(|(p, x)| (p.plan_id.as_str(), x.predicted_ms)).collect();
        let k = m.kind();
        reports.push(selection_report(k.label(), k.as_str(), &sets, &preds)?);
    }
    if a.random_baseline {
        // A random score per plan makes the argmin a uniform choice.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5e1e]));
        let preds = plans.iter().map(|p| (p.plan_id.as_str(), rng.random::<f64>())).collect();
        reports.push(selection_report("Random choice", "random", &sets, &preds)?);
    }
    for r in &reports {
        log::info!("{}: median suboptimality {:.4}", r.tree_model, r.suboptimality.median);
    }
    fs::write(g.out.join("report.csv"), selection_report_csv(&reports))?;
    write_json(&g.out.join("report.json"), &reports)?;
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRow {
    model_kind: String,
    seed: usize,
    nodes: usize,
    coordinates: usize,
    max_relative_error: f64,
    offending_parameter: Option<String>,
    passed: bool,
}

pub fn gradcheck(g: &GlobalOpts, cfg: RunConfig, a: &GradcheckArgs) -> Result<(), CliError> {
    let kinds: Vec<ModelKind> = match &a.model {
        Some(m) => vec![parse_kind(m)?],
        None => ModelKind::ALL.to_vec(),
    };
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let mut gc = GradCheckConfig {
        corrupt: a.corrupt,
        ..GradCheckConfig::default()
    };
    if let Some(e) = a.epsilon {
        gc.epsilon = e;
    }
    if let Some(t) = a.tolerance {
        gc.tolerance = t;
    }
    if let Some(f) = a.floor {
        gc.floor = f;
    }
    let catalog = gradcheck_catalog()?;
    let jobs: Vec<(ModelKind, usize)> = kinds.iter().flat_map(|&k| (0..a.seeds).map(move |s| (k, s))).collect();
    let rows: Vec<GradcheckRow> = jobs
        .par_iter()
        .map(|&(kind, s)| -> Result<GradcheckRow, CliError> {
            let seed = derive_seed(cfg.seed, &[s as u64]);
            let plan = small_plan(&catalog, seed)?;
            let r = check_plan_gradients(kind, &catalog, &plan, seed, &gc)?;
            Ok(GradcheckRow {
                model_kind: kind.as_str().to_string(),
                seed: s,
                nodes: plan.node_count(),
                coordinates: r.coordinates_checked,
                max_relative_error: r.max_relative_error,
                offending_parameter: r.offending_parameter,
                passed: r.passed,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut csv = String::from("model_kind,seed,nodes,coordinates,max_relative_error,offending_parameter,passed\n");
    for r in &rows {
        println!(
            "{:<20} seed {:>2}  nodes {}  max rel err {:.3e}  {}",
            r.model_kind,
            r.seed,
            r.nodes,
            r.max_relative_error,
            if r.passed { "PASS" } else { "FAIL" }
        );
        csv.push_str(&format!(
            "{},{},{},{},{:e},{},{}\n",
            r.model_kind,
            r.seed,
            r.nodes,
            r.coordinates,
            r.max_relative_error,
            r.offending_parameter.as_deref().unwrap_or(""),
            r.passed
        ));
    }
    ensure_dir(&g.out)?;
    cfg.echo(&g.out)?;
    fs::write(g.out.join("gradcheck.csv"), csv)?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::CheckFailed(format!(
            "{failed} of {} gradient checks failed (tolerance {:e})",
            rows.len(),
            gc.tolerance
        )));
    }
    println!("all {} gradient checks passed", rows.len());
    Ok(())
}

pub fn bench(g: &GlobalOpts, cfg: RunConfig, a: &BenchArgs) -> Result<(), CliError> {
    let reps = a.reps.unwrap_or(cfg.bench.reps);
    if reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    let ds = load_dataset(&a.data)?;
    let plans = split(&ds, &a.split)?;
    let models = load_models(&a.checkpoint, &ds.catalog)?;
    ensure_dir(&g.out)?;
    cfg.echo(&g.out)?;
    let mut csv = String::from("model_kind,tree_model,checkpoint,plans,repetitions,mean_ms,std_ms\n");
    for (m, path) in models.iter().zip(&a.checkpoint) {
        let gs = graphs(m, plans, &ds.catalog)?;
        let t = time_inference(m, &gs, reps)?;
        log::info!("{}: {:.4} ms/plan (std {:.4})", m.kind(), t.mean_ms, t.std_ms);
        csv.push_str(&format!(
            "{},\"{}\",{},{},{},{:e},{:e}\n",
            m.kind().as_str(),
            m.kind().label(),
            path.display(),
            t.plans,
            t.repetitions,
            t.mean_ms,
            t.std_ms
        ));
    }
    fs::write(g.out.join("bench.csv"), csv)?;
    Ok(())
}
