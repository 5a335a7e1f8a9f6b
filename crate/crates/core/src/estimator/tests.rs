use std::f64::consts::E;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{grad_check, GradCheckConfig, Tensor};
use crate::plan::tests::catalog;
use crate::plan::{Comparator, Literal, PlanNode, Predicate};

fn plan(i: usize, v: f64) -> PlanTree {
    let scan = PlanNode::new("Seq Scan").with_tables(&["t1"]).with_predicates(vec![Predicate::Local {
        column: "t1.a".into(),
        comparator: Comparator::Le,
        value: Literal::Number(v),
    }]);
    let other = PlanNode::new("Index Scan").with_tables(&["t2"]);
    let root = PlanNode::new("Hash Join")
        .with_tables(&["t1", "t2"])
        .with_children(vec![scan, other]);
    PlanTree {
        query_id: format!("q{}", i / 2),
        plan_id: format!("p{i}"),
        latency_ms: Some(1.0 + v * v / 10.0),
        root,
    }
}

fn small_spec(kind: ModelKind) -> CostModelSpec {
    let mut spec = CostModelSpec::new(kind);
    spec.encoder = EncoderConfig { d_type: 3, d_col: 2 };
    spec.model.hidden = 6;
    spec.model.layers = 1;
    spec.head_hidden = vec![5, 4];
    spec
}

fn samples(model: &CostModel, n: usize, seed: u64) -> Vec<Sample> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| model.sample(&plan(i, r.random_range(0.0..100.0)), &catalog()).unwrap())
        .collect()
}

#[test]
fn loss_worked_examples() {
    let scaler = LabelScaler::fit(&[E, E * E, E.powi(3)]).unwrap();
    assert!((scaler.log_min - 1.0).abs() < 1e-15 && (scaler.log_max - 3.0).abs() < 1e-15);
    let s = LabelScaler::new(1.0, 3.0).unwrap();
    assert_eq!(loss(&[0.5], &[2f64.exp()], &s).unwrap(), 0.0);
    assert_eq!(loss(&[0.25], &[2f64.exp()], &s).unwrap(), 0.0625);
    let labels = [1f64.exp(), 1.5f64.exp(), 3f64.exp()];
    let perfect: Vec<f64> = labels.iter().map(|&y| s.scale(y).unwrap()).collect();
    assert_eq!(loss(&perfect, &labels, &s).unwrap(), 0.0);
}

#[test]
fn loss_rejects_bad_labels() {
    let s = LabelScaler::new(1.0, 3.0).unwrap();
    assert!(loss(&[0.5], &[0.0], &s).is_err());
    assert!(loss(&[0.5], &[-2.0], &s).is_err());
    assert!(LabelScaler::new(2.0, 2.0).is_err());
    assert!(LabelScaler::fit(&[5.0, 5.0]).is_err());
}

#[test]
fn unscale_inverts_scale() {
    let s = LabelScaler::new(1.0, 3.0).unwrap();
    assert!((s.unscale(0.0) - E).abs() < 1e-12);
    assert!((s.unscale(1.0) - E.powi(3)).abs() < 1e-12);
    for y in [0.0, 0.1, 0.5, 0.93, 1.0, 1.4, -0.2] {
        assert!((s.scale(s.unscale(y)).unwrap() - y).abs() < 1e-12);
    }
    // Validation labels beyond the training range are not clamped.
    assert!(s.scale(4f64.exp()).unwrap() > 1.0);
}

#[test]
fn head_with_zero_weights_outputs_half() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let head = MlpHead::new(&mut store, 4, &[3, 2], &mut r).unwrap();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.tensor(id).shape().to_vec();
        store.set_tensor(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut tape = Tape::default();
    let x = tape.constant(Tensor::row(&[1.0, -2.0, 3.0, 0.5]));
    let y = head.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5]);
}

#[test]
fn head_output_is_in_unit_interval_and_differentiable() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let head = MlpHead::new(&mut store, 4, &[3, 2], &mut r).unwrap();
    for scale in [1e-3, 1.0, 10.0] {
        let mut tape = Tape::default();
        let x = tape.constant(Tensor::row(&[scale, -scale, 0.3 * scale, 2.0 * scale]));
        let y = head.forward(&mut tape, &store, x).unwrap();
        let y = tape.value(y).data()[0];
        assert!(y > 0.0 && y < 1.0);
    }
    let x = Tensor::row(&[0.4, -0.1, 0.7, 0.2]);
    let report = grad_check(
        |tape, store| {
            let xv = tape.constant(x.clone());
            head.forward(tape, store, xv)
        },
        &store,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn cost_model_loss_passes_grad_check() {
    // Gradients reaching the tree through the head can be ~1e-9, where
    // central differences of an O(1) output carry ~1e-14 roundoff; a 1e-6
    // floor keeps the comparison meaningful for those coordinates.
    let cat = catalog();
    let cfg = GradCheckConfig {
        floor: 1e-6,
        ..GradCheckConfig::default()
    };
    for seed in 0..10 {
        let model = CostModel::new(&cat, &small_spec(ModelKind::Bigg), seed).unwrap();
        let g = model.prepare(&plan(0, 40.0), &cat).unwrap();
        let report = grad_check(
            |tape, store| {
                let mut m = model.clone();
                m.store = store.clone();
                let y = m.forward(tape, &g, &mut Mode::eval())?;
                let t = tape.constant(Tensor::scalar(0.9));
                let d = tape.sub(y, t)?;
                tape.mul(d, d)
            },
            &model.store,
            &cfg,
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

#[test]
fn construction_is_deterministic_and_seed_sensitive() {
    let cat = catalog();
    let spec = small_spec(ModelKind::Bigg);
    let a = CostModel::new(&cat, &spec, 7).unwrap();
    let b = CostModel::new(&cat, &spec, 7).unwrap();
    let c = CostModel::new(&cat, &spec, 8).unwrap();
    assert_eq!(a.to_checkpoint_bytes().unwrap(), b.to_checkpoint_bytes().unwrap());
    assert_ne!(a.to_checkpoint_bytes().unwrap(), c.to_checkpoint_bytes().unwrap());
}

#[test]
fn patience_zero_runs_one_epoch() {
    let cat = catalog();
    let mut model = CostModel::new(&cat, &small_spec(ModelKind::Bigg), 1).unwrap();
    let data = samples(&model, 12, 1);
    let cfg = TrainConfig {
        patience: 0,
        max_epochs: 50,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let report = fit(&mut model, &data[..8], &data[8..], &cfg).unwrap();
    assert_eq!(report.epochs.len(), 1);
    assert_eq!(model.training.unwrap().epochs_run, 1);
}

#[test]
fn training_is_bitwise_reproducible() {
    let cat = catalog();
    let run = || {
        let mut model = CostModel::new(&cat, &small_spec(ModelKind::Bigg), 1).unwrap();
        let data = samples(&model, 16, 2);
        let cfg = TrainConfig {
            max_epochs: 4,
            batch_size: 5,
            seed: 11,
            ..TrainConfig::default()
        };
        let report = fit(&mut model, &data[..12], &data[12..], &cfg).unwrap();
        (model.to_checkpoint_bytes().unwrap(), report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn training_reduces_loss_and_keeps_best_epoch() {
    let cat = catalog();
    let mut model = CostModel::new(&cat, &small_spec(ModelKind::Bigg), 4).unwrap();
    let data = samples(&model, 24, 3);
    let cfg = TrainConfig {
        max_epochs: 60,
        batch_size: 8,
        learning_rate: 1e-2,
        patience: 60,
        ..TrainConfig::default()
    };
    let report = fit(&mut model, &data[..20], &data[20..], &cfg).unwrap();
    let first = report.epochs[0].train_loss;
    let last = report.epochs.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    let best = report
        .epochs
        .iter()
        .map(|e| e.valid_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_valid_loss, best);
    let outs: Vec<f64> = data[20..].iter().map(|s| model.predict_output(&s.graph).unwrap()).collect();
    let labels: Vec<f64> = data[20..].iter().map(|s| s.latency_ms).collect();
    assert_eq!(loss(&outs, &labels, model.scaler().unwrap()).unwrap(), best);
}

#[test]
fn scaler_comes_from_training_split_only() {
    let cat = catalog();
    let mut model = CostModel::new(&cat, &small_spec(ModelKind::Gru), 1).unwrap();
    let mut data = samples(&model, 10, 4);
    data[9].latency_ms = 1e6;
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    fit(&mut model, &data[..8], &data[8..], &cfg).unwrap();
    let from_train = LabelScaler::fit(&data[..8].iter().map(|s| s.latency_ms).collect::<Vec<_>>()).unwrap();
    let from_all = LabelScaler::fit(&data.iter().map(|s| s.latency_ms).collect::<Vec<_>>()).unwrap();
    assert_eq!(model.scaler, Some(from_train));
    assert_ne!(model.scaler, Some(from_all));
}

#[test]
fn fit_rejects_empty_splits() {
    let cat = catalog();
    let mut model = CostModel::new(&cat, &small_spec(ModelKind::Gru), 1).unwrap();
    let data = samples(&model, 4, 5);
    assert!(fit(&mut model, &[], &data, &TrainConfig::default()).is_err());
    assert!(fit(&mut model, &data, &[], &TrainConfig::default()).is_err());
}

#[test]
fn kfold_partitions_by_query() {
    let ids: Vec<String> = (0..10).map(|i| format!("q{i}")).collect();
    let folds = kfold(&ids, 10, 3).unwrap();
    assert_eq!(folds.len(), 10);
    let mut seen: Vec<usize> = folds.iter().flat_map(|(_, t)| t.clone()).collect();
    assert!(folds.iter().all(|(tr, t)| t.len() == 1 && tr.len() == 9));
    seen.sort();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());

    // 7 queries with 13 candidates each.
    let ids: Vec<String> = (0..91).map(|i| format!("q{}", i / 13)).collect();
    let folds = kfold(&ids, 3, 9).unwrap();
    let mut all = Vec::new();
    for (train, test) in &folds {
        assert_eq!(train.len() + test.len(), 91);
        assert_eq!(test.len() % 13, 0);
        for &i in test {
            assert!(!train.iter().any(|&j| ids[j] == ids[i]));
        }
        all.extend(test.iter().copied());
    }
    all.sort();
    assert_eq!(all, (0..91).collect::<Vec<_>>());
    let sizes: Vec<usize> = folds.iter().map(|(_, t)| t.len() / 13).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    assert_eq!(kfold(&ids, 3, 9).unwrap(), folds);
    assert!(kfold(&ids, 1, 0).is_err());
    assert!(kfold(&ids, 8, 0).is_err());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cat = catalog();
    for kind in [ModelKind::Bigg, ModelKind::TreeCnn] {
        let mut model = CostModel::new(&cat, &small_spec(kind), 5).unwrap();
        let data = samples(&model, 10, 6);
        let cfg = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        fit(&mut model, &data[..8], &data[8..], &cfg).unwrap();
        let bytes = model.to_checkpoint_bytes().unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let loaded = CostModel::from_checkpoint_bytes(&bytes, &cat).unwrap();
        assert_eq!(loaded.to_checkpoint_bytes().unwrap(), bytes);
        for s in &data {
            let a = model.predict_latency_ms(&s.graph).unwrap();
            let b = loaded.predict_latency_ms(&s.graph).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn checkpoint_rejects_corruption_and_foreign_catalogs() {
    let cat = catalog();
    let model = CostModel::new(&cat, &small_spec(ModelKind::Lstm), 5).unwrap();
    let bytes = model.to_checkpoint_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(CostModel::from_checkpoint_bytes(&bad, &cat), Err(Error::Checkpoint(_))));
    assert!(CostModel::from_checkpoint_bytes(&bytes[..bytes.len() - 8], &cat).is_err());
    let mut other = cat.clone();
    other.tables[1].row_count += 1;
    assert!(matches!(CostModel::from_checkpoint_bytes(&bytes, &other), Err(Error::Checkpoint(_))));
}

#[test]
fn untrained_model_cannot_predict_latency() {
    let cat = catalog();
    let model = CostModel::new(&cat, &small_spec(ModelKind::Gru), 5).unwrap();
    let g = model.prepare(&plan(0, 10.0), &cat).unwrap();
    assert!(model.predict_latency_ms(&g).is_err());
    let y = model.predict_output(&g).unwrap();
    assert!(y > 0.0 && y < 1.0);
}


#[test]
fn plan_gradients_check_for_every_kind() {
    let catalog = super::gradcheck_catalog().unwrap();
    for kind in ModelKind::ALL {
        for seed in 0..2 {
            let plan = super::small_plan(&catalog, seed).unwrap();
            assert!((3..=8).contains(&plan.node_count()));
            // Attention key biases have exactly-zero gradients (softmax is
            // shift invariant); central differences there are pure roundoff
            // of a few 1e-12, so the denominator floor is raised to 1e-6.
            let cfg = GradCheckConfig {
                floor: 1e-6,
                ..GradCheckConfig::default()
            };
            let r = super::check_plan_gradients(kind, &catalog, &plan, seed, &cfg).unwrap();
            assert!(r.passed, "{kind} seed {seed}: {:.3e} at {:?}", r.max_relative_error, r.offending_parameter);
        }
    }
}

