mod common;

use common::{auc, brute_ece, pipeline_fixture, xor_data};
use qacal::gbdt::{calibrate_collection, fit, sigmoid, GbdtModel, GbdtParams, RegressionTree, TrainingData};
use qacal::metrics::{report, ItemMode};
use qacal::records::Split;
use qacal::scoring::confidences;

fn one_feature(rows: Vec<Vec<f64>>, labels: Vec<bool>) -> TrainingData {
    TrainingData {
        feature_names: vec!["x".into()],
        rows,
        labels,
    }
}

fn xor_training(rows: Vec<Vec<f64>>, labels: Vec<bool>) -> TrainingData {
    TrainingData {
        feature_names: vec!["a".into(), "b".into()],
        rows,
        labels,
    }
}

#[test]
fn depth_one_leaf_weights_by_hand() {
    // At margin 0 every row has p = 1/2, so g = 1/2 - y and h = 1/4.
    // Each leaf holds 50 rows: G = +-25, H = 12.5, weight = -G / (H + 1).
    let mut rows = vec![vec![0.0]; 50];
    rows.extend(vec![vec![1.0]; 50]);
    let mut labels = vec![false; 50];
    labels.extend(vec![true; 50]);
    let params = GbdtParams {
        max_depth: 1,
        parallel_trees: 1,
        subsample: 1.0,
        learning_rate: 1.0,
        num_rounds: 1,
        ..GbdtParams::default()
    };
    let model = fit(&one_feature(rows, labels), &params, 0).unwrap().model;
    let w = 25.0 / 13.5;
    assert!((model.margin(&[0.0]).unwrap() + w).abs() < 1e-9);
    assert!((model.margin(&[1.0]).unwrap() - w).abs() < 1e-9);
    let p_hi = 1.0 / (1.0 + (-w).exp());
    assert!((model.predict_row(&[1.0]).unwrap() - p_hi).abs() < 1e-9);
    assert!((model.predict_row(&[0.0]).unwrap() - (1.0 - p_hi)).abs() < 1e-9);
    assert!((p_hi - 0.8643).abs() < 1e-4);
}

#[test]
fn full_batch_training_loss_never_increases() {
    let (rows, labels) = xor_data(9, 1000);
    let params = GbdtParams {
        parallel_trees: 1,
        subsample: 1.0,
        ..GbdtParams::default()
    };
    let loss = fit(&xor_training(rows, labels), &params, 0).unwrap().training_loss;
    assert_eq!(loss.len(), 101);
    for w in loss.windows(2) {
        assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn learns_xor_on_held_out_rows() {
    let (rows, labels) = xor_data(21, 2000);
    let (train_rows, test_rows) = rows.split_at(1500);
    let (train_labels, test_labels) = labels.split_at(1500);
    let model = fit(
        &xor_training(train_rows.to_vec(), train_labels.to_vec()),
        &GbdtParams::default(),
        4,
    )
    .unwrap()
    .model;
    let scores: Vec<f64> = test_rows.iter().map(|r| model.predict_row(r).unwrap()).collect();
    let a = auc(&scores, test_labels);
    assert!(a > 0.95, "auc {a}");
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (rows, labels) = xor_data(2, 400);
    let data = xor_training(rows, labels);
    let params = GbdtParams {
        num_rounds: 20,
        ..GbdtParams::default()
    };
    let a = serde_json::to_string(&fit(&data, &params, 7).unwrap().model).unwrap();
    let b = serde_json::to_string(&fit(&data, &params, 7).unwrap().model).unwrap();
    let c = serde_json::to_string(&fit(&data, &params, 8).unwrap().model).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c, "subsampling should depend on the seed");
}

#[test]
fn trees_respect_max_depth() {
    let (rows, labels) = xor_data(5, 500);
    let data = xor_training(rows, labels);
    for depth in [0, 1, 2, 3, 6] {
        let params = GbdtParams {
            max_depth: depth,
            num_rounds: 5,
            ..GbdtParams::default()
        };
        let model = fit(&data, &params, 1).unwrap().model;
        assert!(model.rounds.iter().flatten().all(|t| t.depth() <= depth));
    }
}

#[test]
fn model_round_trips_through_json() {
    let (rows, labels) = xor_data(3, 300);
    let params = GbdtParams {
        num_rounds: 10,
        ..GbdtParams::default()
    };
    let model = fit(&xor_training(rows.clone(), labels), &params, 3).unwrap().model;
    let back: GbdtModel = serde_json::from_str(&serde_json::to_string(&model).unwrap()).unwrap();
    for r in &rows {
        assert_eq!(model.predict_row(r).unwrap().to_bits(), back.predict_row(r).unwrap().to_bits());
    }
}

#[test]
fn calibrated_collection_reports_ece_of_model_confidences() {
    let col = pipeline_fixture(30, 60, 2.0);
    let dev = col.split(Split::Dev);
    let params = GbdtParams {
        num_rounds: 20,
        ..GbdtParams::default()
    };
    let model = fit(&TrainingData::from_examples(dev.iter()), &params, 0).unwrap().model;
    let test = calibrate_collection(&model, &col.split(Split::Test)).unwrap();
    let rep = report(&test, 10, ItemMode::AllCandidates).unwrap();
    for r in &rep.per_dataset {
        let items: Vec<(f64, bool)> = test
            .iter()
            .filter(|e| e.dataset_id == r.dataset)
            .flat_map(|e| e.candidates.iter().map(|c| (c.confidence.unwrap(), c.is_gold)))
            .collect();
        assert!((r.ece - brute_ece(&items, 10)).abs() < 1e-12);
    }
}

#[test]
fn constant_model_ties_resolve_to_first_candidate() {
    let col = pipeline_fixture(31, 10, 1.0).split(Split::Test);
    let model = GbdtModel {
        params: GbdtParams::default(),
        seed: 0,
        feature_names: qacal::gbdt::FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        rounds: vec![vec![RegressionTree::leaf(3.0)]],
    };
    let out = calibrate_collection(&model, &col).unwrap();
    let want = sigmoid(0.1 * 3.0);
    for ex in out.iter() {
        let c = confidences(ex);
        assert_eq!(c.predicted_index, 0);
        assert!(c.values.iter().all(|v| *v == want));
    }
}
