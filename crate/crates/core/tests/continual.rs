// SPDX-License-Identifier: Apache-2.0

mod common;

use contood::continual::{
    detect_batch, fixed_eta_baseline, loocv_eta, on_detection, run_protocol, ContinualState,
    ProtocolConfig, Verdict,
};
use contood::data::class_means;
use contood::model::NetworkState;
use contood::oracle::{dense_grid_max, DENSE_GRID_POINTS};
use contood::reporting::Method;
use contood::scoring::{build_score_table, Decision};
use contood::search::search_inputs;
use contood::Error;

use common::{clusters, synthetic_config};

fn weights_equal(a: &NetworkState, b: &NetworkState) -> bool {
    a.max_abs_diff(b) == 0.0 && a.head == b.head
}

#[test]
fn loocv_on_separated_clusters() {
    let data = clusters(3, 3, 11);
    let cfg = synthetic_config(11);
    let r = loocv_eta(&data.id_train.split_by_class(), &cfg).unwrap();
    assert_eq!(r.per_class_etas.len(), 3);
    let mean = r.per_class_etas.iter().sum::<f64>() / 3.0;
    assert_eq!(r.eta0, mean);
    for s in &r.searches {
        assert!(s.metric_value >= 0.95, "fold metric {}", s.metric_value);
    }
}

#[test]
fn loocv_needs_three_classes() {
    let data = clusters(3, 2, 3);
    let err = loocv_eta(&data.id_train.split_by_class(), &synthetic_config(3)).unwrap_err();
    assert!(matches!(err, Error::Value(_)));
}

#[test]
fn accommodation_accepts_the_new_class() {
    let data = clusters(4, 3, 5);
    let cfg = synthetic_config(5);
    let mut state =
        ContinualState::initialize(&data.id_train, data.id_classes.clone(), 1.0, &cfg).unwrap();
    let novel = &data.stream[0];
    let before = state.eta();
    let found = on_detection(&mut state, 0, &novel.train, novel.class_id, &cfg).unwrap();

    assert_eq!(state.n_classes(), 4);
    assert_eq!(state.policy.stats.n_classes(), 4);
    assert_eq!(state.stored_train.len(), 4);
    assert_eq!(state.eta(), (before + found.eta_star) / 2.0);

    // nearest training mean classifies the held-out samples perfectly
    let means = class_means(
        &contood::data::LabeledDataset::concat(&[
            &data.id_train,
            &novel.train.with_label(3, 4).unwrap(),
        ])
        .unwrap(),
    );
    let test = novel.test.to_f64();
    let nearest_ok = test
        .rows()
        .into_iter()
        .filter(|x| {
            let d: Vec<f64> = means
                .rows()
                .into_iter()
                .map(|m| (&m - x).mapv(|v| v * v).sum())
                .collect();
            contood::scoring::argmax(&d.iter().map(|v| -v).collect::<Vec<_>>()) == 3
        })
        .count();
    assert_eq!(nearest_ok, novel.test.len());

    let table = build_score_table(&state.net, &novel.test, true).unwrap();
    let accepted = table
        .rows
        .iter()
        .filter(|r| state.policy.decide(&r.scores) == Decision::Id(3))
        .count();
    let rate = accepted as f64 / table.len() as f64;
    assert!(rate >= 0.9, "new class acceptance {rate}");
}

#[test]
fn recomputing_stats_leaves_weights_and_eta() {
    let data = clusters(4, 3, 8);
    let cfg = synthetic_config(8);
    let mut state =
        ContinualState::initialize(&data.id_train, data.id_classes.clone(), 1.7, &cfg).unwrap();
    on_detection(
        &mut state,
        0,
        &data.stream[0].train,
        data.stream[0].class_id,
        &cfg,
    )
    .unwrap();
    let net = state.net.clone();
    let eta = state.eta();
    let stats = state.policy.stats.clone();
    state.recompute_stats().unwrap();
    assert!(weights_equal(&net, &state.net));
    assert_eq!(eta.to_bits(), state.eta().to_bits());
    assert_eq!(stats, state.policy.stats);
}

#[test]
fn empty_stream_reports_the_initial_evaluation() {
    let data = clusters(3, 3, 2);
    let out = run_protocol(
        &data.id_train,
        &data.id_test,
        &data.id_classes,
        &[],
        &synthetic_config(2),
    )
    .unwrap();
    assert_eq!(out.reports.len(), Method::ALL.len());
    for r in &out.reports {
        assert_eq!((r.stage, r.n_id_classes), (0, 3));
        assert_eq!(r.acc_ood, 1.0);
    }
    assert!(out.lookahead.is_empty());
}

#[test]
fn reports_cover_every_stage() {
    let data = clusters(5, 3, 4);
    let out = run_protocol(
        &data.id_train,
        &data.id_test,
        &data.id_classes,
        &data.stream,
        &synthetic_config(4),
    )
    .unwrap();
    assert_eq!(out.reports.len(), 2 * Method::ALL.len());
    let sizes: Vec<usize> = out.reports.iter().map(|r| r.n_id_classes).collect();
    assert_eq!(sizes, vec![3, 3, 3, 4, 4, 4]);
    assert_eq!(out.state.n_classes(), 5);
    assert_eq!(out.state.known_classes.len(), 5);
    for r in &out.reports {
        assert!((r.total - (r.acc_id + r.acc_ood) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn lookahead_matches_dense_grid_every_stage() {
    let data = clusters(5, 3, 6);
    let cfg = synthetic_config(6);
    let mut state =
        ContinualState::initialize(&data.id_train, data.id_classes.clone(), 1.0, &cfg).unwrap();
    for (stage, novel) in data.stream.iter().enumerate() {
        let ids: Vec<&_> = state.stored_train.iter().collect();
        let id_all = contood::data::LabeledDataset::concat(&ids).unwrap();
        let id_table = build_score_table(&state.net, &id_all, false).unwrap();
        let ood_table = build_score_table(&state.net, &novel.train, true).unwrap();
        let (id_z, ood_z) = search_inputs(&id_table, &ood_table, &state.policy.stats).unwrap();
        let found = on_detection(&mut state, stage, &novel.train, novel.class_id, &cfg).unwrap();
        let grid = dense_grid_max(&id_z, &ood_z, cfg.metric, DENSE_GRID_POINTS);
        assert!((found.metric_value - grid.metric).abs() < 1e-12);
        assert!(
            found.metric_value >= 0.95,
            "stage {stage}: {}",
            found.metric_value
        );
    }
}

#[test]
fn pinned_eta_keeps_history_constant() {
    let data = clusters(5, 3, 9);
    let cfg = synthetic_config(9);
    let out = fixed_eta_baseline(
        &data.id_train,
        &data.id_test,
        &data.id_classes,
        &data.stream,
        &cfg,
        1.0,
    )
    .unwrap();
    assert!(out.loocv.is_none());
    assert_eq!(out.state.eta_history.len(), 2);
    for h in &out.state.eta_history {
        assert_eq!((h.estimate, h.running), (1.0, 1.0));
    }
    assert!(out
        .reports
        .iter()
        .all(|r| r.method == Method::FixedShels && r.eta == 1.0));
}

#[test]
fn very_negative_eta_rejects_everything() {
    let data = clusters(4, 3, 1);
    let cfg = synthetic_config(1);
    let out = fixed_eta_baseline(
        &data.id_train,
        &data.id_test,
        &data.id_classes,
        &data.stream,
        &cfg,
        -1e6,
    )
    .unwrap();
    for r in &out.reports {
        assert_eq!((r.acc_id, r.acc_ood), (0.0, 1.0));
    }
}

#[test]
fn pinned_loocv_eta_matches_dynamic_first_stage() {
    let data = clusters(4, 3, 12);
    let cfg = synthetic_config(12);
    let dynamic = run_protocol(
        &data.id_train,
        &data.id_test,
        &data.id_classes,
        &data.stream,
        &cfg,
    )
    .unwrap();
    let eta0 = dynamic.loocv.as_ref().unwrap().eta0;
    let pinned = fixed_eta_baseline(
        &data.id_train,
        &data.id_test,
        &data.id_classes,
        &data.stream,
        &cfg,
        eta0,
    )
    .unwrap();
    let d = dynamic
        .reports
        .iter()
        .find(|r| r.method == Method::Dynamic && r.stage == 0)
        .unwrap();
    let p = pinned.reports.iter().find(|r| r.stage == 0).unwrap();
    assert_eq!((d.acc_id, d.acc_ood, d.eta), (p.acc_id, p.acc_ood, p.eta));
    assert_eq!(dynamic.verdicts[0], pinned.verdicts[0]);
}

#[test]
fn methods_share_one_trajectory() {
    let data = clusters(5, 3, 13);
    let all = run_protocol(
        &data.id_train,
        &data.id_test,
        &data.id_classes,
        &data.stream,
        &synthetic_config(13),
    )
    .unwrap();
    let fixed_only = ProtocolConfig {
        methods: vec![Method::FixedShels],
        ..synthetic_config(13)
    };
    let alone = run_protocol(
        &data.id_train,
        &data.id_test,
        &data.id_classes,
        &data.stream,
        &fixed_only,
    )
    .unwrap();
    assert!(weights_equal(&all.state.net, &alone.state.net));
    let from_all: Vec<_> = all
        .reports
        .iter()
        .filter(|r| r.method == Method::FixedShels)
        .collect();
    let from_alone: Vec<_> = alone.reports.iter().collect();
    assert_eq!(from_all, from_alone);
}

#[test]
fn detection_flags_novel_batches() {
    let data = clusters(4, 3, 14);
    let cfg = synthetic_config(14);
    let state =
        ContinualState::initialize(&data.id_train, data.id_classes.clone(), 1.0, &cfg).unwrap();
    let novel = detect_batch(&state, &data.stream[0].train, 0.5).unwrap();
    assert!(matches!(novel, Verdict::ContainsOod(f) if f >= 0.5));
    assert!(detect_batch(&state, &data.id_train.select(&[]), 0.5).is_err());
}

#[test]
fn protocol_is_deterministic() {
    let data = clusters(4, 3, 15);
    let cfg = synthetic_config(15);
    let a = run_protocol(
        &data.id_train,
        &data.id_test,
        &data.id_classes,
        &data.stream,
        &cfg,
    )
    .unwrap();
    let b = run_protocol(
        &data.id_train,
        &data.id_test,
        &data.id_classes,
        &data.stream,
        &cfg,
    )
    .unwrap();
    assert_eq!(a.reports, b.reports);
    assert!(weights_equal(&a.state.net, &b.state.net));
}
