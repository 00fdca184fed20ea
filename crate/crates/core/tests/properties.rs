// SPDX-License-Identifier: Apache-2.0

use contood::continual::{verdict_for, Averaging, Verdict};
use contood::data::{
    encode_cifar10, encode_idx_images, encode_idx_labels, idx_dataset, parse_cifar10,
    parse_idx_images, parse_idx_labels, subset_classes, LabeledDataset, Source, Split,
    CIFAR_PIXELS,
};
use contood::reporting::{aggregate, Method, StageReport};
use contood::scoring::{
    argmax, fit_class_stats, neg_z, ClassStats, Decision, ScoreRow, ScoreTable, ThresholdPolicy,
};
use contood::search::{accuracy_curve, cheat_search, search_z, SearchMetric};
use contood::stats::holm_bonferroni;
use ndarray::Array2;
use proptest::prelude::*;

fn stats_strategy(c: usize) -> impl Strategy<Value = ClassStats> {
    (
        prop::collection::vec(-1.0..1.0f64, c),
        prop::collection::vec(1e-3..0.5f64, c),
    )
        .prop_map(move |(mu, sigma)| ClassStats {
            mu,
            sigma,
            n: vec![10; c],
        })
}

fn policy_and_scores() -> impl Strategy<Value = (ThresholdPolicy, Vec<f64>)> {
    (2usize..8).prop_flat_map(|c| {
        (
            stats_strategy(c),
            -10.0..10.0f64,
            prop::collection::vec(-1.0..1.0f64, c),
        )
            .prop_map(|(stats, eta, scores)| (ThresholdPolicy::new(eta, stats), scores))
    })
}

fn z_lists() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-5.0..5.0f64, 1..60),
        prop::collection::vec(-5.0..8.0f64, 1..60),
    )
}

/// Random labeled table where every class has at least two correct rows
/// with distinct own-class scores.
fn table_strategy() -> impl Strategy<Value = (ScoreTable, ScoreTable)> {
    (2usize..5).prop_flat_map(|c| {
        let id_rows =
            prop::collection::vec((0..c, prop::collection::vec(-1.0..1.0f64, c)), 4 * c..60);
        let ood_rows = prop::collection::vec(prop::collection::vec(-1.0..1.0f64, c), 1..40);
        (id_rows, ood_rows).prop_filter_map(
            "every class needs two correct rows",
            move |(id, ood)| {
                let mut rows: Vec<ScoreRow> = Vec::new();
                for (label, mut scores) in id {
                    scores[label] = 1.0 + scores[label].abs();
                    rows.push(ScoreRow::new(Some(label), scores));
                }
                let id_table = ScoreTable { n_classes: c, rows };
                let stats = fit_class_stats(&id_table).ok()?;
                if stats.sigma.contains(&0.0) {
                    return None;
                }
                let ood_rows = ood.into_iter().map(|s| ScoreRow::new(None, s)).collect();
                Some((
                    id_table,
                    ScoreTable {
                        n_classes: c,
                        rows: ood_rows,
                    },
                ))
            },
        )
    })
}

fn rescale(table: &ScoreTable, a: f64, b: f64) -> ScoreTable {
    ScoreTable {
        n_classes: table.n_classes,
        rows: table
            .rows
            .iter()
            .map(|r| ScoreRow::new(r.true_label, r.scores.iter().map(|s| a * s + b).collect()))
            .collect(),
    }
}

fn dataset(pixels: &[u8], n: usize, dim: usize, labels: Vec<usize>, k: usize) -> LabeledDataset {
    let samples = Array2::from_shape_vec(
        (n, dim),
        pixels.iter().map(|&p| f32::from(p) / 255.0).collect(),
    )
    .unwrap();
    LabeledDataset::new(samples, labels, k, Split::Train, Source::Synthetic).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decide_matches_neg_z((policy, scores) in policy_and_scores()) {
        let c = argmax(&scores);
        let z = neg_z(&policy.stats, c, scores[c]).unwrap();
        let expected = if z < policy.eta { Decision::Id(c) } else { Decision::Ood };
        prop_assert_eq!(policy.decide(&scores), expected);
    }

    #[test]
    fn id_decisions_grow_with_eta((policy, scores) in policy_and_scores(), bump in 0.0..5.0f64) {
        let wider = ThresholdPolicy::new(policy.eta + bump, policy.stats.clone());
        if let Decision::Id(c) = policy.decide(&scores) {
            prop_assert_eq!(wider.decide(&scores), Decision::Id(c));
        }
    }

    #[test]
    fn accuracies_are_monotone_in_eta((id_z, ood_z) in z_lists()) {
        let curve = accuracy_curve(&id_z, &ood_z, SearchMetric::GMean).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[0].eta < w[1].eta);
            prop_assert!(w[0].acc_id <= w[1].acc_id);
            prop_assert!(w[0].acc_ood >= w[1].acc_ood);
        }
    }

    #[test]
    fn search_result_is_consistent((id_z, ood_z) in z_lists()) {
        for metric in [SearchMetric::TotalAccuracy, SearchMetric::GMean] {
            let r = search_z(&id_z, &ood_z, metric).unwrap();
            prop_assert!((r.metric_value - metric.eval(r.acc_id, r.acc_ood)).abs() < 1e-12);
            let curve = accuracy_curve(&id_z, &ood_z, metric).unwrap();
            let first_best = curve.iter().find(|p| p.metric == r.metric_value).unwrap();
            prop_assert_eq!(first_best.eta, r.eta_star);
        }
    }

    #[test]
    fn eta_star_survives_affine_rescaling((id_table, ood_table) in table_strategy(), a in 0.1..10.0f64, b in -5.0..5.0f64) {
        let stats = fit_class_stats(&id_table).unwrap();
        let id2 = rescale(&id_table, a, b);
        let ood2 = rescale(&ood_table, a, b);
        let stats2 = fit_class_stats(&id2).unwrap();
        for metric in [SearchMetric::TotalAccuracy, SearchMetric::GMean] {
            let r1 = cheat_search(&id_table, &ood_table, &stats, metric).unwrap();
            let r2 = cheat_search(&id2, &ood2, &stats2, metric).unwrap();
            prop_assert!((r1.eta_star - r2.eta_star).abs() <= 1e-9 * r1.eta_star.abs().max(1.0), "{} vs {}", r1.eta_star, r2.eta_star);
            prop_assert_eq!(r1.metric_value, r2.metric_value);
        }
    }

    #[test]
    fn duplicate_ood_row_keeps_separable_optimum(
        id_z in prop::collection::vec(-5.0..0.0f64, 1..40),
        ood_z in prop::collection::vec(0.5..6.0f64, 1..40),
        pick in any::<prop::sample::Index>(),
    ) {
        let before = search_z(&id_z, &ood_z, SearchMetric::TotalAccuracy).unwrap();
        let mut more = ood_z.clone();
        more.push(ood_z[pick.index(ood_z.len())]);
        let after = search_z(&id_z, &more, SearchMetric::TotalAccuracy).unwrap();
        prop_assert_eq!(before.eta_star, after.eta_star);
        prop_assert_eq!(after.metric_value, 1.0);
    }

    #[test]
    fn idx_round_trip(n in 1usize..6, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut state = seed;
        let mut next = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (state >> 33) as u8 };
        let pixels: Vec<u8> = (0..n * rows * cols).map(|_| next()).collect();
        let labels: Vec<usize> = (0..n).map(|_| usize::from(next() % 10)).collect();
        let ds = dataset(&pixels, n, rows * cols, labels, 10);
        let images = parse_idx_images(&encode_idx_images(&ds, rows, cols).unwrap()).unwrap();
        prop_assert_eq!(&images.pixels, &pixels);
        let labels = parse_idx_labels(&encode_idx_labels(&ds).unwrap()).unwrap();
        let back = idx_dataset(&images, &labels, 10).unwrap();
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert_eq!(back.samples(), ds.samples());
    }

    #[test]
    fn cifar_round_trip(n in 1usize..3, seed in any::<u64>()) {
        let mut state = seed;
        let mut next = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (state >> 33) as u8 };
        let pixels: Vec<u8> = (0..n * CIFAR_PIXELS).map(|_| next()).collect();
        let labels: Vec<usize> = (0..n).map(|_| usize::from(next() % 10)).collect();
        let ds = dataset(&pixels, n, CIFAR_PIXELS, labels, 10).with_source(Source::Cifar10);
        let back = parse_cifar10(&encode_cifar10(&ds).unwrap()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn subsets_keep_class_counts(labels in prop::collection::vec(0usize..6, 1..80), mask in prop::collection::vec(any::<bool>(), 6)) {
        let n = labels.len();
        let ds = dataset(&vec![0u8; n], n, 1, labels, 6);
        let present = ds.classes_present();
        let wanted: Vec<usize> = present.iter().copied().filter(|&c| mask[c]).collect();
        prop_assume!(!wanted.is_empty());
        let kept = subset_classes(&ds, &wanted, false).unwrap();
        let relabeled = subset_classes(&ds, &wanted, true).unwrap();
        prop_assert_eq!(kept.len(), relabeled.len());
        for (j, &c) in wanted.iter().enumerate() {
            prop_assert_eq!(kept.class_count(c), ds.class_count(c));
            prop_assert_eq!(relabeled.class_count(j), ds.class_count(c));
        }
    }

    #[test]
    fn running_average_is_a_pairwise_fold(eta0 in -5.0..5.0f64, estimates in prop::collection::vec(-5.0..5.0f64, 1..8)) {
        let folded = estimates.iter().fold(eta0, |acc, e| (acc + e) / 2.0);
        let mut running = eta0;
        for e in &estimates {
            running = contood::continual::fold_eta(running, *e, Averaging::Pairwise, 1);
        }
        prop_assert_eq!(running, folded);
    }

    #[test]
    fn rho_one_needs_every_sample(flagged in 0usize..50, extra in 0usize..50) {
        let n = flagged + extra;
        prop_assume!(n > 0);
        let v = verdict_for(flagged as f64 / n as f64, 1.0);
        prop_assert_eq!(matches!(v, Verdict::ContainsOod(_)), flagged == n);
    }

    #[test]
    fn holm_preserves_order(ps in prop::collection::vec(0.0..=1.0f64, 1..20)) {
        let adj = holm_bonferroni(&ps).unwrap();
        for i in 0..ps.len() {
            prop_assert!(adj[i] >= ps[i] && adj[i] <= 1.0);
            for j in 0..ps.len() {
                if ps[i] < ps[j] {
                    prop_assert!(adj[i] <= adj[j]);
                }
            }
        }
    }

    #[test]
    fn aggregate_total_is_linear(values in prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), 2..10)) {
        let reports: Vec<StageReport> = values
            .iter()
            .enumerate()
            .flat_map(|(seed, &(a, b))| {
                [Method::FixedShels, Method::Dynamic].map(|m| StageReport::new(seed as u64, 0, 5, m, a, b, 1.0))
            })
            .collect();
        let rows = aggregate(&reports).unwrap();
        let get = |m: Method, metric: &str| rows.iter().find(|r| r.method == m && r.metric == metric).unwrap().mean;
        for m in [Method::FixedShels, Method::Dynamic] {
            prop_assert!((get(m, "total") - (get(m, "acc_id") + get(m, "acc_ood")) / 2.0).abs() < 1e-12);
        }
    }
}
