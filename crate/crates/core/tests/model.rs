// SPDX-License-Identifier: Apache-2.0

use contood::data::{make_synthetic, SyntheticSpec};
use contood::model::{
    accommodate_class, fit, gradient_check, NetworkState, Objective, TrainConfig,
};
use ndarray::Array2;

fn clusters(seed: u64) -> (contood::data::LabeledDataset, contood::data::LabeledDataset) {
    make_synthetic(&SyntheticSpec::equidistant(3, 12, 8.0, 1.0, 100, seed)).unwrap()
}

#[test]
fn dead_neurons_grow_with_group_penalty() {
    let (train, _) = clusters(21);
    let counts: Vec<usize> = [0.03, 0.3, 1.0]
        .iter()
        .map(|&lambda| {
            let cfg = TrainConfig {
                lambda_group_sparsity: lambda,
                epochs: 15,
                seed: 3,
                ..TrainConfig::default()
            };
            let mut net = NetworkState::new(train.dim(), &[48, 24], 3, 4).unwrap();
            fit(&mut net, &train, &cfg, None).unwrap();
            net.dead_groups(1e-3)
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    assert!(counts[2] > counts[0], "{counts:?}");
}

#[test]
fn stiff_freeze_pins_old_columns_during_accommodation() {
    let (train, _) = clusters(2);
    let mut net = NetworkState::new(train.dim(), &[16], 2, 1).unwrap();
    let two = contood::data::subset_classes(&train, &[0, 1], true).unwrap();
    fit(&mut net, &two, &TrainConfig::default(), None).unwrap();
    let new = contood::data::subset_classes(&train, &[2], false)
        .unwrap()
        .with_label(2, 3)
        .unwrap();
    let cfg = TrainConfig {
        lambda_soft_freeze: 1e6,
        ..TrainConfig::default()
    };
    let grown = accommodate_class(&net, &new, &cfg).unwrap();
    assert_eq!(grown.n_classes(), 3);
    assert!(grown.head_diff(&net) < 1e-3);
    assert!(grown.max_abs_diff(&net) < 1e-3);
}

#[test]
fn gradients_hold_for_single_samples_and_deep_nets() {
    let reference = NetworkState::new(5, &[7, 6, 4], 3, 9).unwrap();
    let mut net = NetworkState::new(5, &[7, 6, 4], 3, 10).unwrap();
    let x = Array2::from_shape_fn((1, 5), |(_, j)| 0.3 * j as f64 - 0.5);
    let obj = Objective {
        lambda_group: 0.01,
        lambda_freeze: 0.1,
        reference: Some(&reference),
    };
    let check = gradient_check(&mut net, x.view(), &[2], &obj).unwrap();
    assert!(check.max_rel_error < 1e-4, "{check:?}");
    assert_eq!(check.per_group.len(), 4);
}

#[test]
fn training_is_reproducible() {
    let (train, _) = clusters(5);
    let cfg = TrainConfig {
        seed: 17,
        ..TrainConfig::default()
    };
    let mut a = NetworkState::new(train.dim(), &[20], 3, 2).unwrap();
    let mut b = a.clone();
    let ha = fit(&mut a, &train, &cfg, None).unwrap();
    let hb = fit(&mut b, &train, &cfg, None).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a, b);
}
