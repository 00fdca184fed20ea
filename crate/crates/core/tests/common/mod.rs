// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use contood::continual::{prepare, ProtocolConfig, ProtocolData};
use contood::data::{make_synthetic, SyntheticSpec};

pub const SEPARATION: f64 = 20.0;
pub const DIM: usize = 128;

/// Equidistant clusters `SEPARATION` standard deviations apart.
pub fn clusters(n_classes: usize, n_id: usize, seed: u64) -> ProtocolData {
    let spec = SyntheticSpec::equidistant(n_classes, DIM, SEPARATION, 1.0, 250, seed);
    let (train, test) = make_synthetic(&spec).expect("valid spec");
    prepare(&train, &test, n_id, seed).expect("enough classes")
}

pub fn synthetic_config(seed: u64) -> ProtocolConfig {
    ProtocolConfig {
        hidden: vec![64],
        seed,
        ..ProtocolConfig::default()
    }
}
