// SPDX-License-Identifier: Apache-2.0

//! Runs the continual protocol on separated Gaussian clusters and prints
//! one line per stage and method.
//!
//! cargo run --release --example synthetic_stream [seed]

use contood::continual::{prepare, run_protocol, ProtocolConfig};
use contood::data::{make_synthetic, SyntheticSpec};

fn main() -> contood::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let (train, test) = make_synthetic(&SyntheticSpec::equidistant(6, 64, 20.0, 1.0, 250, seed))?;
    let data = prepare(&train, &test, 3, seed)?;
    let cfg = ProtocolConfig {
        hidden: vec![64],
        seed,
        ..ProtocolConfig::default()
    };
    let out = run_protocol(
        &data.id_train,
        &data.id_test,
        &data.id_classes,
        &data.stream,
        &cfg,
    )?;

    if let Some(l) = &out.loocv {
        println!(
            "initial eta {:.3} (per held-out class {:?})",
            l.eta0, l.per_class_etas
        );
    }
    for r in &out.reports {
        println!(
            "stage {} ({} ID classes) {:<12} eta {:>6.3}  acc_id {:.3}  acc_ood {:.3}  gmean {:.3}",
            r.stage,
            r.n_id_classes,
            r.method.name(),
            r.eta,
            r.acc_id,
            r.acc_ood,
            r.gmean
        );
    }
    Ok(())
}
